"""Sectioned key=value experiment configs with a strict schema.

Unknown sections or keys are hard errors; every key has a typed default.
A parsed config can be rendered back to canonical text (every key
explicit, fixed order), which is what gets written next to run outputs
and hashed into checkpoints.
"""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass

from .model import ModelSpec
from .training import TrainConfig


class ConfigError(ValueError):
    """Malformed config text, unknown keys, or bad values."""


def _int(s): return int(s)
def _float(s): return float(s)
def _str(s): return s


def _int_tuple(s):
    s = s.strip()
    if not s:
        return ()
    return tuple(int(p) for p in s.split(","))


def _milestones(s):
    s = s.strip()
    if not s:
        return ()
    out = []
    for part in s.split(","):
        epoch, factor = part.split(":")
        out.append((int(epoch), float(factor)))
    return tuple(out)


def _choice(*options):
    def parse(s):
        if s not in options:
            raise ConfigError(f"must be one of {options}, got {s!r}")
        return s
    return parse


# section -> key -> (parser, default-as-text)
SCHEMA = {
    "data": {
        "path": (_str, ""),
    },
    "model": {
        "latent_dim": (_int, "8"),
        "enc_hidden": (_int_tuple, "256,256"),
        "dec_hidden": (_int_tuple, "256,256"),
        "family": (_choice("bernoulli", "gaussian"), "bernoulli"),
        "sigma2": (_float, "0.05"),
        "prior": (_choice("standard", "vamp"), "standard"),
        "vamp_components": (_int, "16"),
        "posterior": (_choice("gaussian", "iaf"), "gaussian"),
        "post_flow_blocks": (_int, "3"),
        "post_made_layers": (_int, "2"),
        "post_made_hidden": (_int, "128"),
    },
    "flows": {
        "blocks_per_transition": (_int, "2"),
        "made_layers": (_int, "3"),
        "made_hidden": (_int, "128"),
    },
    "train": {
        "epochs": (_int, "100"),
        "warmup_epochs": (_int, "10"),
        "batch_size": (_int, "64"),
        "lr": (_float, "0.001"),
        "lr_schedule": (_milestones, "50:0.5,75:0.5,90:0.5"),
        "seed": (_int, "0"),
        "recon_divisor": (_choice("nominal", "observed"), "nominal"),
    },
    "eval": {
        "importance_samples": (_int, "100"),
        "policy": (_choice("fixed-j", "average-j"), "fixed-j"),
        "seed": (_int, "0"),
    },
    "out": {
        "dir": (_str, "runs/exp"),
    },
}

_SECTION_ORDER = ("data", "model", "flows", "train", "eval", "out")


@dataclass
class ExperimentConfig:
    """All sections resolved to typed values plus the raw text fields."""

    values: dict

    def __getitem__(self, section_key: tuple[str, str]):
        return self.values[section_key]

    def section(self, name: str) -> dict:
        return {k: v for (s, k), v in self.values.items() if s == name}

    def model_spec(self) -> ModelSpec:
        m = self.section("model")
        return ModelSpec(
            latent_dim=m["latent_dim"], enc_hidden=m["enc_hidden"],
            dec_hidden=m["dec_hidden"], family=m["family"],
            sigma2=m["sigma2"], prior=m["prior"],
            vamp_components=m["vamp_components"], posterior=m["posterior"],
            post_flow_blocks=m["post_flow_blocks"],
            post_made_layers=m["post_made_layers"],
            post_made_hidden=m["post_made_hidden"])

    def train_config(self) -> TrainConfig:
        t = self.section("train")
        return TrainConfig(
            epochs=t["epochs"], warmup_epochs=t["warmup_epochs"],
            batch_size=t["batch_size"], lr=t["lr"],
            lr_milestones=t["lr_schedule"], seed=t["seed"],
            recon_divisor=t["recon_divisor"])

    def resolved_text(self) -> str:
        lines = []
        for section in _SECTION_ORDER:
            lines.append(f"[{section}]")
            for key in SCHEMA[section]:
                lines.append(f"{key} = {render_value(self.values[(section, key)])}")
            lines.append("")
        return "\n".join(lines)

    def hash(self) -> str:
        return hashlib.sha256(self.resolved_text().encode()).hexdigest()[:16]


def render_value(v) -> str:
    if isinstance(v, tuple):
        if v and isinstance(v[0], tuple):
            return ",".join(f"{e}:{f:g}" for e, f in v)
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return f"{v:g}"
    return str(v)


def _read_sections(text: str) -> configparser.ConfigParser:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config parse error: {exc}") from exc
    return parser


def parse_config(text: str, overrides: dict | None = None) -> ExperimentConfig:
    """Parse config text, filling defaults and rejecting unknown keys."""
    parser = _read_sections(text)
    raw: dict[tuple[str, str], str] = {}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        for key, value in parser.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            raw[(section, key)] = value
    if overrides:
        raw.update(overrides)
    values = {}
    for section, keys in SCHEMA.items():
        for key, (fn, default) in keys.items():
            text_val = raw.get((section, key), default)
            try:
                values[(section, key)] = fn(text_val)
            except ConfigError:
                raise
            except Exception as exc:
                raise ConfigError(
                    f"bad value for [{section}] {key}: {text_val!r} ({exc})"
                ) from exc
    return ExperimentConfig(values)


def parse_config_file(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as f:
        return parse_config(f.read())


def expand_sweep(text: str) -> list[tuple[str, ExperimentConfig]]:
    """Expand '|'-separated alternatives into the cartesian set of configs.

    Returns (label, config) pairs; labels concatenate the swept key=value
    choices in schema order.
    """
    parser = _read_sections(text)
    fixed: dict[tuple[str, str], str] = {}
    swept: list[tuple[tuple[str, str], list[str]]] = []
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        for key, value in parser.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            if "|" in value:
                options = [v.strip() for v in value.split("|")]
                swept.append(((section, key), options))
            else:
                fixed[(section, key)] = value
    combos: list[list[tuple[tuple[str, str], str]]] = [[]]
    for key, options in swept:
        combos = [c + [(key, opt)] for c in combos for opt in options]
    out = []
    for combo in combos:
        overrides = dict(fixed)
        overrides.update(dict(combo))
        label = "_".join(f"{k[1]}={v}" for k, v in combo) or "single"
        out.append((label, parse_config("", overrides=overrides)))
    return out
