"""Command-line front end for datasets, training, evaluation and generation.

Exit codes: 0 success, 1 usage error, 2 runtime or numeric error,
3 selftest failure. LONGIFLOW_PRECISION picks f32/f64 for the whole
process; LONGIFLOW_THREADS bounds read-only evaluation parallelism.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, seeding
from . import tensor as T
from .checkpoint import Checkpoint, load_checkpoint, restore_params
from .config import (ConfigError, ExperimentConfig, expand_sweep,
                     parse_config, render_value)
from .datasets import (FormatError, SequenceBatch, make_dataset,
                       frame_change_stat, read_dataset, read_tensor,
                       write_dataset, write_tensor)
from .flows import FlowChain, SingularFlowError
from .inference import (generate_conditional, generate_unconditional,
                        impute_dataset, masked_mse, naive_impute_dataset,
                        nll_dataset)
from .model import build_model
from .pngio import save_grid
from .selftest import format_battery, run_battery
from .tensor import GraphError, NumericsError
from .training import TrainingDiverged, all_params, train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
EXIT_SELFTEST = 3

DATASET_KINDS = ("rotating-bar", "arm-shape", "ambiguous")
EVAL_HEADER = "seq_id,metric,value,S,policy"
EVAL_REPS = 5


class CliError(RuntimeError):
    """Bad arguments or argument combinations; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


def _threads() -> int:
    raw = os.environ.get("LONGIFLOW_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise CliError(f"LONGIFLOW_THREADS must be an integer, got {raw!r}")


def _snapshot_text(command: str, pairs) -> str:
    lines = [f"# longiflow {__version__}", f"[{command}]"]
    for k, v in pairs:
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


def _write_snapshot(out_dir: Path, text: str) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.resolved").write_text(text)


def _parse_overrides(pairs) -> dict:
    out = {}
    for raw in pairs or []:
        if "=" not in raw or "." not in raw.split("=", 1)[0]:
            raise CliError(f"override {raw!r} is not section.key=value")
        key, value = raw.split("=", 1)
        section, name = key.split(".", 1)
        out[(section.strip(), name.strip())] = value.strip()
    return out


def _load_run(ckpt_path: str) -> tuple[Checkpoint, ExperimentConfig, object, FlowChain]:
    """Rebuild model and chain next to a checkpoint and load its weights.

    The resolved config written at training time lives beside the
    checkpoint; the chain length is recovered from the stored parameter
    names so evaluation does not depend on the original dataset.
    """
    path = Path(ckpt_path)
    if not path.exists():
        raise FormatError(f"checkpoint {path} does not exist")
    ck = load_checkpoint(path)
    cfg_path = path.parent / "config.resolved"
    if not cfg_path.exists():
        raise FormatError(f"missing {cfg_path} next to the checkpoint")
    cfg = parse_config(cfg_path.read_text())
    if ck.config_hash and cfg.hash() != ck.config_hash:
        raise FormatError("config.resolved does not match the checkpoint's "
                          "config hash")
    if "enc.w0" not in ck.params:
        raise FormatError("checkpoint has no encoder parameters")
    data_dim = ck.params["enc.w0"].shape[0]
    n_transitions = 0
    for name in ck.params:
        if name.startswith("flow.t"):
            n_transitions = max(n_transitions, int(name[6:].split(".", 1)[0]))
    fl = cfg.section("flows")
    spec = cfg.model_spec()
    model = build_model(spec, data_dim, seed=cfg[("train", "seed")])
    chain = FlowChain(n_transitions, spec.latent_dim,
                      blocks_per_transition=fl["blocks_per_transition"],
                      made_layers=fl["made_layers"],
                      made_hidden=fl["made_hidden"],
                      seed=cfg[("train", "seed")])
    restore_params(all_params(model, chain), ck)
    return ck, cfg, model, chain


def _load_split(data_dir: str, split: str) -> tuple[SequenceBatch, object]:
    splits, manifest = read_dataset(data_dir)
    if split not in splits:
        raise CliError(f"split {split!r} not in dataset "
                       f"(has {sorted(splits)})")
    return splits[split], manifest


def _write_csv(path: Path, rows) -> None:
    lines = [EVAL_HEADER]
    for seq_id, metric, value, s, policy in rows:
        if isinstance(value, float):
            value = f"{value:.10g}"
        lines.append(f"{seq_id},{metric},{value},{s},{policy}")
    path.write_text("\n".join(lines) + "\n")


# -- commands ---------------------------------------------------------------


def cmd_make_data(args) -> int:
    if args.split:
        try:
            counts = tuple(int(x) for x in args.split.split(","))
        except ValueError:
            raise CliError("--split must be three comma-separated counts")
        if len(counts) != 3 or min(counts) < 1:
            raise CliError("--split must be three positive counts")
    else:
        counts = (args.n, max(1, args.n // 4), max(1, args.n // 4))
    splits, manifest = make_dataset(
        args.dataset, counts, args.seq_len, args.size, args.seed,
        p_obs=args.p_missing_obs, p_pix=args.p_missing_pix)
    out = Path(args.out or f"data/{args.dataset}")
    write_dataset(out, splits, manifest)
    _write_snapshot(out, _snapshot_text("make-data", [
        ("dataset", args.dataset), ("counts", ",".join(map(str, counts))),
        ("seq_len", args.seq_len), ("size", args.size), ("seed", args.seed),
        ("p_missing_obs", render_value(args.p_missing_obs)),
        ("p_missing_pix", render_value(args.p_missing_pix))]))
    total = sum(counts)
    print(f"wrote {total} sequences ({counts[0]}/{counts[1]}/{counts[2]} "
          f"train/val/test) to {out}")
    return EXIT_OK


def _pseudo_frames(batch: SequenceBatch, k: int, seed: int) -> np.ndarray:
    """K random observed frames, the usual VAMP pseudo-input start."""
    rng = seeding.stream(seed, seeding.PSEUDO_INIT, 0)
    pairs = np.argwhere(batch.obs_mask == 1)
    sel = pairs[rng.integers(pairs.shape[0], size=k)]
    return batch.flat()[sel[:, 0], sel[:, 1]].astype(np.float64)


def cmd_train(args) -> int:
    cfg = parse_config(Path(args.config).read_text(),
                       overrides=_parse_overrides(args.set))
    result = _run_training(cfg)
    tc = cfg.train_config()
    print(f"trained {tc.epochs} epochs; best val loss "
          f"{result.best_val:.6g} at epoch {result.best_epoch}")
    print(f"checkpoints: {result.best_path} {result.final_path}")
    return EXIT_OK


def cmd_eval_nll(args) -> int:
    ck, cfg, model, chain = _load_run(args.ckpt)
    batch, _ = _load_split(args.data, args.split)
    if batch.frame_dim != model.data_dim:
        raise FormatError(
            f"dataset frames have {batch.frame_dim} values but the model "
            f"expects {model.data_dim}")
    ev = cfg.section("eval")
    S = args.importance_samples or ev["importance_samples"]
    policy = args.policy or ev["policy"]
    seed = ev["seed"] if args.seed is None else args.seed
    if S < 1:
        raise CliError("importance sample count must be >= 1")

    out_dir = Path(args.out or Path(args.ckpt).parent / f"eval-{args.split}")
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    rep_means = []
    for rep in range(EVAL_REPS):
        vals = nll_dataset(model, chain, batch, S, policy, seed + rep,
                           threads=_threads())
        rep_means.append(float(vals.mean()))
        for i, v in enumerate(vals):
            rows.append((i, f"nll_rep{rep}", float(v), S, policy))
    mean = float(np.mean(rep_means))
    std = float(np.std(rep_means, ddof=1))
    rows.append(("all", "nll_mean", mean, S, policy))
    rows.append(("all", "nll_std", std, S, policy))
    _write_csv(out_dir / "nll.csv", rows)
    _write_snapshot(out_dir, _snapshot_text("eval-nll", [
        ("ckpt", args.ckpt), ("data", args.data), ("split", args.split),
        ("importance_samples", S), ("policy", policy), ("seed", seed),
        ("reps", EVAL_REPS)]))
    print(f"per-frame NLL over {batch.n} sequences, {EVAL_REPS} seeds: "
          f"{mean:.6g} +- {std:.3g}")
    print(f"wrote {out_dir / 'nll.csv'}")
    return EXIT_OK


def _mse_rows(rows, results, batch, spi, policy):
    flat = batch.flat().astype(np.float64)
    miss = 1.0 - (batch.obs_mask[:, :, None] * batch.flat_pixel_mask())
    all_vals, miss_vals = [], []
    for i, r in enumerate(results):
        pred = r.completed.reshape(batch.seq_len, -1).astype(np.float64)
        ones = np.ones_like(pred)
        v_all = masked_mse(pred, flat[i], ones)
        all_vals.append(v_all)
        rows.append((i, "mse_all", v_all, spi, policy))
        if miss[i].sum() > 0:
            v_miss = masked_mse(pred, flat[i], miss[i])
            miss_vals.append(v_miss)
            rows.append((i, "mse_missing", v_miss, spi, policy))
        else:
            rows.append((i, "mse_missing", "", spi, policy))
        rows.append((i, "j_opt", r.j_opt, spi, policy))
    rows.append(("all", "mse_all_mean", float(np.mean(all_vals)), spi, policy))
    if miss_vals:
        rows.append(("all", "mse_missing_mean", float(np.mean(miss_vals)),
                     spi, policy))
    else:
        rows.append(("all", "mse_missing_mean", "", spi, policy))
    return float(np.mean(miss_vals)) if miss_vals else None


def cmd_impute(args) -> int:
    ck, cfg, model, chain = _load_run(args.ckpt)
    batch, _ = _load_split(args.data, args.split)
    if batch.frame_dim != model.data_dim:
        raise FormatError(
            f"dataset frames have {batch.frame_dim} values but the model "
            f"expects {model.data_dim}")
    if args.samples_per_index < 1:
        raise CliError("--samples-per-index must be >= 1")

    out_dir = Path(args.out or Path(args.ckpt).parent / f"impute-{args.split}")
    out_dir.mkdir(parents=True, exist_ok=True)
    results = impute_dataset(model, chain, batch, args.samples_per_index,
                             args.seed, threads=_threads())
    naive = naive_impute_dataset(model, chain, batch, args.seed,
                                 threads=_threads())

    completed = np.stack([r.completed for r in results])
    write_tensor(out_dir / "completed.lft", completed.astype(np.float32))
    naive_completed = np.stack([r.completed for r in naive])
    write_tensor(out_dir / "naive_completed.lft",
                 naive_completed.astype(np.float32))
    save_grid(out_dir / "imputed.png", completed[: min(8, batch.n)])

    rows = []
    mse = _mse_rows(rows, results, batch, args.samples_per_index, "best-j")
    mse_naive = _mse_rows(rows, naive, batch, 1, "naive")
    _write_csv(out_dir / "impute.csv", rows)
    _write_snapshot(out_dir, _snapshot_text("impute", [
        ("ckpt", args.ckpt), ("data", args.data), ("split", args.split),
        ("samples_per_index", args.samples_per_index), ("seed", args.seed)]))
    if mse is None:
        print("no missing pixels in this split; mse_missing left empty")
    else:
        print(f"missing-pixel MSE: {mse:.6g} (naive {mse_naive:.6g})")
    print(f"wrote {out_dir / 'impute.csv'}")
    return EXIT_OK


def cmd_generate(args) -> int:
    ck, cfg, model, chain = _load_run(args.ckpt)
    if args.timesteps > chain.n_transitions:
        raise CliError(
            f"--timesteps {args.timesteps} exceeds the trained chain "
            f"length {chain.n_transitions}")
    n_steps = args.timesteps + 1
    frame_shape = _resolve_frame_shape(args, cfg, model.data_dim)
    rng = seeding.stream(args.seed, seeding.EVAL, 0)
    if args.condition_on:
        frame = read_tensor(args.condition_on).astype(np.float64)
        if frame.size != model.data_dim:
            raise FormatError(
                f"conditioning frame has {frame.size} values but the model "
                f"expects {model.data_dim}")
        if not 0 <= args.index <= chain.n_transitions:
            raise CliError(f"--index {args.index} outside the chain range")
        frames = generate_conditional(model, chain, frame, args.index,
                                      args.n, n_steps, rng, frame_shape)
        mode = f"conditional at index {args.index}"
    else:
        frames = generate_unconditional(model, chain, args.n, n_steps, rng,
                                        frame_shape)
        mode = "unconditional"

    out_dir = Path(args.out or Path(args.ckpt).parent / "generate")
    out_dir.mkdir(parents=True, exist_ok=True)
    write_tensor(out_dir / "samples.lft", frames)
    save_grid(out_dir / "grid.png", frames)
    _write_snapshot(out_dir, _snapshot_text("generate", [
        ("ckpt", args.ckpt), ("n", args.n), ("timesteps", args.timesteps),
        ("seed", args.seed), ("condition_on", args.condition_on or ""),
        ("index", args.index)]))
    print(f"generated {args.n} {mode} sequences of {n_steps} frames")
    print(f"wrote {out_dir / 'samples.lft'} and {out_dir / 'grid.png'}")
    return EXIT_OK


def _resolve_frame_shape(args, cfg: ExperimentConfig, data_dim: int):
    if args.frame_shape:
        try:
            shape = tuple(int(x) for x in args.frame_shape.split(","))
        except ValueError:
            raise CliError("--frame-shape must be c,h,w integers")
        if len(shape) != 3:
            raise CliError("--frame-shape must be c,h,w integers")
    else:
        data_path = cfg[("data", "path")]
        try:
            _, manifest = read_dataset(data_path)
        except OSError:
            raise CliError(
                "cannot infer the frame shape: the training dataset is "
                "gone, pass --frame-shape c,h,w")
        shape = (manifest.channels, manifest.frame_size, manifest.frame_size)
    if int(np.prod(shape)) != data_dim:
        raise CliError(f"frame shape {shape} does not match the model's "
                       f"{data_dim} values per frame")
    return shape


def cmd_selftest(args) -> int:
    names = None
    if args.only:
        names = [s.strip() for s in args.only.split(",")]
    try:
        with T.using_precision("f64"):
            rows = run_battery(names)
    except KeyError as e:
        raise CliError(str(e)) from e
    print(format_battery(rows))
    return EXIT_OK if all(r.passed for r in rows) else EXIT_SELFTEST


def cmd_sweep(args) -> int:
    text = Path(args.config).read_text()
    runs = expand_sweep(text)
    print(f"sweep expands to {len(runs)} runs")
    for label, cfg in runs:
        run_dir = Path(cfg[("out", "dir")]) / label
        combo = parse_config(cfg.resolved_text(),
                             overrides={("out", "dir"): str(run_dir)})
        result = _run_training(combo)
        print(f"  {label}: best val {result.best_val:.6g} "
              f"at epoch {result.best_epoch}")
    return EXIT_OK


def _run_training(cfg: ExperimentConfig):
    data_path = cfg[("data", "path")]
    if not data_path:
        raise ConfigError("config [data] path is empty")
    splits, _ = read_dataset(data_path)
    if "train" not in splits:
        raise FormatError(f"dataset {data_path} has no train split")
    out_dir = Path(cfg[("out", "dir")])
    _write_snapshot(out_dir,
                    f"# longiflow {__version__}\n" + cfg.resolved_text())
    spec = cfg.model_spec()
    tc = cfg.train_config()
    pseudo = None
    if spec.prior == "vamp":
        pseudo = _pseudo_frames(splits["train"], spec.vamp_components,
                                tc.seed)
    model = build_model(spec, splits["train"].frame_dim, seed=tc.seed,
                        pseudo_init=pseudo)
    fl = cfg.section("flows")
    chain = FlowChain(splits["train"].seq_len - 1, spec.latent_dim,
                      blocks_per_transition=fl["blocks_per_transition"],
                      made_layers=fl["made_layers"],
                      made_hidden=fl["made_hidden"], seed=tc.seed)
    return train(model, chain, splits, tc, out_dir, config_hash=cfg.hash())


# -- wiring -----------------------------------------------------------------


def build_parser() -> _Parser:
    p = _Parser(prog="longiflow",
                description="sequence model experiments")
    p.add_argument("--version", action="version",
                   version=f"longiflow {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    mk = sub.add_parser("make-data", help="generate a synthetic dataset")
    mk.add_argument("--dataset", required=True, choices=DATASET_KINDS)
    mk.add_argument("--out", default=None)
    mk.add_argument("--n", type=int, default=512,
                    help="training sequences; val/test default to n/4")
    mk.add_argument("--split", default=None,
                    help="explicit train,val,test counts")
    mk.add_argument("--seq-len", type=int, default=8)
    mk.add_argument("--size", type=int, default=16)
    mk.add_argument("--seed", type=int, default=0)
    mk.add_argument("--p-missing-obs", type=float, default=0.0)
    mk.add_argument("--p-missing-pix", type=float, default=0.0)
    mk.set_defaults(fn=cmd_make_data)

    tr = sub.add_parser("train", help="train from a config file")
    tr.add_argument("config")
    tr.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                    help="override a config value")
    tr.set_defaults(fn=cmd_train)

    ev = sub.add_parser("eval-nll", help="importance-weighted NLL")
    ev.add_argument("--ckpt", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--split", default="test")
    ev.add_argument("--importance-samples", type=int, default=None)
    ev.add_argument("--policy", choices=("fixed-j", "average-j"),
                    default=None)
    ev.add_argument("--seed", type=int, default=None)
    ev.add_argument("--out", default=None)
    ev.set_defaults(fn=cmd_eval_nll)

    im = sub.add_parser("impute", help="fill missing frames and pixels")
    im.add_argument("--ckpt", required=True)
    im.add_argument("--data", required=True)
    im.add_argument("--split", default="test")
    im.add_argument("--samples-per-index", type=int, default=8)
    im.add_argument("--seed", type=int, default=0)
    im.add_argument("--out", default=None)
    im.set_defaults(fn=cmd_impute)

    ge = sub.add_parser("generate", help="sample sequences from a model")
    ge.add_argument("--ckpt", required=True)
    ge.add_argument("--n", type=int, default=4)
    ge.add_argument("--timesteps", "-T", type=int, default=7,
                    help="transitions to run; frames = timesteps + 1")
    ge.add_argument("--seed", type=int, default=0)
    ge.add_argument("--out", default=None)
    ge.add_argument("--condition-on", default=None, metavar="FRAME.LFT")
    ge.add_argument("--index", type=int, default=0,
                    help="timestep of the conditioning frame")
    ge.add_argument("--frame-shape", default=None, metavar="C,H,W")
    ge.set_defaults(fn=cmd_generate)

    st = sub.add_parser("selftest", help="run the verification battery")
    st.add_argument("--only", default=None,
                    help="comma-separated subset of checks")
    st.set_defaults(fn=cmd_selftest)

    sw = sub.add_parser("sweep", help="train every combination in a config "
                                      "with |-separated values")
    sw.add_argument("config")
    sw.set_defaults(fn=cmd_sweep)
    return p


def main(argv=None) -> int:
    precision = os.environ.get("LONGIFLOW_PRECISION", "f32")
    try:
        if precision not in ("f32", "f64"):
            raise CliError(
                f"LONGIFLOW_PRECISION must be f32 or f64, got {precision!r}")
        T.set_precision(precision)
        parser = build_parser()
        args = parser.parse_args(argv)
        return args.fn(args)
    except CliError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, FormatError, NumericsError, GraphError,
            TrainingDiverged, SingularFlowError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
