"""Synthetic longitudinal image datasets, missingness, and on-disk formats.

All rendering happens in float64 on analytic signed-distance fields with a
one-pixel anti-aliasing band, then casts to float32, so regeneration from
the same seed is byte-identical. Every sequence draws from its own random
stream keyed by (seed, purpose, sequence index); missingness uses separate
streams from the pixels.
"""

from __future__ import annotations

import colorsys
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import seeding

FORMAT_VERSION = "0.1.0"


class FormatError(RuntimeError):
    """Raised for malformed tensor or dataset files."""


@dataclass
class SequenceBatch:
    """A batch of image sequences with observation and pixel masks.

    data: (n, t, c, h, w) float32 in [0, 1]
    obs_mask: (n, t) uint8, 1 where the frame was observed
    pixel_mask: (n, t, c, h, w) uint8, all ones on unobserved frames
    lengths: (n,) int64 frame counts; defaults to the full t

    unit_range is True for image data; gaussian-family vector data may
    switch it off to carry unbounded values in the same container.
    """

    data: np.ndarray
    obs_mask: np.ndarray
    pixel_mask: np.ndarray
    lengths: np.ndarray = None
    unit_range: bool = True

    def __post_init__(self):
        if self.lengths is None:
            self.lengths = np.full(self.data.shape[0], self.data.shape[1],
                                   dtype=np.int64)
        self.validate()

    def validate(self):
        n, t = self.data.shape[:2]
        if self.data.dtype != np.float32:
            raise ValueError("data must be float32")
        if self.unit_range and (self.data.min() < 0.0 or self.data.max() > 1.0):
            raise ValueError("data must lie in [0, 1]")
        if self.obs_mask.shape != (n, t):
            raise ValueError("obs_mask shape mismatch")
        if self.pixel_mask.shape != self.data.shape:
            raise ValueError("pixel_mask shape mismatch")
        if not np.all(self.obs_mask.sum(axis=1) >= 1):
            raise ValueError("every sequence needs at least one observed frame")
        unobserved = self.obs_mask == 0
        if unobserved.any():
            sub = self.pixel_mask[unobserved]
            if not np.all(sub == 1):
                raise ValueError("pixel_mask must be all ones on unobserved frames")

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def seq_len(self) -> int:
        return self.data.shape[1]

    @property
    def frame_shape(self) -> tuple[int, int, int]:
        return self.data.shape[2:]

    @property
    def frame_dim(self) -> int:
        c, h, w = self.frame_shape
        return c * h * w

    def flat(self) -> np.ndarray:
        """(n, t, d) view of the frames."""
        return self.data.reshape(self.n, self.seq_len, self.frame_dim)

    def flat_pixel_mask(self) -> np.ndarray:
        return self.pixel_mask.reshape(self.n, self.seq_len, self.frame_dim)

    def subset(self, idx) -> "SequenceBatch":
        return SequenceBatch(self.data[idx], self.obs_mask[idx],
                             self.pixel_mask[idx], self.lengths[idx],
                             unit_range=self.unit_range)


def _full_masks(data: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n, t = data.shape[:2]
    return (np.ones((n, t), dtype=np.uint8),
            np.ones(data.shape, dtype=np.uint8))


def _grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    c = (size - 1) / 2.0
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    return xs - c, ys - c


def _aa(dist: np.ndarray) -> np.ndarray:
    # one-pixel linear falloff around the zero level set
    return np.clip(0.5 - dist, 0.0, 1.0)


def gen_rotating_bar(n: int, seq_len: int, size: int = 16, seed: int = 0,
                     index_offset: int = 0) -> SequenceBatch:
    """Grayscale bar of random length and thickness spinning one full turn.

    Frame l is rotated by l * 360/seq_len degrees past a random initial
    angle, so the step between consecutive frames is constant and the
    sequence closes the circle one step after its last frame.
    """
    xs, ys = _grid(size)
    data = np.zeros((n, seq_len, 1, size, size), dtype=np.float32)
    step = 2.0 * np.pi / seq_len
    for i in range(n):
        rng = seeding.stream(seed, seeding.DATA_GEN, index_offset + i)
        half_len = size * rng.uniform(0.25, 0.42)
        half_thick = size * rng.uniform(0.045, 0.10)
        theta0 = rng.uniform(0.0, 2.0 * np.pi)
        for l in range(seq_len):
            theta = theta0 + l * step
            ct, st = np.cos(theta), np.sin(theta)
            xr = xs * ct + ys * st
            yr = -xs * st + ys * ct
            dist = np.maximum(np.abs(xr) - half_len, np.abs(yr) - half_thick)
            data[i, l, 0] = _aa(dist).astype(np.float32)
    obs, pix = _full_masks(data)
    return SequenceBatch(data, obs, pix)


def gen_arm_shape(n: int, seq_len: int, size: int = 16, seed: int = 0,
                  index_offset: int = 0) -> SequenceBatch:
    """Round body with one limb sweeping monotonically upward.

    The limb angle runs from 0 to a per-sequence maximum between 90 and
    150 degrees, linearly in the frame index; body radius and limb length
    jitter per sequence.
    """
    xs, ys = _grid(size)
    data = np.zeros((n, seq_len, 1, size, size), dtype=np.float32)
    for i in range(n):
        rng = seeding.stream(seed, seeding.DATA_GEN, index_offset + i)
        body_r = size * rng.uniform(0.17, 0.22)
        limb_len = size * rng.uniform(0.30, 0.42)
        limb_w = size * rng.uniform(0.035, 0.06)
        phi_max = np.deg2rad(rng.uniform(90.0, 150.0))
        for l in range(seq_len):
            phi = phi_max * l / max(1, seq_len - 1)
            body = _aa(np.hypot(xs, ys) - body_r)
            # screen y grows downward; negate so positive phi sweeps up
            ux, uy = np.cos(phi), -np.sin(phi)
            proj = np.clip(xs * ux + ys * uy, 0.0, limb_len)
            dist = np.hypot(xs - proj * ux, ys - proj * uy) - limb_w
            frame = np.maximum(body, _aa(dist))
            data[i, l, 0] = frame.astype(np.float32)
    obs, pix = _full_masks(data)
    return SequenceBatch(data, obs, pix)


def estimate_limb_angle(frame: np.ndarray, body_radius_px: float = 4.0) -> float:
    """Angle in degrees of lit pixels outside the body disc; the test oracle."""
    img = frame[0] if frame.ndim == 3 else frame
    size = img.shape[0]
    xs, ys = _grid(size)
    outside = (np.hypot(xs, ys) > body_radius_px) & (img > 0.4)
    if not outside.any():
        return 0.0
    w = img[outside]
    cx = float((xs[outside] * w).sum() / w.sum())
    cy = float((ys[outside] * w).sum() / w.sum())
    return float(np.degrees(np.arctan2(-cy, cx)))


AMBIGUOUS_MODES = ("brightness", "scale")


def gen_ambiguous(n: int, seq_len: int, size: int = 16, seed: int = 0,
                  mode_probs: tuple[float, float] = (0.5, 0.5),
                  modes=None, index_offset: int = 0) -> tuple[SequenceBatch, np.ndarray]:
    """RGB disc whose future is ambiguous given the first frame.

    Both modes start from the identical half-intensity disc; one then ramps
    brightness at fixed size, the other grows at fixed brightness. Shared
    shape parameters are drawn before the mode, so forcing a different mode
    (via modes) cannot change frame 0. Returns the batch and the per
    sequence mode indices.
    """
    if abs(sum(mode_probs) - 1.0) > 1e-9:
        raise ValueError("mode probabilities must sum to 1")
    xs, ys = _grid(size)
    data = np.zeros((n, seq_len, 3, size, size), dtype=np.float32)
    chosen = np.zeros(n, dtype=np.int64)
    denom = max(1, seq_len - 1)
    for i in range(n):
        rng = seeding.stream(seed, seeding.DATA_GEN, index_offset + i)
        r0 = size * rng.uniform(0.18, 0.25)
        hue = rng.uniform(0.0, 1.0)
        mode_draw = rng.uniform()
        mode = int(mode_draw >= mode_probs[0])
        if modes is not None:
            mode = int(modes[i])
        chosen[i] = mode
        rgb = np.array(colorsys.hsv_to_rgb(hue, 0.55, 1.0))
        for l in range(seq_len):
            frac = l / denom
            if mode == 0:
                intensity, radius = 0.5 + 0.5 * frac, r0
            else:
                intensity, radius = 0.5, r0 * (1.0 + 0.8 * frac)
            alpha = _aa(np.hypot(xs, ys) - radius)
            frame = alpha[None, :, :] * (intensity * rgb)[:, None, None]
            data[i, l] = frame.astype(np.float32)
    obs, pix = _full_masks(data)
    return SequenceBatch(data, obs, pix), chosen


def classify_ambiguous_mode(frame: np.ndarray) -> str:
    """Label a final frame as 'brightness', 'scale', or 'none'.

    Uses the per-pixel max channel: the brightness mode ends near full
    value, the scale mode stays at half value over a larger area.
    """
    v = frame.max(axis=0)
    lit = int((v > 0.30).sum())
    if lit == 0:
        return "none"
    bright = int((v > 0.70).sum())
    return "brightness" if bright > 0.5 * lit else "scale"


GENERATORS = {
    "rotating-bar": gen_rotating_bar,
    "arm-shape": gen_arm_shape,
}


def apply_missing(batch: SequenceBatch, p_obs: float, p_pix: float,
                  seed: int = 0, index_offset: int = 0) -> SequenceBatch:
    """Drop frames with probability p_obs and pixels of kept frames with p_pix.

    A sequence that would lose every frame redraws its frame mask from the
    same stream until one survives, so the at-least-one-observed invariant
    holds at any p_obs < 1. Data values are untouched; only masks change.
    """
    for name, p in (("p_obs", p_obs), ("p_pix", p_pix)):
        if not 0.0 <= p < 1.0:
            raise ValueError(f"{name} must be in [0, 1), got {p}")
    n, t = batch.obs_mask.shape
    obs = np.ones((n, t), dtype=np.uint8)
    pix = np.ones(batch.data.shape, dtype=np.uint8)
    for i in range(n):
        rng = seeding.stream(seed, seeding.MISSINGNESS, index_offset + i)
        keep = rng.uniform(size=t) >= p_obs
        while not keep.any():
            keep = rng.uniform(size=t) >= p_obs
        obs[i] = keep.astype(np.uint8)
        for l in range(t):
            if keep[l]:
                pix[i, l] = (rng.uniform(size=batch.frame_shape) >= p_pix
                             ).astype(np.uint8)
    return SequenceBatch(batch.data, obs, pix, batch.lengths.copy())


def frame_change_stat(batch: SequenceBatch) -> float:
    """Mean absolute intensity change between consecutive frames."""
    diff = np.abs(np.diff(batch.data, axis=1))
    return float(diff.mean())


# -- binary tensor file ---------------------------------------------------

_MAGIC_TENSOR = b"LFT1"
_DTYPE_CODES = {0: np.float32, 1: np.uint8}
_CODE_FOR = {np.dtype(np.float32): 0, np.dtype(np.uint8): 1}
_MAX_ELEMENTS = 1 << 40


def write_tensor(path, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr)
    code = _CODE_FOR.get(arr.dtype)
    if code is None:
        raise FormatError(f"unsupported dtype {arr.dtype}")
    with open(path, "wb") as f:
        f.write(_MAGIC_TENSOR)
        f.write(struct.pack("<BI", code, arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        if arr.dtype == np.float32:
            f.write(arr.astype("<f4", copy=False).tobytes())
        else:
            f.write(arr.tobytes())


def read_tensor(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if blob[:4] != _MAGIC_TENSOR:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}")
    if len(blob) < 9:
        raise FormatError(f"{path}: truncated header")
    code, rank = struct.unpack("<BI", blob[4:9])
    dtype = _DTYPE_CODES.get(code)
    if dtype is None:
        raise FormatError(f"{path}: unknown dtype code {code}")
    if rank > 8:
        raise FormatError(f"{path}: implausible rank {rank}")
    header_end = 9 + 4 * rank
    if len(blob) < header_end:
        raise FormatError(f"{path}: truncated dims")
    shape = struct.unpack(f"<{rank}I", blob[9:header_end])
    count = 1
    for s in shape:
        count *= s
        if count > _MAX_ELEMENTS:
            raise FormatError(f"{path}: shape overflow {shape}")
    payload = blob[header_end:]
    expected = count * np.dtype(dtype).itemsize
    if len(payload) != expected:
        raise FormatError(
            f"{path}: payload holds {len(payload)} bytes, shape needs {expected}")
    arr = np.frombuffer(payload, dtype="<f4" if dtype == np.float32 else np.uint8)
    return arr.reshape(shape).astype(dtype, copy=True)


def write_batch(dirpath, batch: SequenceBatch) -> None:
    d = Path(dirpath)
    d.mkdir(parents=True, exist_ok=True)
    write_tensor(d / "data.lft", batch.data)
    write_tensor(d / "obs_mask.lft", batch.obs_mask)
    write_tensor(d / "pixel_mask.lft", batch.pixel_mask)


def read_batch(dirpath) -> SequenceBatch:
    d = Path(dirpath)
    return SequenceBatch(
        data=read_tensor(d / "data.lft"),
        obs_mask=read_tensor(d / "obs_mask.lft"),
        pixel_mask=read_tensor(d / "pixel_mask.lft"),
    )


@dataclass
class DatasetManifest:
    dataset: str
    seed: int
    seq_len: int
    frame_size: int
    channels: int
    splits: dict = field(default_factory=dict)
    p_missing_obs: float = 0.0
    p_missing_pix: float = 0.0
    version: str = FORMAT_VERSION

    def dumps(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"

    @staticmethod
    def loads(text: str) -> "DatasetManifest":
        return DatasetManifest(**json.loads(text))


SPLIT_NAMES = ("train", "val", "test")


def make_dataset(kind: str, counts: tuple[int, int, int], seq_len: int,
                 size: int, seed: int, p_obs: float = 0.0,
                 p_pix: float = 0.0) -> tuple[dict, DatasetManifest]:
    """Generate train/val/test batches with disjoint per-sequence streams."""
    if kind == "ambiguous":
        gen = lambda n, offs: gen_ambiguous(
            n, seq_len, size, seed=seed, index_offset=offs)[0]
        channels = 3
    elif kind in GENERATORS:
        base = GENERATORS[kind]
        gen = lambda n, offs: base(n, seq_len, size=size, seed=seed,
                                   index_offset=offs)
        channels = 1
    else:
        raise ValueError(f"unknown dataset kind {kind!r}")
    splits = {}
    offset = 0
    for name, count in zip(SPLIT_NAMES, counts):
        batch = gen(count, offset)
        if p_obs > 0.0 or p_pix > 0.0:
            batch = apply_missing(batch, p_obs, p_pix, seed=seed,
                                  index_offset=offset)
        splits[name] = batch
        offset += count
    manifest = DatasetManifest(
        dataset=kind, seed=seed, seq_len=seq_len, frame_size=size,
        channels=channels, splits={k: v.n for k, v in splits.items()},
        p_missing_obs=p_obs, p_missing_pix=p_pix)
    return splits, manifest


def write_dataset(root, splits: dict, manifest: DatasetManifest) -> None:
    rootp = Path(root)
    rootp.mkdir(parents=True, exist_ok=True)
    for name, batch in splits.items():
        write_batch(rootp / name, batch)
    (rootp / "manifest.json").write_text(manifest.dumps())


def read_dataset(root) -> tuple[dict, DatasetManifest]:
    rootp = Path(root)
    manifest = DatasetManifest.loads((rootp / "manifest.json").read_text())
    splits = {}
    for name in manifest.splits:
        splits[name] = read_batch(rootp / name)
    return splits, manifest
