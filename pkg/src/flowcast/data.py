"""Synthetic radar-like sequences, windowing, scaling, and the tensor container.

Sequences are Gaussian precipitation cells advected on a torus with
diffusion and multiplicative stochastic growth/decay. The torus keeps mass
from leaving the domain, so long-horizon statistics stay stationary; the
multiplicative noise is what makes far lead times genuinely uncertain.

On-disk format (RTEN): 8-byte magic "RTEN0001", 4-byte little-endian
header length, UTF-8 JSON header {dtype, shape, order}, then the raw
little-endian row-major payload. A dataset directory holds one RTEN file
per 25-frame window plus a manifest.json with split assignments.
"""
from __future__ import annotations

import json
import struct
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, DimensionError, FormatError

FULL_SCALE = 255.0

RTEN_MAGIC = b"RTEN0001"
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


# -- tensor container --------------------------------------------------------


def save_tensor(path, t: np.ndarray) -> None:
    t = np.asarray(t)
    if t.dtype == np.float32:
        code, payload = "f32", t.astype("<f4", copy=False)
    elif t.dtype == np.float64:
        code, payload = "f64", t.astype("<f8", copy=False)
    else:
        raise FormatError(f"only float32/float64 tensors are stored, got {t.dtype}")
    header = json.dumps({"dtype": code, "shape": list(t.shape), "order": "rowmajor"}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(RTEN_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(np.ascontiguousarray(payload).tobytes())


def load_tensor(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < 12 or blob[:8] != RTEN_MAGIC:
        raise FormatError(f"{path}: bad magic at offset 0 (expected {RTEN_MAGIC!r})")
    (hlen,) = struct.unpack("<I", blob[8:12])
    if len(blob) < 12 + hlen:
        raise FormatError(f"{path}: truncated header at offset 12 (need {hlen} bytes, have {len(blob) - 12})")
    try:
        header = json.loads(blob[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unparseable header at offset 12: {exc}") from exc
    for key in ("dtype", "shape", "order"):
        if key not in header:
            raise FormatError(f"{path}: header missing {key!r}")
    if header["order"] != "rowmajor":
        raise FormatError(f"{path}: unsupported order {header['order']!r}")
    if header["dtype"] not in _DTYPES:
        raise FormatError(f"{path}: unsupported dtype {header['dtype']!r}")
    dt = _DTYPES[header["dtype"]]
    shape = tuple(int(s) for s in header["shape"])
    want = dt.itemsize * int(np.prod(shape, dtype=np.int64))
    got = len(blob) - 12 - hlen
    if got != want:
        raise FormatError(f"{path}: truncated payload at offset {12 + hlen} (expected {want} bytes, got {got})")
    arr = np.frombuffer(blob, dtype=dt, count=int(np.prod(shape, dtype=np.int64)), offset=12 + hlen)
    return arr.reshape(shape).astype(dt.newbyteorder("="), copy=True)


# -- scaling ----------------------------------------------------------------


def normalize(raw: np.ndarray, full_scale: float = FULL_SCALE) -> np.ndarray:
    """Map the raw 0..full_scale echo scale to [0,1]; out-of-range values clamp."""
    raw = np.asarray(raw)
    bad = int(np.count_nonzero((raw < 0) | (raw > full_scale)))
    if bad:
        warnings.warn(f"normalize clamped {bad} out-of-range values", stacklevel=2)
        raw = np.clip(raw, 0.0, full_scale)
    return raw / raw.dtype.type(full_scale) if raw.dtype in (np.float32, np.float64) else raw / full_scale


def denormalize(norm: np.ndarray, full_scale: float = FULL_SCALE) -> np.ndarray:
    norm = np.asarray(norm)
    return norm * norm.dtype.type(full_scale) if norm.dtype in (np.float32, np.float64) else norm * full_scale


# -- synthetic sequences ------------------------------------------------


@dataclass
class AdvectionParams:
    """Defaults give few large, nearly saturated cells drifting slowly under
    blob-scale multiplicative decay noise: position stays predictable while
    intensity grows genuinely uncertain with horizon, so a posterior-mean
    forecast fades through the upper verification thresholds."""

    n_cells: int = 2
    velocity: tuple[float, float] | None = None  # (vx, vy) pixels/frame; None: drawn per sequence
    max_speed: float = 0.6
    diffusion: float = 0.02
    growth_decay: float = -0.02
    noise: float = 0.18
    noise_corr: float = 8.0  # spatial correlation length of the growth field, pixels
    amp_range: tuple[float, float] = (0.8, 1.0)
    sigma_range: tuple[float, float] = (4.5, 7.0)


@dataclass
class RadarSequence:
    frames: np.ndarray  # [T, 1, H, W] float32 in [0,1]
    seed: int
    params: AdvectionParams


@dataclass
class WindowSample:
    input: np.ndarray  # [L_in, 1, H, W]
    target: np.ndarray  # [L_out, 1, H, W]


def _toroidal_shift(field: np.ndarray, vx: float, vy: float) -> np.ndarray:
    """Shift a [H,W] field by (vx right, vy down) with periodic wrap.

    Integer shifts are exact rolls; fractional shifts interpolate bilinearly.
    """
    iy, ix = int(np.floor(vy)), int(np.floor(vx))
    fy, fx = vy - iy, vx - ix
    if fx == 0.0 and fy == 0.0:
        return np.roll(field, (iy, ix), axis=(0, 1))
    r00 = np.roll(field, (iy, ix), axis=(0, 1))
    r01 = np.roll(field, (iy, ix + 1), axis=(0, 1))
    r10 = np.roll(field, (iy + 1, ix), axis=(0, 1))
    r11 = np.roll(field, (iy + 1, ix + 1), axis=(0, 1))
    return ((1 - fy) * (1 - fx)) * r00 + ((1 - fy) * fx) * r01 + (fy * (1 - fx)) * r10 + (fy * fx) * r11


def _laplacian(field: np.ndarray) -> np.ndarray:
    return (
        np.roll(field, 1, axis=0)
        + np.roll(field, -1, axis=0)
        + np.roll(field, 1, axis=1)
        + np.roll(field, -1, axis=1)
        - 4.0 * field
    )


def _initial_field(rng: np.random.Generator, h: int, w: int, params: AdvectionParams) -> np.ndarray:
    field = np.zeros((h, w))
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(params.n_cells):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        sigma = rng.uniform(*params.sigma_range)
        amp = rng.uniform(*params.amp_range)
        dy = (yy - cy + h / 2) % h - h / 2
        dx = (xx - cx + w / 2) % w - w / 2
        field += amp * np.exp(-(dx * dx + dy * dy) / (2 * sigma * sigma))
    return np.clip(field, 0.0, 1.0)


def _growth_field(rng: np.random.Generator, h: int, w: int, corr: float) -> np.ndarray:
    white = rng.standard_normal((h, w))
    smooth = gaussian_filter(white, sigma=corr, mode="wrap")
    std = smooth.std()
    return smooth / std if std > 0 else smooth


def synth_advection(seed: int, n_sequences: int, t_total: int, h: int, w: int,
                    params: AdvectionParams | None = None) -> list[RadarSequence]:
    """Generate advecting-cell echo sequences, deterministic given `seed`."""
    params = params or AdvectionParams()
    if t_total < 25:
        raise ConfigError(f"sequences must have at least 25 frames for windowing, got {t_total}")
    if h not in (32, 64) or w not in (32, 64):
        raise ConfigError(f"supported grid sizes are 32 and 64, got {h}x{w}")
    sequences = []
    for idx, child in enumerate(np.random.SeedSequence(seed).spawn(n_sequences)):
        rng = np.random.default_rng(child)
        if params.velocity is None:
            vx, vy = rng.uniform(-params.max_speed, params.max_speed, size=2)
        else:
            vx, vy = params.velocity
        field = _initial_field(rng, h, w, params)
        frames = np.empty((t_total, 1, h, w), dtype=np.float32)
        frames[0, 0] = field
        for t in range(1, t_total):
            field = _toroidal_shift(field, vx, vy)
            if params.diffusion:
                field = field + params.diffusion * _laplacian(field)
            if params.noise > 0:
                eta = _growth_field(rng, h, w, params.noise_corr)
                field = field * np.exp(params.growth_decay + params.noise * eta)
            elif params.growth_decay:
                field = field * np.exp(params.growth_decay)
            field = np.clip(field, 0.0, 1.0)
            frames[t, 0] = field
        sequences.append(RadarSequence(frames=frames, seed=seed + idx, params=params))
    return sequences


def window_samples(seq: RadarSequence, window: int = 25, stride: int = 5,
                   split_in: int = 5) -> list[WindowSample]:
    """Cut overlapping windows at offsets 0, stride, 2*stride, ...

    The first `split_in` frames of each window are the input, the rest the
    target. Samples own their data (mutating one never touches the source).
    """
    if not 0 < split_in < window:
        raise ConfigError(f"split_in must be in (0, window), got {split_in}")
    t = seq.frames.shape[0]
    out = []
    for start in range(0, t - window + 1, stride):
        chunk = seq.frames[start : start + window]
        out.append(WindowSample(input=chunk[:split_in].copy(), target=chunk[split_in:].copy()))
    return out


# -- dataset directories ---------------------------------------------------


@dataclass
class DatasetMeta:
    h: int
    w: int
    seed: int
    window: int = 25
    stride: int = 5
    split_in: int = 5
    advection: dict = field(default_factory=dict)


def save_dataset(out_dir, splits: dict[str, list[WindowSample]], meta: DatasetMeta) -> Path:
    out_dir = Path(out_dir)
    (out_dir / "samples").mkdir(parents=True, exist_ok=True)
    manifest = {"format": "flowcast-dataset-v1", **asdict(meta), "splits": {}}
    for split, samples in splits.items():
        rels = []
        for i, s in enumerate(samples):
            rel = f"samples/{split}_{i:04d}.rten"
            save_tensor(out_dir / rel, np.concatenate([s.input, s.target], axis=0))
            rels.append(rel)
        manifest["splits"][split] = rels
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_dataset(ds_dir) -> tuple[dict[str, list[WindowSample]], dict]:
    ds_dir = Path(ds_dir)
    mpath = ds_dir / "manifest.json"
    if not mpath.exists():
        raise FormatError(f"{ds_dir}: no manifest.json (not a dataset directory)")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format") != "flowcast-dataset-v1":
        raise FormatError(f"{mpath}: unknown dataset format {manifest.get('format')!r}")
    split_in = manifest["split_in"]
    splits: dict[str, list[WindowSample]] = {}
    for split, rels in manifest["splits"].items():
        samples = []
        for rel in rels:
            frames = load_tensor(ds_dir / rel)
            if frames.ndim != 4:
                raise FormatError(f"{rel}: expected a [T,1,H,W] tensor, got shape {frames.shape}")
            samples.append(WindowSample(input=frames[:split_in], target=frames[split_in:]))
        splits[split] = samples
    return splits, manifest


def check_window_sample(sample: WindowSample, l_in: int | None = None, l_out: int | None = None):
    if sample.input.ndim != 4 or sample.target.ndim != 4:
        raise DimensionError("window sample frames must be [T,1,H,W]")
    if l_in is not None and sample.input.shape[0] != l_in:
        raise DimensionError(f"expected {l_in} input frames, got {sample.input.shape[0]}")
    if l_out is not None and sample.target.shape[0] != l_out:
        raise DimensionError(f"expected {l_out} target frames, got {sample.target.shape[0]}")
    return sample
