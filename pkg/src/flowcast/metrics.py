"""Forecast verification: contingency scores, pooled variants, SSIM, curves.

Conventions (documented here because upstream references leave them open):

* Thresholds are given on the raw 0..255 echo scale and divided by the
  full-scale value before comparison with normalized fields.
* A pixel is an event iff value >= threshold (ties count as events).
* Counts are summed over samples/pixels first; ratios are computed per
  (threshold, lead time) cell; reported averages are taken once over
  cells. Vacuous cells (no event in either field, H+M+F == 0) are
  excluded from averages so empty forecasts earn nothing; if every cell
  is vacuous the average is defined as 1.0, matching csi() on empty
  counts.
* Pooled scores (CSI4/CSI16) max-pool the continuous fields before
  thresholding; fields are zero-padded up to a multiple of the pool size.
* SSIM uses an 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03,
  dynamic range 1.0, valid window positions only, averaged over frames.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .data import FULL_SCALE
from .errors import DimensionError

DEFAULT_THRESHOLDS = (16.0, 74.0, 133.0, 160.0, 181.0, 219.0)
POOL_SCALES = (1, 4, 16)
_METRIC_BY_SCALE = {1: "csi", 4: "csi4", 16: "csi16"}


@dataclass
class ContingencyCounts:
    hits: int = 0
    misses: int = 0
    false_alarms: int = 0
    correct_negatives: int = 0

    def __add__(self, other: "ContingencyCounts") -> "ContingencyCounts":
        return ContingencyCounts(
            self.hits + other.hits,
            self.misses + other.misses,
            self.false_alarms + other.false_alarms,
            self.correct_negatives + other.correct_negatives,
        )

    def total(self) -> int:
        return self.hits + self.misses + self.false_alarms + self.correct_negatives

    def vacuous(self) -> bool:
        return self.hits + self.misses + self.false_alarms == 0


def binarize(frame: np.ndarray, threshold: float, full_scale: float = FULL_SCALE) -> np.ndarray:
    """Event mask of a normalized field for a raw-scale threshold."""
    return np.asarray(frame) >= (threshold / full_scale)


def contingency(pred_bool: np.ndarray, gt_bool: np.ndarray) -> ContingencyCounts:
    pred_bool = np.asarray(pred_bool, dtype=bool)
    gt_bool = np.asarray(gt_bool, dtype=bool)
    if pred_bool.shape != gt_bool.shape:
        raise DimensionError(f"prediction {pred_bool.shape} and truth {gt_bool.shape} differ")
    return ContingencyCounts(
        hits=int(np.count_nonzero(pred_bool & gt_bool)),
        misses=int(np.count_nonzero(~pred_bool & gt_bool)),
        false_alarms=int(np.count_nonzero(pred_bool & ~gt_bool)),
        correct_negatives=int(np.count_nonzero(~pred_bool & ~gt_bool)),
    )


def csi(counts: ContingencyCounts) -> float:
    """Critical success index H/(H+M+F); 1.0 on empty counts (vacuous perfection)."""
    denom = counts.hits + counts.misses + counts.false_alarms
    return counts.hits / denom if denom else 1.0


def hss(counts: ContingencyCounts) -> float:
    """Heidke skill score; 0.0 when the reference denominator vanishes."""
    h, m, f, c = counts.hits, counts.misses, counts.false_alarms, counts.correct_negatives
    denom = (h + m) * (m + c) + (h + f) * (f + c)
    return 2.0 * (h * c - m * f) / denom if denom else 0.0


def _pool_max(field: np.ndarray, k: int) -> np.ndarray:
    """Non-overlapping k x k max pooling of a [H,W] field, zero-padded to fit."""
    if k == 1:
        return field
    h, w = field.shape
    ph, pw = (-h) % k, (-w) % k
    if ph or pw:
        field = np.pad(field, ((0, ph), (0, pw)))
        h, w = field.shape
    return field.reshape(h // k, k, w // k, k).max(axis=(1, 3))


def _leads(frames: np.ndarray) -> np.ndarray:
    """Canonicalize [L,1,H,W] / [L,H,W] / [H,W] to [L,H,W]."""
    frames = np.asarray(frames)
    if frames.ndim == 2:
        return frames[None]
    if frames.ndim == 3:
        return frames
    if frames.ndim == 4 and frames.shape[1] == 1:
        return frames[:, 0]
    raise DimensionError(f"expected [L,1,H,W]-like frames, got shape {frames.shape}")


def cell_counts(preds, gts, k: int, thresholds) -> list[list[ContingencyCounts]]:
    """Aggregate counts[lead][threshold] over a list of forecast/truth pairs."""
    preds = [_leads(p) for p in preds]
    gts = [_leads(g) for g in gts]
    if len(preds) != len(gts):
        raise DimensionError(f"{len(preds)} forecasts vs {len(gts)} truths")
    n_lead = preds[0].shape[0]
    cells = [[ContingencyCounts() for _ in thresholds] for _ in range(n_lead)]
    for p, g in zip(preds, gts):
        if p.shape != g.shape:
            raise DimensionError(f"forecast {p.shape} and truth {g.shape} differ")
        for lead in range(n_lead):
            pp = _pool_max(p[lead], k)
            gg = _pool_max(g[lead], k)
            for j, thr in enumerate(thresholds):
                cells[lead][j] = cells[lead][j] + contingency(binarize(pp, thr), binarize(gg, thr))
    return cells


def _mean_skipping_vacuous(values_and_counts) -> float:
    vals = [v for v, c in values_and_counts if not c.vacuous()]
    return float(np.mean(vals)) if vals else 1.0


def pooled_csi(pred, gt, k: int, thresholds=DEFAULT_THRESHOLDS) -> float:
    """CSI after k x k max pooling, averaged over thresholds and lead times."""
    cells = cell_counts([pred], [gt], k, thresholds)
    flat = [(csi(c), c) for row in cells for c in row]
    return _mean_skipping_vacuous(flat)


# -- SSIM ---------------------------------------------------------------


def _gaussian_win(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _win_mean(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    r = len(win) // 2
    out = correlate1d(img, win, axis=0, mode="constant")
    out = correlate1d(out, win, axis=1, mode="constant")
    return out[r:-r, r:-r]  # interior positions do not see the padding


def ssim(pred, gt, win_size: int = 11, sigma: float = 1.5, k1: float = 0.01,
         k2: float = 0.03, data_range: float = 1.0) -> float:
    """Mean structural similarity over frames."""
    p = _leads(pred).astype(np.float64)
    g = _leads(gt).astype(np.float64)
    if p.shape != g.shape:
        raise DimensionError(f"prediction {p.shape} and truth {g.shape} differ")
    if p.shape[-1] < win_size or p.shape[-2] < win_size:
        raise DimensionError(f"frames {p.shape[-2:]} smaller than the {win_size}x{win_size} window")
    win = _gaussian_win(win_size, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    scores = []
    for x, y in zip(p, g):
        mx = _win_mean(x, win)
        my = _win_mean(y, win)
        mxx = _win_mean(x * x, win)
        myy = _win_mean(y * y, win)
        mxy = _win_mean(x * y, win)
        vx = np.maximum(mxx - mx * mx, 0.0)
        vy = np.maximum(myy - my * my, 0.0)
        cov = mxy - mx * my
        num = (2 * mx * my + c1) * (2 * cov + c2)
        den = (mx * mx + my * my + c1) * (vx + vy + c2)
        scores.append(float(np.mean(num / den)))
    return float(np.mean(scores))


# -- aggregated tables --------------------------------------------------


@dataclass
class LeadTimeCurves:
    """Per-lead threshold-averaged scores plus the long-format cell rows."""

    curves: dict[str, np.ndarray]  # metric -> [L_out]
    rows: list[tuple[int, object, str, float]]  # (lead, threshold|"mean", metric, value)


def leadtime_curves(forecasts, gts, thresholds=DEFAULT_THRESHOLDS) -> LeadTimeCurves:
    """CSI/CSI4/CSI16 against lead time, aggregated over the sample set."""
    if not forecasts:
        raise DimensionError("leadtime_curves needs at least one forecast")
    rows = []
    curves = {}
    for k in POOL_SCALES:
        metric = _METRIC_BY_SCALE[k]
        cells = cell_counts(forecasts, gts, k, thresholds)
        per_lead = np.empty(len(cells))
        for lead, row in enumerate(cells):
            pairs = []
            for thr, c in zip(thresholds, row):
                value = csi(c)
                pairs.append((value, c))
                if not c.vacuous():
                    rows.append((lead + 1, thr, metric, value))
            per_lead[lead] = _mean_skipping_vacuous(pairs)
            rows.append((lead + 1, "mean", metric, per_lead[lead]))
        curves[metric] = per_lead
    return LeadTimeCurves(curves=curves, rows=rows)


def write_curves_csv(path, curves: LeadTimeCurves) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["lead", "threshold", "metric", "value"])
        for lead, thr, metric, value in curves.rows:
            writer.writerow([lead, thr, metric, f"{value:.10g}"])


def read_curves_csv(path) -> list[dict]:
    from .errors import FormatError

    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["lead", "threshold", "metric", "value"]:
            raise FormatError(f"{path}:1: expected header lead,threshold,metric,value, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 4:
                raise FormatError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            try:
                rows.append({"lead": int(row[0]), "threshold": row[1], "metric": row[2], "value": float(row[3])})
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from exc
    return rows


def aggregate_report(forecasts, gts, thresholds=DEFAULT_THRESHOLDS) -> dict:
    """The headline score set: CSI, CSI4, CSI16, HSS, SSIM."""
    report = {}
    for k in POOL_SCALES:
        cells = cell_counts(forecasts, gts, k, thresholds)
        flat = [(csi(c), c) for row in cells for c in row]
        report[_METRIC_BY_SCALE[k]] = _mean_skipping_vacuous(flat)
        if k == 1:
            report["hss"] = _mean_skipping_vacuous([(hss(c), c) for row in cells for c in row])
    report["ssim"] = float(np.mean([ssim(p, g) for p, g in zip(forecasts, gts)]))
    report["n_samples"] = len(forecasts)
    report["thresholds"] = list(thresholds)
    return report


def mse_per_leadtime(forecasts, gts) -> np.ndarray:
    """Mean squared error per lead index, aggregated over samples."""
    preds = np.stack([_leads(p) for p in forecasts]).astype(np.float64)
    truths = np.stack([_leads(g) for g in gts]).astype(np.float64)
    if preds.shape != truths.shape:
        raise DimensionError(f"forecast stack {preds.shape} and truth stack {truths.shape} differ")
    return ((preds - truths) ** 2).mean(axis=(0, 2, 3))
