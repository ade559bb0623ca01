"""U-VOS and V-SOD evaluation: J, contour F, MAE, PR curve, max F-beta, max E-measure, S-measure.

All functions take 2-d ``HxW`` (or ``1xHxW``) numpy-compatible arrays. Real-valued
maps are scaled to the 0..255 integer range and binarized with ``> T`` for the
threshold sweeps.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .datamodel import ContractError

EPS = 1e-8
BETA2 = 0.3
ALPHA = 0.5
NUM_THRESHOLDS = 256
_SQUARE = np.ones((3, 3), dtype=bool)


def _as2d(a, dtype=None):
    a = np.asarray(a, dtype=dtype)
    if a.ndim == 3 and a.shape[0] == 1:
        a = a[0]
    if a.ndim != 2:
        raise ContractError(f"expected an HxW map, got shape {a.shape}")
    return a


def _binary(a, name: str):
    a = _as2d(a)
    if a.dtype != bool:
        if not np.isin(a, (0, 1)).all():
            raise ContractError(f"{name} must be binary")
        a = a.astype(bool)
    return a


def _real(a):
    a = _as2d(a, np.float64)
    if not np.isfinite(a).all() or a.min() < 0 or a.max() > 1:
        raise ContractError("prediction values must lie in [0, 1]")
    return a


def to_255(s) -> np.ndarray:
    return np.rint(_real(s) * 255).astype(np.int64)


def region_similarity(s_bin, g) -> float:
    """Intersection over union; 1.0 when both masks are empty."""
    s, g = _binary(s_bin, "prediction"), _binary(g, "ground truth")
    union = np.count_nonzero(s | g)
    if union == 0:
        return 1.0
    return np.count_nonzero(s & g) / union


def default_tolerance(shape) -> int:
    h, w = shape[-2:]
    return int(round(0.008 * math.hypot(h, w)))


def contour(mask) -> np.ndarray:
    """Mask minus its 3x3 erosion; pixels outside the canvas count as background."""
    m = _binary(mask, "mask")
    return m & ~ndimage.binary_erosion(m, structure=_SQUARE, border_value=0)


def _disk(radius: int) -> np.ndarray:
    r = int(radius)
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    return xx**2 + yy**2 <= r * r


def contour_accuracy(s_bin, g, tol_radius: int | None = None) -> float:
    """Boundary F-measure with matches allowed within ``tol_radius`` pixels."""
    s, g = _binary(s_bin, "prediction"), _binary(g, "ground truth")
    if tol_radius is None:
        tol_radius = default_tolerance(g.shape)
    cs, cg = contour(s), contour(g)
    ns, ng = np.count_nonzero(cs), np.count_nonzero(cg)
    if ns == 0 and ng == 0:
        return 1.0
    if ns == 0 or ng == 0:
        return 0.0
    if tol_radius > 0:
        disk = _disk(tol_radius)
        cg_near = ndimage.binary_dilation(cg, structure=disk)
        cs_near = ndimage.binary_dilation(cs, structure=disk)
    else:
        cg_near, cs_near = cg, cs
    precision = np.count_nonzero(cs & cg_near) / ns
    recall = np.count_nonzero(cg & cs_near) / ng
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def mae(s, g) -> float:
    s = _real(s)
    g = _binary(g, "ground truth")
    if s.shape != g.shape:
        raise ContractError("prediction and ground truth sizes differ")
    return float(np.mean(np.abs(s - g)))


def _threshold_counts(s, g):
    """Per threshold T = 0..255: predicted-positive and true-positive pixel counts."""
    s255 = to_255(s)
    g = _binary(g, "ground truth")
    if s255.shape != g.shape:
        raise ContractError("prediction and ground truth sizes differ")
    hist_all = np.bincount(s255.ravel(), minlength=NUM_THRESHOLDS)
    hist_fg = np.bincount(s255[g].ravel(), minlength=NUM_THRESHOLDS)
    # pixels with value > T, for T = 0..255
    above = np.concatenate([np.cumsum(hist_all[::-1])[::-1][1:], [0]])
    tp = np.concatenate([np.cumsum(hist_fg[::-1])[::-1][1:], [0]])
    return above, tp, int(g.sum()), g.size


def pr_curve(s, g) -> np.ndarray:
    """256 x 2 array of (precision, recall) for T = 0..255; precision is 1 for empty masks."""
    above, tp, n_fg, _ = _threshold_counts(s, g)
    precision = np.where(above > 0, tp / np.maximum(above, 1), 1.0)
    recall = tp / n_fg if n_fg else np.zeros(NUM_THRESHOLDS)
    return np.stack([precision, recall], axis=1)


def f_beta_curve(curve, beta2: float = BETA2) -> np.ndarray:
    p, r = np.asarray(curve, dtype=np.float64).T
    denom = beta2 * p + r
    return np.where(denom > 0, (1 + beta2) * p * r / np.where(denom > 0, denom, 1.0), 0.0)


def f_beta_max(curve, beta2: float = BETA2) -> float:
    return float(f_beta_curve(curve, beta2).max())


def e_measure_curve(s, g) -> np.ndarray:
    """Enhanced-alignment score of the binarized map at every threshold."""
    above, tp, n_fg, n = _threshold_counts(s, g)
    if n_fg == 0:
        return 1.0 - above / n
    if n_fg == n:
        return above / n
    fp = above - tp
    fn = n_fg - tp
    tn = n - n_fg - fp
    mu_s = above / n
    mu_g = n_fg / n
    total = np.zeros(NUM_THRESHOLDS)
    for s_val, g_val, count in ((1, 1, tp), (1, 0, fp), (0, 1, fn), (0, 0, tn)):
        a_s = s_val - mu_s
        a_g = g_val - mu_g
        xi = 2 * a_s * a_g / (a_s**2 + a_g**2 + EPS)
        total += count * (xi + 1) ** 2 / 4
    return total / n


def e_measure_max(s, g) -> float:
    return float(e_measure_curve(s, g).max())


def _object_score(values) -> float:
    if values.size == 0:
        return 0.0
    x = values.mean()
    sigma = values.std(ddof=1) if values.size > 1 else 0.0
    return 2 * x / (x * x + 1 + sigma + EPS)


def _s_object(s, g) -> float:
    u = g.mean()
    fg = _object_score(s[g])
    bg = _object_score(1 - s[~g])
    return u * fg + (1 - u) * bg


def _ssim(s, g) -> float:
    n = s.size
    x, y = s.mean(), g.mean()
    sx = ((s - x) ** 2).sum() / (n - 1 + EPS)
    sy = ((g - y) ** 2).sum() / (n - 1 + EPS)
    sxy = ((s - x) * (g - y)).sum() / (n - 1 + EPS)
    alpha = 4 * x * y * sxy
    beta = (x * x + y * y) * (sx + sy)
    if alpha != 0:
        return alpha / (beta + EPS)
    if beta == 0:
        return 1.0
    return 0.0


def _centroid(g):
    h, w = g.shape
    if not g.any():
        return int(round(w / 2)), int(round(h / 2))
    rows, cols = np.nonzero(g)
    return int(np.round(cols.mean())) + 1, int(np.round(rows.mean())) + 1


def _s_region(s, g) -> float:
    h, w = g.shape
    x, y = _centroid(g)
    score = 0.0
    for rs, cs in ((slice(0, y), slice(0, x)), (slice(0, y), slice(x, w)), (slice(y, h), slice(0, x)), (slice(y, h), slice(x, w))):
        ps, gs = s[rs, cs], g[rs, cs].astype(np.float64)
        if ps.size == 0:
            continue
        score += ps.size / (h * w) * _ssim(ps, gs)
    return score


def s_measure(s, g, alpha: float = ALPHA) -> float:
    """(1 - alpha) * object-aware + alpha * region-aware structural similarity."""
    s = _real(s)
    g = _binary(g, "ground truth")
    if s.shape != g.shape:
        raise ContractError("prediction and ground truth sizes differ")
    y = g.mean()
    if y == 0:
        q = 1 - s.mean()
    elif y == 1:
        q = s.mean()
    else:
        q = (1 - alpha) * _s_object(s, g) + alpha * _s_region(s, g)
    return float(min(max(q, 0.0), 1.0))


@dataclass
class FrameMetrics:
    clip_id: str
    t: int
    j: float
    f: float
    mae: float
    f_beta_max: float
    e_max: float
    s_alpha: float
    pr: np.ndarray = field(repr=False)


def frame_metrics(s, g, clip_id: str = "", t: int = 0, threshold: float = 0.5, tol_radius=None) -> FrameMetrics:
    """All per-frame values; J and F use the map binarized at ``> threshold``."""
    s = _real(s)
    g = _binary(g, "ground truth")
    s_bin = s > threshold
    curve = pr_curve(s, g)
    return FrameMetrics(
        clip_id,
        t,
        region_similarity(s_bin, g),
        contour_accuracy(s_bin, g, tol_radius),
        mae(s, g),
        f_beta_max(curve),
        e_measure_max(s, g),
        s_measure(s, g),
        curve,
    )


@dataclass
class MetricReport:
    mean_j: float
    mean_f: float
    mae: float
    f_beta_max: float
    e_max: float
    s_alpha: float
    pr_curve: np.ndarray = field(repr=False)
    per_clip: dict = field(default_factory=dict)
    frames: list = field(default_factory=list, repr=False)

    def summary(self) -> dict:
        return {k: getattr(self, k) for k in ("mean_j", "mean_f", "mae", "f_beta_max", "e_max", "s_alpha")}

    def to_dict(self) -> dict:
        out = self.summary()
        out["per_clip"] = self.per_clip
        out["pr_curve"] = [{"threshold": t, "precision": float(p), "recall": float(r)} for t, (p, r) in enumerate(self.pr_curve)]
        out["frames"] = [
            {k: v for k, v in asdict(fm).items() if k != "pr"} for fm in self.frames
        ]
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "MetricReport":
        curve = np.array([[row["precision"], row["recall"]] for row in data["pr_curve"]])
        return cls(
            data["mean_j"], data["mean_f"], data["mae"], data["f_beta_max"], data["e_max"], data["s_alpha"],
            curve, data.get("per_clip", {}), [],
        )

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def read_json(cls, path) -> "MetricReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


def aggregate(frames: list[FrameMetrics]) -> MetricReport:
    """J and F: mean over each clip's frames, then over clips. The rest: mean over all frames."""
    if not frames:
        raise ContractError("nothing to aggregate")
    by_clip: dict[str, list[FrameMetrics]] = {}
    for fm in frames:
        by_clip.setdefault(fm.clip_id, []).append(fm)
    per_clip = {
        cid: {"mean_j": float(np.mean([f.j for f in fms])), "mean_f": float(np.mean([f.f for f in fms])), "frames": len(fms)}
        for cid, fms in by_clip.items()
    }
    return MetricReport(
        mean_j=float(np.mean([c["mean_j"] for c in per_clip.values()])),
        mean_f=float(np.mean([c["mean_f"] for c in per_clip.values()])),
        mae=float(np.mean([f.mae for f in frames])),
        f_beta_max=float(np.mean([f.f_beta_max for f in frames])),
        e_max=float(np.mean([f.e_max for f in frames])),
        s_alpha=float(np.mean([f.s_alpha for f in frames])),
        pr_curve=np.mean([f.pr for f in frames], axis=0),
        per_clip=per_clip,
        frames=list(frames),
    )


def write_pr_csv(curves, path) -> None:
    """Write PR curves as 256-row series.

    A single (256, 2) array gives columns threshold, precision, recall. A dict of
    label -> curve adds a leading variant column, one labeled series per entry.
    """
    labeled = isinstance(curves, dict)
    series = curves.items() if labeled else [(None, curves)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow((["variant"] if labeled else []) + ["threshold", "precision", "recall"])
        for label, curve in series:
            curve = np.asarray(curve)
            if curve.shape != (256, 2):
                raise ContractError(f"PR curve must have shape (256, 2), got {curve.shape}")
            for t, (p, r) in enumerate(curve):
                writer.writerow(([label] if labeled else []) + [t, repr(float(p)), repr(float(r))])


def read_pr_csv(path) -> dict:
    """Inverse of :func:`write_pr_csv`; an unlabeled file comes back under the key ``"default"``."""
    curves: dict[str, list] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            curves.setdefault(row.get("variant", "default"), []).append((float(row["precision"]), float(row["recall"])))
    return {k: np.array(v) for k, v in curves.items()}
