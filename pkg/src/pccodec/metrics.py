"""Rate-accuracy bookkeeping, Pareto fronts, Bjøntegaard-Delta and Chamfer."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree

RA_FIELDS = ("config", "points", "lmbda", "rate_bits", "top1")


@dataclass
class RAPoint:
    rate_bits: float
    top1: float
    lmbda: float = float("nan")
    config: str = ""
    points: int = 0
    checkpoint: str = ""


def pareto_front(points: Iterable[RAPoint]) -> List[RAPoint]:
    """Points not dominated by another with lower-or-equal rate and higher-or-equal accuracy.

    Exact duplicates keep a single representative. Output is sorted by rate.
    """
    pts = sorted(points, key=lambda p: (p.rate_bits, -p.top1, p.lmbda if p.lmbda == p.lmbda else 0.0, p.checkpoint))
    front: List[RAPoint] = []
    best = -np.inf
    for p in pts:
        if p.top1 > best:
            front.append(p)
            best = p.top1
    return front


def write_ra_csv(points: Sequence[RAPoint], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(RA_FIELDS)
        for p in points:
            w.writerow([p.config, p.points, p.lmbda, f"{p.rate_bits:.6f}", f"{p.top1:.6f}"])


def read_ra_csv(path) -> List[RAPoint]:
    out = []
    with open(path, newline="", encoding="utf-8") as f:
        for row in csv.DictReader(f):
            out.append(
                RAPoint(
                    rate_bits=float(row["rate_bits"]),
                    top1=float(row["top1"]),
                    lmbda=float(row.get("lmbda") or "nan"),
                    config=row.get("config", ""),
                    points=int(row.get("points") or 0),
                    checkpoint=str(path),
                )
            )
    return out


# -- Bjøntegaard-Delta --------------------------------------------------------


@dataclass
class BDResult:
    bd_rate: Optional[float]
    bd_acc: Optional[float]
    rate_diagnostic: str = ""
    acc_diagnostic: str = ""

    def to_dict(self) -> dict:
        d = {"bd_rate": self.bd_rate, "bd_acc": self.bd_acc}
        if self.rate_diagnostic:
            d["bd_rate_diagnostic"] = self.rate_diagnostic
        if self.acc_diagnostic:
            d["bd_acc_diagnostic"] = self.acc_diagnostic
        return d


class BDUndefined(ValueError):
    pass


def _curve(points: Sequence[RAPoint]) -> Tuple[np.ndarray, np.ndarray]:
    r = np.array([p.rate_bits for p in points], dtype=np.float64)
    a = np.array([p.top1 for p in points], dtype=np.float64)
    if len(r) < 4:
        raise BDUndefined(f"need at least 4 points per curve, got {len(r)}")
    if np.any(r <= 0):
        raise BDUndefined("rates must be positive for a log-rate fit")
    return np.log10(r), a


def _avg_poly_diff(x_test, y_test, x_anchor, y_anchor) -> float:
    """Mean of (fit_test - fit_anchor) over the overlap of the x ranges."""
    lo = max(x_test.min(), x_anchor.min())
    hi = min(x_test.max(), x_anchor.max())
    if not hi > lo:
        raise BDUndefined(f"curves do not overlap (interval [{lo:.4g}, {hi:.4g}])")
    pt = np.polyint(np.polyfit(x_test, y_test, 3))
    pa = np.polyint(np.polyfit(x_anchor, y_anchor, 3))
    it = np.polyval(pt, hi) - np.polyval(pt, lo)
    ia = np.polyval(pa, hi) - np.polyval(pa, lo)
    return (it - ia) / (hi - lo)


def bd_rate(test: Sequence[RAPoint], anchor: Sequence[RAPoint]) -> float:
    """Average rate change of ``test`` versus ``anchor`` at equal accuracy, in percent."""
    lt, at = _curve(test)
    la, aa = _curve(anchor)
    if np.ptp(at) == 0 or np.ptp(aa) == 0:
        raise BDUndefined("accuracy range is degenerate")
    d = _avg_poly_diff(at, lt, aa, la)
    return float((10.0**d - 1.0) * 100.0)


def bd_accuracy(test: Sequence[RAPoint], anchor: Sequence[RAPoint]) -> float:
    """Average accuracy change (percentage points) at equal log-rate."""
    lt, at = _curve(test)
    la, aa = _curve(anchor)
    return float(_avg_poly_diff(lt, at, la, aa))


def bd_metrics(test: Sequence[RAPoint], anchor: Sequence[RAPoint]) -> BDResult:
    res = BDResult(None, None)
    try:
        res.bd_rate = bd_rate(test, anchor)
    except BDUndefined as e:
        res.rate_diagnostic = str(e)
    try:
        res.bd_acc = bd_accuracy(test, anchor)
    except BDUndefined as e:
        res.acc_diagnostic = str(e)
    return res


# -- Chamfer --------------------------------------------------------------


def chamfer(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric mean squared nearest-neighbour distance."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("chamfer distance of an empty cloud")
    da, _ = cKDTree(b).query(a)
    db, _ = cKDTree(a).query(b)
    return float(np.mean(da**2) + np.mean(db**2))


def chamfer_with_grad(target: np.ndarray, pred: np.ndarray) -> Tuple[float, np.ndarray]:
    """Chamfer distance and its gradient with respect to ``pred``."""
    target = np.asarray(target, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    _, i_tp = cKDTree(pred).query(target)
    _, i_pt = cKDTree(target).query(pred)
    d1 = target - pred[i_tp]
    d2 = pred - target[i_pt]
    loss = float(np.mean((d1**2).sum(1)) + np.mean((d2**2).sum(1)))
    grad = 2.0 * d2 / len(pred)
    np.add.at(grad, i_tp, -2.0 * d1 / len(target))
    return loss, grad


def ra_dicts(points: Sequence[RAPoint]) -> List[dict]:
    return [asdict(p) for p in points]
