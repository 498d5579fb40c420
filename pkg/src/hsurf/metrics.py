"""Unoriented angle metrics (RMSE, PGP, AUC) and the estimator benchmark."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .classical import estimate_batch
from .geometry import KDTree, PointCloud, extract_patches, unoriented_angles

THRESHOLDS = np.arange(1.0, 91.0)
FAILED_ERROR = 90.0


def rmse(errors) -> float:
    e = np.asarray(errors, dtype=np.float64)
    if e.size == 0:
        raise ValueError("rmse of an empty error list")
    return float(np.sqrt(np.mean(e * e)))


def pgp_curve(errors, thresholds=THRESHOLDS) -> np.ndarray:
    """Fraction of errors strictly below each threshold."""
    e = np.sort(np.asarray(errors, dtype=np.float64))
    t = np.asarray(thresholds, dtype=np.float64)
    if e.size == 0:
        return np.zeros(len(t))
    return np.searchsorted(e, t, side="left") / e.size


def auc(errors, thresholds=THRESHOLDS) -> float:
    """Trapezoidal area under the PGP curve divided by the threshold span."""
    t = np.asarray(thresholds, dtype=np.float64)
    y = pgp_curve(errors, t)
    return float(np.sum((y[1:] + y[:-1]) * np.diff(t)) / 2.0 / (t[-1] - t[0]))


def angle_errors(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Unoriented errors in degrees; NaN predictions score :data:`FAILED_ERROR`."""
    err = unoriented_angles(pred, gt)
    return np.where(np.isnan(err), FAILED_ERROR, err)


@dataclass
class BenchEntry:
    errors: np.ndarray
    failures: int = 0

    @property
    def rmse(self) -> float:
        return rmse(self.errors)

    @property
    def pgp(self) -> np.ndarray:
        return pgp_curve(self.errors)

    @property
    def auc(self) -> float:
        return auc(self.errors)


@dataclass
class BenchReport:
    entries: dict[tuple[str, str], BenchEntry] = field(default_factory=dict)

    @property
    def methods(self) -> list[str]:
        return list(dict.fromkeys(m for m, _ in self.entries))

    @property
    def corruptions(self) -> list[str]:
        return list(dict.fromkeys(c for _, c in self.entries))

    def to_table(self) -> str:
        """One aligned row per (method, corruption) pair."""
        head = ["method", "corruption", "rmse", "auc", "count", "failures"]
        rows = [[m, c, f"{e.rmse:.4f}", f"{e.auc:.4f}", str(e.errors.size), str(e.failures)]
                for (m, c), e in self.entries.items()]
        widths = [max(len(r[i]) for r in [head] + rows) for i in range(len(head))]
        fmt = "  ".join(f"{{:<{w}}}" if i < 2 else f"{{:>{w}}}" for i, w in enumerate(widths))
        lines = [fmt.format(*head), "  ".join("-" * w for w in widths)]
        lines += [fmt.format(*r) for r in rows]
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        out = {}
        for (m, c), e in self.entries.items():
            out.setdefault(m, {})[c] = {
                "rmse": e.rmse,
                "auc": e.auc,
                "count": int(e.errors.size),
                "failures": int(e.failures),
                "pgp": [float(v) for v in e.pgp],
                "errors": [float(v) for v in e.errors],
            }
        return {"thresholds": [float(t) for t in THRESHOLDS], "results": out}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"


Estimator = Callable[[np.ndarray], np.ndarray]


def classical_estimator(method: str) -> Estimator:
    return lambda local_points: estimate_batch(local_points, method)


def hsurf_estimator(params, config, batch_size: int = 64) -> Estimator:
    from .model import predict
    return lambda local_points: predict(local_points, params, config, batch_size)


def run_benchmark(estimators: dict[str, Estimator], test_set: list[tuple[str, PointCloud]],
                  patch_size: int, queries_per_shape: int | None = None, seed: int = 0) -> BenchReport:
    """Score every estimator on the same patches.

    ``test_set`` is a list of ``(corruption_label, cloud)``. Query points are all
    points, or ``queries_per_shape`` drawn per cloud with ``seed``. Degenerate
    patches and failed estimates count as 90 degree errors.
    """
    rng = np.random.default_rng(seed)
    pooled: dict[tuple[str, str], list[np.ndarray]] = {}
    fails: dict[tuple[str, str], int] = {}
    for label, cloud in test_set:
        if cloud.normals is None:
            raise ValueError("benchmark clouds need ground-truth normals")
        n = len(cloud)
        if queries_per_shape is None or queries_per_shape >= n:
            queries = np.arange(n)
        else:
            queries = np.sort(rng.choice(n, size=queries_per_shape, replace=False))
        patches = extract_patches(cloud, queries, patch_size, KDTree(cloud.points))
        ok = [i for i, p in enumerate(patches) if p is not None]
        local = np.stack([patches[i].local_points for i in ok]) if ok else np.zeros((0, patch_size, 3))
        gt = np.stack([patches[i].gt_normal_local for i in ok]) if ok else np.zeros((0, 3))
        for name, est in estimators.items():
            pred = np.full((len(queries), 3), np.nan)
            full_gt = np.tile([0.0, 0.0, 1.0], (len(queries), 1))
            if ok:
                pred[ok] = est(local)
                full_gt[ok] = gt
            err = angle_errors(pred, full_gt)
            pooled.setdefault((name, label), []).append(err)
            fails[name, label] = fails.get((name, label), 0) + int(np.isnan(pred).any(axis=1).sum())
    report = BenchReport()
    for key, errs in pooled.items():
        report.entries[key] = BenchEntry(np.concatenate(errs), fails[key])
    return report
