"""Classical normal estimators: PCA plane fit and weighted n-jet fitting."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from .geometry import Patch

MAX_CONDITION = 1e12


class FitError(ValueError):
    pass


@dataclass(frozen=True)
class JetConfig:
    order: int = 2

    def __post_init__(self):
        if self.order not in (1, 2, 3, 4):
            raise ValueError(f"jet order must be in 1..4, got {self.order}")

    @property
    def n_terms(self) -> int:
        return (self.order + 1) * (self.order + 2) // 2


def monomial_exponents(order: int) -> list[tuple[int, int]]:
    """(x power, y power) by total degree, then descending x power."""
    return [(k - j, j) for k in range(order + 1) for j in range(k + 1)]


@dataclass
class JetCoefficients:
    alpha: np.ndarray
    order: int
    residual: float = field(default=0.0, compare=False)

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        if len(self.alpha) != JetConfig(self.order).n_terms:
            raise ValueError(
                f"order {self.order} jet needs {JetConfig(self.order).n_terms} coefficients, "
                f"got {len(self.alpha)}")

    def __call__(self, x, y):
        """Evaluate the jet polynomial."""
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        return sum(a * x**p * y**q for a, (p, q) in zip(self.alpha, monomial_exponents(self.order)))

    def gradient(self, x, y):
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        gx = np.zeros(np.broadcast(x, y).shape)
        gy = np.zeros_like(gx)
        for a, (p, q) in zip(self.alpha, monomial_exponents(self.order)):
            if p:
                gx = gx + a * p * x ** (p - 1) * y**q
            if q:
                gy = gy + a * q * x**p * y ** (q - 1)
        return gx, gy

    def coefficient(self, px: int, py: int) -> float:
        return float(self.alpha[monomial_exponents(self.order).index((px, py))])


def _points(patch_or_points) -> np.ndarray:
    if isinstance(patch_or_points, Patch):
        return patch_or_points.local_points
    return np.asarray(patch_or_points, dtype=np.float64).reshape(-1, 3)


def pca_normal(patch_or_points) -> np.ndarray:
    """Smallest-eigenvalue eigenvector of the covariance, sign chosen with z >= 0."""
    pts = _points(patch_or_points)
    if len(pts) < 3:
        raise FitError("PCA normal needs at least 3 points")
    centered = pts - pts.mean(axis=0)
    evals, evecs = np.linalg.eigh(centered.T @ centered / len(pts))
    if evals[1] <= 1e-12 * max(evals[2], np.finfo(float).tiny):
        raise FitError("PCA normal undefined: points are collinear or coincident")
    n = evecs[:, 0]
    if n[2] != 0:
        return n if n[2] > 0 else -n
    i = int(np.argmax(np.abs(n)))
    return n if n[i] > 0 else -n


def jet_design_matrix(points, config: JetConfig) -> tuple[np.ndarray, np.ndarray]:
    pts = _points(points)
    x, y = pts[:, 0], pts[:, 1]
    M = np.stack([x**p * y**q for p, q in monomial_exponents(config.order)], axis=1)
    return M, pts[:, 2].copy()


def fit_jet(patch_or_points, weights=None, config: JetConfig = JetConfig()) -> JetCoefficients:
    """Weighted least-squares jet fit via QR of ``diag(sqrt(w)) M``.

    Raises :class:`FitError` when fewer than ``n_terms`` points carry weight or
    the triangular factor has condition number above 1e12.
    """
    M, b = jet_design_matrix(patch_or_points, config)
    w = np.ones(len(b)) if weights is None else np.asarray(weights, dtype=np.float64)
    if np.any(w < 0):
        raise FitError("weights must be non-negative")
    if np.count_nonzero(w > 0) < config.n_terms:
        raise FitError(
            f"order-{config.order} jet needs {config.n_terms} weighted points, "
            f"got {np.count_nonzero(w > 0)}")
    sw = np.sqrt(w)
    A = M * sw[:, None]
    rhs = b * sw
    Q, R = np.linalg.qr(A)
    cond = np.linalg.cond(R)
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise FitError(f"jet fit is rank deficient (condition number {cond:.3e} > {MAX_CONDITION:.0e})")
    alpha = solve_triangular(R, Q.T @ rhs)
    resid = rhs - A @ alpha
    return JetCoefficients(alpha, config.order, float(resid @ resid))


def jet_normal(coeffs: JetCoefficients) -> np.ndarray:
    a10, a01 = coeffs.alpha[1], coeffs.alpha[2]
    return np.array([-a10, -a01, 1.0]) / np.sqrt(1.0 + a10 * a10 + a01 * a01)


def estimate_batch(local_points: np.ndarray, method: str) -> np.ndarray:
    """Normals for a stack of patches (B, N, 3) in their local frames.

    ``method`` is ``"pca"`` or ``"jet:<n>"``. Failed fits come back as NaN rows.
    """
    out = np.full((len(local_points), 3), np.nan)
    if method == "pca":
        fn = pca_normal
    elif method.startswith("jet:"):
        cfg = JetConfig(int(method.split(":", 1)[1]))

        def fn(pts):
            return jet_normal(fit_jet(pts, None, cfg))
    else:
        raise ValueError(f"unknown classical method {method!r}")
    for i, pts in enumerate(local_points):
        try:
            out[i] = fn(pts)
        except FitError:
            pass
    return out
