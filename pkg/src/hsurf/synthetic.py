"""Analytic surfaces with exact normals, plus noise and density corruptions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .classical import JetCoefficients
from .geometry import PointCloud

KINDS = ("plane", "sphere", "quadric", "saddle")
DENSITY_MODES = ("none", "stripes", "gradient")

# noise levels of the standard benchmark, as fractions of the bounding-box diagonal
BENCH_SIGMAS = (0.0, 0.0012, 0.006, 0.012)


@dataclass
class SyntheticSurface:
    """Either a sphere or a polynomial height field z = f(x, y) over [-1, 1]^2.

    Height fields store their Taylor coefficients as a :class:`JetCoefficients`.
    """

    kind: str
    coeffs: JetCoefficients | None = None
    radius: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown surface kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == "sphere":
            if self.radius <= 0:
                raise ValueError("sphere radius must be positive")
        elif self.coeffs is None:
            raise ValueError(f"{self.kind} surface needs height-field coefficients")

    @classmethod
    def plane(cls, slope_x: float = 0.0, slope_y: float = 0.0, offset: float = 0.0):
        return cls("plane", JetCoefficients([offset, slope_x, slope_y], 1))

    @classmethod
    def sphere(cls, radius: float = 1.0):
        return cls("sphere", radius=radius)

    @classmethod
    def quadric(cls, beta):
        return cls("quadric", JetCoefficients(beta, 2))

    @classmethod
    def saddle(cls, a: float = 1.0):
        return cls("saddle", JetCoefficients([0, 0, 0, a, 0, -a], 2))

    @classmethod
    def random(cls, kind: str, rng: np.random.Generator) -> "SyntheticSurface":
        if kind == "plane":
            return cls.plane(*rng.uniform(-1.0, 1.0, size=2))
        if kind == "sphere":
            return cls.sphere(float(rng.uniform(0.5, 1.5)))
        if kind == "quadric":
            return cls.quadric(rng.uniform(-1.5, 1.5, size=6))
        if kind == "saddle":
            return cls.saddle(float(rng.uniform(0.5, 1.5)))
        raise ValueError(f"unknown surface kind {kind!r}")

    def height(self, x, y) -> np.ndarray:
        return self.coeffs(x, y)

    def normal(self, points: np.ndarray) -> np.ndarray:
        """Analytic unit normal at points on the surface (outward / +z side)."""
        points = np.asarray(points, dtype=np.float64)
        if self.kind == "sphere":
            return points / np.linalg.norm(points, axis=1, keepdims=True)
        gx, gy = self.coeffs.gradient(points[:, 0], points[:, 1])
        n = np.stack([-gx, -gy, np.ones_like(gx)], axis=1)
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    def residual(self, points: np.ndarray) -> np.ndarray:
        """Implicit-function residual; zero for points exactly on the surface."""
        points = np.asarray(points, dtype=np.float64)
        if self.kind == "sphere":
            return np.linalg.norm(points, axis=1) - self.radius
        return points[:, 2] - self.height(points[:, 0], points[:, 1])

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        if self.kind == "sphere":
            d = rng.normal(size=(n, 3))
            d /= np.linalg.norm(d, axis=1, keepdims=True)
            pts = d * self.radius
            return pts, d
        xy = rng.uniform(-1.0, 1.0, size=(n, 2))
        pts = np.column_stack([xy, self.height(xy[:, 0], xy[:, 1])])
        return pts, self.normal(pts)


@dataclass(frozen=True)
class Corruption:
    sigma: float = 0.0
    density: str = "none"

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError(f"noise sigma must be >= 0, got {self.sigma}")
        if self.density not in DENSITY_MODES:
            raise ValueError(f"unknown density mode {self.density!r}; expected one of {DENSITY_MODES}")

    @property
    def label(self) -> str:
        s = f"sigma={self.sigma:g}"
        return s if self.density == "none" else f"{s},{self.density}"


def stripe_mask(x: np.ndarray, n_stripes: int = 5, width: float = 0.3) -> np.ndarray:
    """True for coordinates inside one of ``n_stripes`` evenly spaced bands."""
    span = x.max() - x.min()
    t = (x - x.min()) / (span if span > 0 else 1.0)
    return np.mod(t * n_stripes, 1.0) < width


def _density_keep(points: np.ndarray, mode: str, rng: np.random.Generator) -> np.ndarray:
    x = points[:, 0]
    u = rng.uniform(size=len(points))
    if mode == "stripes":
        return ~(stripe_mask(x) & (u < 0.8))
    if mode == "gradient":
        span = x.max() - x.min()
        ramp = (x - x.min()) / (span if span > 0 else 1.0)
        return u >= 0.9 * ramp
    return np.ones(len(points), dtype=bool)


def corrupt(points: np.ndarray, normals: np.ndarray, corruption: Corruption,
            rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Drop points per the density mode, then add isotropic Gaussian noise to positions."""
    keep = _density_keep(points, corruption.density, rng)
    points, normals = points[keep], normals[keep]
    if corruption.sigma > 0:
        diag = float(np.linalg.norm(points.max(axis=0) - points.min(axis=0)))
        points = points + rng.normal(scale=corruption.sigma * diag, size=points.shape)
    return points, normals


def generate_dataset(surfaces, samples: int, corruption: Corruption = Corruption(),
                     seed: int = 0) -> list[PointCloud]:
    rng = np.random.default_rng(seed)
    clouds = []
    for surf in surfaces:
        pts, nrm = surf.sample(samples, rng)
        pts, nrm = corrupt(pts, nrm, corruption, rng)
        clouds.append(PointCloud(pts, nrm))
    return clouds


def random_surfaces(counts: dict[str, int], seed: int = 0) -> list[SyntheticSurface]:
    """``counts`` maps kind to how many random instances to draw, in the given order."""
    rng = np.random.default_rng(seed)
    return [SyntheticSurface.random(kind, rng) for kind, n in counts.items() for _ in range(n)]


def parse_shape_spec(spec: str) -> dict[str, int]:
    """Parse ``"sphere:2,quadric:3"`` (a bare kind counts as 1)."""
    counts: dict[str, int] = {}
    for part in filter(None, (p.strip() for p in spec.split(","))):
        kind, _, n = part.partition(":")
        if kind not in KINDS:
            raise ValueError(f"unknown surface kind {kind!r} in shape spec {spec!r}")
        try:
            count = int(n) if n else 1
        except ValueError:
            raise ValueError(f"bad count {n!r} in shape spec {spec!r}") from None
        if count < 1:
            raise ValueError(f"count must be >= 1 in shape spec {spec!r}")
        counts[kind] = counts.get(kind, 0) + count
    if not counts:
        raise ValueError("empty shape spec")
    return counts
