"""Hyper-surface normal network on the tape engine.

Batched throughout: a batch of patches is an array of shape (B, N, 3) in the
normalized local frame. Points are first sorted by distance to the query
(the origin); after that every "keep the n nearest points" step is a prefix
slice, and M encoded points are rows ``[:M]``.

Blocks:

* ``encode_positions``: relative offsets to K in-patch neighbours go through an
  MLP ``E``, are concatenated with the raw offsets, pass through ``phi`` and are
  max-pooled over the neighbours. Produces the condition code C, (B, M, c).
* ``space_transform``: per scale, a local aggregation layer (kNN grouping, a
  dense block, max-pool over the group) followed by a global shift layer that
  fuses the max-pooled scale feature back into the points that survive to the
  next scale. Produces the global location code G, (B, M, c).
* ``hyper_fit``: input projection of ``[G : C]`` then residual blocks.
* ``output_normal``: per-point weights ``sigmoid(Psi(.))``, weighted max-pool,
  head ``H`` to 3-D, unit normalization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import Patch


class ConfigError(ValueError):
    pass


class DegenerateOutput(ArithmeticError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    patch_size: int = 64
    scales: tuple[int, ...] | None = None
    k_local: int = 16
    k_encode: int = 16
    n_encoded: int | None = None
    feature_dim: int = 32
    dense_depth: int = 3
    n_res_blocks: int = 4
    hidden: int = 64
    growth: int = 16

    def __post_init__(self):
        N = self.patch_size
        if self.scales is None:
            object.__setattr__(self, "scales", (N, N // 2, N // 4))
        else:
            object.__setattr__(self, "scales", tuple(int(s) for s in self.scales))
        if self.n_encoded is None:
            object.__setattr__(self, "n_encoded", max(1, N // 4))
        s = self.scales
        if s[0] != N or any(b >= a for a, b in zip(s, s[1:])):
            raise ConfigError(f"scales must start at patch_size {N} and strictly decrease, got {s}")
        if self.n_encoded > min(s):
            raise ConfigError(f"n_encoded {self.n_encoded} exceeds smallest scale {min(s)}")
        if self.k_local > min(s):
            raise ConfigError(f"k_local {self.k_local} exceeds smallest scale {min(s)}")
        if self.k_encode > N:
            raise ConfigError(f"k_encode {self.k_encode} exceeds patch size {N}")
        dims = (N, self.k_local, self.k_encode, self.n_encoded, self.feature_dim,
                self.dense_depth, self.hidden, self.growth, *s)
        if min(dims) < 1 or self.n_res_blocks < 0:
            raise ConfigError("all sizes must be >= 1")

    @classmethod
    def tiny(cls) -> "ModelConfig":
        return cls(patch_size=16, scales=(16,), k_local=8, k_encode=8, n_encoded=4,
                   feature_dim=8, dense_depth=2, n_res_blocks=2, hidden=8, growth=4)


Params = dict  # name -> Tensor, insertion-ordered


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    c, h, g = config.feature_dim, config.hidden, config.growth
    shapes: dict[str, tuple[int, ...]] = {}

    def lin(name, fan_in, fan_out, bias=True):
        shapes[f"{name}.W"] = (fan_in, fan_out)
        if bias:
            shapes[f"{name}.b"] = (fan_out,)

    lin("enc.E.0", 3, h)
    lin("enc.E.1", h, c)
    lin("enc.phi.0", 3 + c, h)
    lin("enc.phi.1", h, c)

    lin("st.lift", 3, c)
    for s in range(len(config.scales)):
        d = c + 3
        for layer in range(config.dense_depth):
            lin(f"st.la{s}.dense{layer}", d, g)
            d += g
        lin(f"st.la{s}.out", d, c)
        lin(f"st.gs{s}.V", c, c)
        lin(f"st.gs{s}.U", c, c)
        lin(f"st.gs{s}.Uv", c, c, bias=False)

    lin("fit.in", 2 * c, c)
    for t in range(config.n_res_blocks):
        lin(f"fit.res{t}.0", c, h)
        lin(f"fit.res{t}.1", h, c)

    lin("out.psi.0", c, h)
    lin("out.psi.1", h, 1)
    lin("out.H.0", c, h)
    lin("out.H.1", h, 3)
    return shapes


def param_count(config: ModelConfig) -> int:
    return int(sum(np.prod(s) for s in param_shapes(config).values()))


def init_params(config: ModelConfig, seed: int = 0, requires_grad: bool = True) -> Params:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if len(shape) == 2:
            bound = np.sqrt(6.0 / (shape[0] + shape[1]))
            data = rng.uniform(-bound, bound, size=shape)
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data, requires_grad=requires_grad)
    return params


def _lin(x, params, name):
    return ad.linear(x, params[f"{name}.W"], params.get(f"{name}.b"))


def _mlp2(x, params, name, final_relu=False):
    y = _lin(ad.relu(_lin(x, params, f"{name}.0")), params, f"{name}.1")
    return ad.relu(y) if final_relu else y


# ---------------------------------------------------------------------------
# point bookkeeping (no gradients flow through indices)


def as_batch(points) -> np.ndarray:
    if isinstance(points, Patch):
        points = points.local_points
    elif isinstance(points, (list, tuple)) and points and isinstance(points[0], Patch):
        points = np.stack([p.local_points for p in points])
    pts = np.asarray(points, dtype=np.float64)
    return pts[None] if pts.ndim == 2 else pts


def sort_by_query_distance(points: np.ndarray) -> np.ndarray:
    d2 = points[..., 0] ** 2 + points[..., 1] ** 2 + points[..., 2] ** 2
    order = np.argsort(d2, axis=1, kind="stable")
    return np.take_along_axis(points, order[..., None], axis=1)


def knn_within(points: np.ndarray, queries: np.ndarray, k: int) -> np.ndarray:
    """Indices (B, Q, k) of the k nearest ``points`` (B, n, 3) to each query (B, Q, 3)."""
    diff = queries[:, :, None, :] - points[:, None, :, :]
    d2 = diff[..., 0] ** 2 + diff[..., 1] ** 2 + diff[..., 2] ** 2
    return np.argsort(d2, axis=2, kind="stable")[:, :, :k]


def _relative(points: np.ndarray, idx: np.ndarray, centers: np.ndarray) -> np.ndarray:
    nbrs = np.take_along_axis(points[:, None, :, :], idx[..., None], axis=2)
    return nbrs - centers[:, :, None, :]


def encoded_points(points, config: ModelConfig) -> np.ndarray:
    """The M points (B, M, 3) that carry per-point weights in the output module."""
    return sort_by_query_distance(as_batch(points))[:, :config.n_encoded]


# ---------------------------------------------------------------------------
# blocks


def encode_positions(points, params: Params, config: ModelConfig, presorted: bool = False) -> Tensor:
    pts = as_batch(points)
    if config.k_encode > pts.shape[1]:
        raise ConfigError(f"k_encode {config.k_encode} exceeds patch size {pts.shape[1]}")
    if not presorted:
        pts = sort_by_query_distance(pts)
    centers = pts[:, :config.n_encoded]
    idx = knn_within(pts, centers, config.k_encode)
    offsets = Tensor._wrap(_relative(pts, idx, centers))            # (B, M, K, 3)
    e = _mlp2(offsets, params, "enc.E", final_relu=True)
    h = ad.relu(_concat_linear([(offsets, None), (e, None)], params, "enc.phi.0"))
    return ad.max_over_axis(_lin(h, params, "enc.phi.1"), axis=2)


def _concat_linear(pieces, params: Params, name: str) -> Tensor:
    """Linear layer over the concatenation of ``pieces`` without building it.

    ``pieces`` is a list of ``(tensor, idx)``. A piece with an index holds per-point
    features; it is multiplied by its weight block first and gathered to the
    (B, n, k) neighbour grid afterwards, which is the same product at a
    fraction of the cost.
    """
    W = params[f"{name}.W"]
    blocks = ad.split(W, [x.shape[-1] for x, _ in pieces], axis=0)
    return ad.linear_sum([(x, Wb, idx) for (x, idx), Wb in zip(pieces, blocks)],
                         params[f"{name}.b"])


def _local_aggregation(feats: Tensor, pts: np.ndarray, params: Params, config: ModelConfig,
                       level: int) -> Tensor:
    idx = knn_within(pts, pts, config.k_local)                      # (B, n, k)
    rel = Tensor._wrap(_relative(pts, idx, pts))
    # dense block: layer l sees [gathered feats : rel : y_1 : ... : y_{l-1}]
    pieces = [(feats, idx), (rel, None)]
    for layer in range(config.dense_depth):
        y = ad.relu(_concat_linear(pieces, params, f"st.la{level}.dense{layer}"))
        pieces.append((y, None))
    out = _concat_linear(pieces, params, f"st.la{level}.out")      # (B, n, k, c)
    return ad.max_over_axis(out, axis=2)


def _global_shift(feats: Tensor, keep: int, params: Params, level: int) -> Tensor:
    pooled = ad.max_over_axis(feats, axis=1)                        # (B, c)
    v = ad.relu(_lin(pooled, params, f"st.gs{level}.V"))
    kept = ad.take(feats, np.arange(keep), axis=1) if keep < feats.shape[1] else feats
    u = ad.add(_lin(kept, params, f"st.gs{level}.U"),
               ad.reshape(ad.linear(v, params[f"st.gs{level}.Uv.W"]), (v.shape[0], 1, -1)))
    return ad.relu(u)


def space_transform(points, params: Params, config: ModelConfig, presorted: bool = False) -> Tensor:
    pts = as_batch(points)
    if not presorted:
        pts = sort_by_query_distance(pts)
    feats = ad.relu(_lin(Tensor._wrap(pts[:, :config.scales[0]]), params, "st.lift"))
    targets = list(config.scales[1:]) + [config.n_encoded]
    for s, n in enumerate(config.scales):
        level_pts = pts[:, :n]
        feats = _local_aggregation(feats, level_pts, params, config, s)
        feats = _global_shift(feats, targets[s], params, s)
    return feats


def hyper_fit(G: Tensor, C: Tensor, params: Params, config: ModelConfig) -> Tensor:
    if G.shape != C.shape:
        raise ad.ShapeError(f"hyper_fit: G {G.shape} and C {C.shape} are not aligned")
    x = _lin(ad.concat([G, C], axis=-1), params, "fit.in")
    for t in range(config.n_res_blocks):
        x = ad.add(x, _mlp2(x, params, f"fit.res{t}"))
    return x


def output_head(fitted: Tensor, params: Params) -> tuple[Tensor, Tensor]:
    """Unnormalized head output (B, 3) and weights (B, M)."""
    w = ad.sigmoid(_mlp2(fitted, params, "out.psi"))                # (B, M, 1)
    pooled = ad.max_over_axis(ad.mul(w, fitted), axis=1)            # (B, c)
    raw = _mlp2(pooled, params, "out.H")
    return raw, ad.reshape(w, w.shape[:2])


def output_normal(fitted: Tensor, params: Params) -> tuple[Tensor, Tensor]:
    raw, w = output_head(fitted, params)
    norms = np.linalg.norm(raw.data, axis=-1)
    if np.any(norms < 1e-12):
        raise DegenerateOutput(f"normal head output vanished for batch rows {np.flatnonzero(norms < 1e-12)}")
    return ad.l2_normalize(raw, axis=-1), w


def forward(points, params: Params, config: ModelConfig) -> tuple[Tensor, Tensor]:
    """Unit normals (B, 3) and per-point weights (B, M) for a batch of patches."""
    pts = sort_by_query_distance(as_batch(points))
    G = space_transform(pts, params, config, presorted=True)
    C = encode_positions(pts, params, config, presorted=True)
    return output_normal(hyper_fit(G, C, params, config), params)


def predict(points, params: Params, config: ModelConfig, batch_size: int = 64) -> np.ndarray:
    """Inference helper: normals (B, 3) with NaN rows where the head output vanished."""
    pts = sort_by_query_distance(as_batch(points))
    frozen = {k: Tensor._wrap(v.data) for k, v in params.items()}
    out = np.full((len(pts), 3), np.nan)
    for start in range(0, len(pts), batch_size):
        chunk = pts[start:start + batch_size]
        G = space_transform(chunk, frozen, config, presorted=True)
        C = encode_positions(chunk, frozen, config, presorted=True)
        raw, _ = output_head(hyper_fit(G, C, frozen, config), frozen)
        norms = np.linalg.norm(raw.data, axis=-1, keepdims=True)
        ok = norms[:, 0] >= 1e-12
        out[start:start + len(chunk)][ok] = raw.data[ok] / norms[ok]
    return out
