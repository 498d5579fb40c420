"""Losses, Adam, and the minibatch training loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import KDTree, PointCloud, extract_patch, DegeneratePatch
from .model import ModelConfig, encoded_points, forward, init_params

logger = logging.getLogger(__name__)

LOSSES = ("sin", "mse")


@dataclass(frozen=True)
class TrainConfig:
    alpha1: float = 0.1
    alpha2: float = 1.0
    lr: float = 5e-4
    decay: float = 0.2
    decay_every: int = 20
    batch_size: int = 32
    epochs: int = 60
    queries_per_shape: int = 200
    seed: int = 0
    loss: str = "sin"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    threads: int = 1

    def __post_init__(self):
        if self.alpha1 < 0 or self.alpha2 < 0:
            raise ValueError("loss weights must be >= 0")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if not 0 < self.decay <= 1:
            raise ValueError("decay factor must lie in (0, 1]")
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if min(self.decay_every, self.batch_size, self.epochs, self.queries_per_shape, self.threads) < 1:
            raise ValueError("counts must be >= 1")

    def lr_at(self, epoch: int) -> float:
        """Learning rate during ``epoch`` (0-based): decayed every ``decay_every`` epochs."""
        return self.lr * self.decay ** (epoch // self.decay_every)


# ---------------------------------------------------------------------------
# losses


def sin_loss(n, n_gt) -> Tensor:
    """``|n_gt x n|``, averaged over a leading batch axis if there is one."""
    s = ad.norm3(ad.cross3(ad.as_tensor(n_gt), n))
    return ad.mean(s) if s.ndim else s


def mse_loss(n, n_gt) -> Tensor:
    d = ad.sub(n, ad.as_tensor(n_gt))
    sq = ad.sum_over_axis(ad.mul(d, d), axis=-1)
    return ad.mean(sq) if sq.ndim else sq


def weight_targets(points: np.ndarray, n_gt: np.ndarray) -> np.ndarray:
    """Gaussian targets on squared distance to the true tangent plane.

    ``points`` (..., M, 3), ``n_gt`` (..., 3). The bandwidth is
    ``max(0.05^2, 0.3 * mean((p . n)^2))``, already a squared length, so the
    targets are ``exp(-(p . n)^2 / bandwidth)``.
    """
    points = np.asarray(points, dtype=np.float64)
    n_gt = np.asarray(n_gt, dtype=np.float64)
    d2 = np.einsum("...mi,...i->...m", points, n_gt) ** 2
    delta = np.maximum(0.05**2, 0.3 * d2.mean(axis=-1, keepdims=True))
    return np.exp(-d2 / delta)


def weight_loss(weights, points: np.ndarray, n_gt: np.ndarray) -> Tensor:
    target = weight_targets(points, n_gt)
    d = ad.sub(weights, target)
    return ad.mean(ad.mul(d, d))


def total_loss(l1, l2, alpha1: float = 0.1, alpha2: float = 1.0) -> Tensor:
    return ad.add(ad.scale(l1, alpha1), ad.scale(l2, alpha2))


def patch_loss(points, n_gt, params, model_cfg: ModelConfig, train_cfg: TrainConfig):
    """Total loss for a batch, plus its two components as floats."""
    n, w = forward(points, params, model_cfg)
    l1 = sin_loss(n, n_gt) if train_cfg.loss == "sin" else mse_loss(n, n_gt)
    l2 = weight_loss(w, encoded_points(points, model_cfg), n_gt)
    return total_loss(l1, l2, train_cfg.alpha1, train_cfg.alpha2), l1.item(), l2.item()


# ---------------------------------------------------------------------------
# optimizer


class NonFiniteGradient(ArithmeticError):
    pass


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, 0)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update. Returns new ``(params, state)``; inputs are untouched."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for {name!r}; step rejected")
    t = state.step + 1
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = beta1 * state.m[name] + (1 - beta1) * g
        v = beta2 * state.v[name] + (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        new_p[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[name], new_v[name] = m, v
    return new_p, AdamState(new_m, new_v, t)


# ---------------------------------------------------------------------------
# training loop


class TrainingDiverged(ArithmeticError):
    def __init__(self, message: str, last_good: "TrainState"):
        super().__init__(message)
        self.last_good = last_good


@dataclass
class TrainState:
    params: dict[str, np.ndarray]
    adam: AdamState
    epoch: int = 0
    history: list[float] = field(default_factory=list)
    rng_state: dict | None = None


class PatchPool:
    """Lazily extracted, cached training patches for a list of clouds."""

    def __init__(self, clouds: list[PointCloud], patch_size: int):
        for c in clouds:
            if c.normals is None:
                raise ValueError("training clouds need ground-truth normals")
        self.clouds = clouds
        self.patch_size = patch_size
        self._trees = [KDTree(c.points) for c in clouds]
        self._cache: dict[tuple[int, int], tuple[np.ndarray, np.ndarray] | None] = {}

    def get(self, shape: int, index: int):
        key = (shape, index)
        if key not in self._cache:
            try:
                p = extract_patch(self.clouds[shape], index, self.patch_size, self._trees[shape])
                self._cache[key] = (p.local_points, p.gt_normal_local)
            except DegeneratePatch:
                self._cache[key] = None
        return self._cache[key]

    def sample(self, rng: np.random.Generator, per_shape: int) -> list[tuple[int, int]]:
        keys = []
        for s, cloud in enumerate(self.clouds):
            n = len(cloud)
            idx = rng.choice(n, size=min(per_shape, n), replace=False)
            keys.extend((s, int(i)) for i in idx)
        return [keys[i] for i in rng.permutation(len(keys))]


def _snapshot(params, adam, epoch, history, rng) -> TrainState:
    return TrainState(dict(params), adam, epoch, list(history), rng.bit_generator.state)


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, clouds: list[PointCloud],
          resume: TrainState | None = None, checkpoint_path=None, checkpoint_every: int = 0,
          log_every: int = 1) -> TrainState:
    """Train from scratch (or resume) and return the final state.

    One epoch samples ``queries_per_shape`` query points from every cloud and
    visits them in shuffled minibatches. On a non-finite loss or gradient the run
    aborts with :class:`TrainingDiverged` carrying the last completed epoch,
    which is also written to ``checkpoint_path`` when given.
    """
    rng = np.random.default_rng(train_cfg.seed)
    if resume is None:
        params = {k: t.data for k, t in init_params(model_cfg, train_cfg.seed, False).items()}
        adam = AdamState.zeros_like(params)
        history: list[float] = []
        start = 0
    else:
        params, adam, history, start = dict(resume.params), resume.adam, list(resume.history), resume.epoch
        if resume.rng_state is not None:
            rng.bit_generator.state = resume.rng_state
    pool = PatchPool(clouds, model_cfg.patch_size)
    last_good = _snapshot(params, adam, start, history, rng)

    def save(state):
        if checkpoint_path is not None:
            from .io import Checkpoint, save_checkpoint
            save_checkpoint(checkpoint_path, Checkpoint.from_state(state, model_cfg, train_cfg))

    with threadpool_limits(limits=train_cfg.threads):
        for epoch in range(start, train_cfg.epochs):
            lr = train_cfg.lr_at(epoch)
            keys = pool.sample(rng, train_cfg.queries_per_shape)
            items = [it for it in (pool.get(*k) for k in keys) if it is not None]
            epoch_losses = []
            for b in range(0, len(items), train_cfg.batch_size):
                chunk = items[b:b + train_cfg.batch_size]
                pts = np.stack([c[0] for c in chunk])
                gt = np.stack([c[1] for c in chunk])
                leaves = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
                loss, _, _ = patch_loss(pts, gt, leaves, model_cfg, train_cfg)
                value = loss.item()
                if not np.isfinite(value):
                    save(last_good)
                    raise TrainingDiverged(f"loss became {value} in epoch {epoch}", last_good)
                ad.backward(loss)
                grads = {k: t.grad for k, t in leaves.items() if t.grad is not None}
                try:
                    params, adam = adam_step(params, grads, adam, lr, train_cfg.beta1,
                                             train_cfg.beta2, train_cfg.eps)
                except NonFiniteGradient as exc:
                    save(last_good)
                    raise TrainingDiverged(str(exc), last_good) from exc
                history.append(value)
                epoch_losses.append(value)
            last_good = _snapshot(params, adam, epoch + 1, history, rng)
            if log_every and (epoch + 1) % log_every == 0:
                logger.info("epoch %d/%d lr %.3g loss %.6f", epoch + 1, train_cfg.epochs, lr,
                            float(np.mean(epoch_losses)) if epoch_losses else float("nan"))
            if checkpoint_every and (epoch + 1) % checkpoint_every == 0:
                save(last_good)
    return last_good
