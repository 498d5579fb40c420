"""Desk-scale experiment recipes shared by ``scripts/`` and the acceptance tests.

Everything here is a pure function of its seed, so two calls build identical
datasets and (single-threaded) identical trained models.
"""

from __future__ import annotations

import dataclasses
import time

import numpy as np

from .autodiff import Tensor
from .geometry import PointCloud
from .metrics import BenchReport, classical_estimator, hsurf_estimator, run_benchmark
from .model import ModelConfig
from .synthetic import Corruption, SyntheticSurface, generate_dataset, random_surfaces
from .training import TrainConfig, TrainState, train

DESK_SIGMAS = (0.0, 0.005)
DESK_KINDS = {"sphere": 2, "quadric": 2}
DESK_SAMPLES = 2000

DESK_MODEL = ModelConfig()
# fixed by development runs: 60 epochs of 250 patches per shape fit in about 12 CPU-minutes
DESK_TRAIN = TrainConfig(epochs=60, queries_per_shape=250, decay_every=20, batch_size=16, lr=1e-3)


def _label(sigma: float) -> str:
    return Corruption(sigma).label


def desk_train_clouds(seed: int = 10) -> list[PointCloud]:
    clouds = []
    for i, sigma in enumerate(DESK_SIGMAS):
        surfs = random_surfaces(DESK_KINDS, seed=seed + i)
        clouds += generate_dataset(surfs, DESK_SAMPLES, Corruption(sigma), seed=seed + 10 + i)
    return clouds


def desk_test_set(seed: int = 100) -> list[tuple[str, PointCloud]]:
    """Held-out shapes (different surface draws and noise) at every desk noise level."""
    out = []
    for i, sigma in enumerate(DESK_SIGMAS):
        surfs = random_surfaces(DESK_KINDS, seed=seed + i)
        out += [(_label(sigma), c) for c in
                generate_dataset(surfs, DESK_SAMPLES, Corruption(sigma), seed=seed + 100 + i)]
    return out


def train_desk(loss: str = "sin", train_cfg: TrainConfig = DESK_TRAIN,
               model_cfg: ModelConfig = DESK_MODEL, log_every: int = 0) -> tuple[TrainState, float]:
    """Train on the desk set; returns the final state and CPU seconds spent training."""
    t0 = time.process_time()
    state = train(model_cfg, dataclasses.replace(train_cfg, loss=loss), desk_train_clouds(),
                  log_every=log_every)
    return state, time.process_time() - t0


def bench_desk(params: dict[str, np.ndarray] | None, model_cfg: ModelConfig = DESK_MODEL,
               methods=("pca", "jet:1", "jet:2", "jet:3"), queries_per_shape: int = 150,
               name: str = "hsurf") -> BenchReport:
    ests = {m: classical_estimator(m) for m in methods}
    if params is not None:
        ests[name] = hsurf_estimator({k: Tensor(v) for k, v in params.items()}, model_cfg)
    return run_benchmark(ests, desk_test_set(), model_cfg.patch_size, queries_per_shape, seed=0)


def noisy_quadrics(n_shapes: int = 5, sigma: float = 0.012, seed: int = 7) -> list[PointCloud]:
    return generate_dataset(random_surfaces({"quadric": n_shapes}, seed), DESK_SAMPLES,
                            Corruption(sigma), seed=seed + 1)


def curved_quadrics(n_shapes: int = 5, seed: int = 3) -> list[PointCloud]:
    """Noiseless quadrics whose second-order coefficients all have magnitude in [1, 1.5]."""
    rng = np.random.default_rng(seed)
    surfs = []
    for _ in range(n_shapes):
        low = rng.uniform(-0.3, 0.3, 3)
        high = rng.choice([-1.0, 1.0], 3) * rng.uniform(1.0, 1.5, 3)
        surfs.append(SyntheticSurface.quadric(np.concatenate([low, high])))
    return generate_dataset(surfs, DESK_SAMPLES, seed=seed + 1)
