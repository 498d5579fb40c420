"""Finite-difference suites for every op, network block and loss."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import model as m
from .autodiff import Tensor, grad_check, grad_check_params
from .training import TrainConfig, patch_loss, sin_loss, weight_loss, mse_loss

THRESHOLD = 1e-4


def _smooth(rng, shape, lo=0.2, hi=1.0):
    """Random values bounded away from zero (keeps relu/max away from kinks)."""
    return rng.uniform(lo, hi, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def op_suite(seed: int = 0, h: float = 1e-6) -> dict[str, float]:
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(4, 5))
    B = rng.normal(size=(5, 3))
    bias = rng.normal(size=3)
    v3 = rng.normal(size=(6, 3))
    proj = rng.normal(size=(6, 3))
    ties_free = rng.permutation(24).reshape(4, 6) / 10.0
    checks = {
        "matmul": (lambda x: ad.sum_over_axis(ad.matmul(x, B) * ad.matmul(x, B)), A),
        "matmul_rhs": (lambda x: ad.sum_over_axis(ad.sigmoid(ad.matmul(A, x))), B),
        "linear": (lambda x: ad.sum_over_axis(ad.sigmoid(ad.linear(A, x, bias))), B),
        "add_broadcast": (lambda x: ad.sum_over_axis(ad.sigmoid(ad.add(A, x))), rng.normal(size=5)),
        "sub": (lambda x: ad.sum_over_axis(ad.sub(x, A) * ad.sub(x, A)), rng.normal(size=(4, 5))),
        "mul": (lambda x: ad.sum_over_axis(ad.mul(x, A) * x), rng.normal(size=(4, 5))),
        "scale": (lambda x: ad.sum_over_axis(ad.scale(x, 2.5) * x), rng.normal(size=7)),
        "relu": (lambda x: ad.sum_over_axis(ad.relu(x) * x), _smooth(rng, (3, 4))),
        "sigmoid": (lambda x: ad.sum_over_axis(ad.sigmoid(x)), rng.normal(size=(3, 4))),
        "concat": (lambda x: ad.sum_over_axis(ad.sigmoid(ad.concat([x, A], axis=0)) * 1.5),
                   rng.normal(size=(2, 5))),
        "split": (lambda x: ad.sum_over_axis(ad.sigmoid(ad.split(x, [2, 3], axis=1)[1])), A),
        "max_over_axis": (lambda x: ad.sum_over_axis(ad.max_over_axis(x, axis=1) * np.arange(1.0, 5.0)),
                          ties_free),
        "sum_over_axis": (lambda x: ad.sum_over_axis(ad.sigmoid(ad.sum_over_axis(x, axis=0))), A),
        "mean": (lambda x: ad.mean(ad.mul(x, x)), A),
        "l2_normalize": (lambda x: ad.sum_over_axis(ad.l2_normalize(x, axis=-1) * proj), v3),
        "cross3": (lambda x: ad.sum_over_axis(ad.cross3(x, proj) * v3), rng.normal(size=(6, 3))),
        "norm3": (lambda x: ad.sum_over_axis(ad.norm3(x)), v3),
        "take": (lambda x: ad.sum_over_axis(ad.sigmoid(ad.take(x, [0, 2, 2], axis=1))), A),
        "gather_rows": (lambda x: ad.sum_over_axis(ad.sigmoid(ad.gather_rows(x, np.array([[0, 1, 1], [2, 0, 0]])))),
                        rng.normal(size=(2, 3, 4))),
        "linear_sum": (lambda x: ad.sum_over_axis(ad.sigmoid(ad.linear_sum(
            [(x, B[:4], np.array([[0, 1, 1], [2, 0, 0]])), (np.ones((2, 3, 2)), B[3:], None)], bias))),
            rng.normal(size=(2, 3, 4))),
        "reshape": (lambda x: ad.sum_over_axis(ad.sigmoid(ad.reshape(x, (5, 4))) * np.arange(20.0).reshape(5, 4)), A),
    }
    return {name: grad_check(f, x, h=h) for name, (f, x) in checks.items()}


def _tiny_inputs(config: m.ModelConfig, seed: int):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(2, config.patch_size, 3)) * np.array([1.0, 1.0, 0.2])
    pts /= np.linalg.norm(pts, axis=-1).max(axis=1)[:, None, None]
    n_gt = rng.normal(size=(2, 3))
    n_gt /= np.linalg.norm(n_gt, axis=1, keepdims=True)
    params = m.init_params(config, seed)
    # small random biases so no unit sits exactly at a relu kink
    for name, p in params.items():
        if name.endswith(".b"):
            p.data = rng.uniform(0.01, 0.1, size=p.shape)
    return rng, pts, n_gt, params


def block_suite(config: m.ModelConfig | None = None, seed: int = 0, h: float = 1e-6,
                max_coords: int = 6) -> dict[str, float]:
    """Every parameter tensor of every block, against central differences."""
    config = config or m.ModelConfig.tiny()
    rng, pts, n_gt, params = _tiny_inputs(config, seed)
    c = config.feature_dim
    M = config.n_encoded
    projG = rng.normal(size=(2, M, c))
    proj3 = rng.normal(size=(2, 3))
    projw = rng.normal(size=(2, M))
    fitted = Tensor(rng.normal(size=(2, M, c)))
    G0 = m.space_transform(pts, params, config).data
    C0 = m.encode_positions(pts, params, config).data

    def used(keys_prefix):
        return {k: v for k, v in params.items() if k.startswith(keys_prefix)}

    blocks = {
        "encode_positions": (lambda p: ad.sum_over_axis(m.encode_positions(pts, p, config) * projG), used("enc.")),
        "space_transform": (lambda p: ad.sum_over_axis(m.space_transform(pts, p, config) * projG), used("st.")),
        "hyper_fit": (lambda p: ad.sum_over_axis(m.hyper_fit(Tensor(G0), Tensor(C0), p, config) * projG),
                      used("fit.")),
        "output_normal": (lambda p: ad.sum_over_axis(
            m.output_normal(fitted, p)[0] * proj3) + ad.sum_over_axis(m.output_normal(fitted, p)[1] * projw),
            used("out.")),
        "forward": (lambda p: ad.sum_over_axis(m.forward(pts, p, config)[0] * proj3), params),
    }
    out = {}
    for name, (f, ps) in blocks.items():
        errs = grad_check_params(lambda sub, f=f: f({**params, **sub}), ps, h=h,
                                 max_coords=max_coords, seed=seed)
        out[name] = max(errs.values())
    # input-side checks for the blocks that take features
    out["hyper_fit[G]"] = grad_check(lambda g: ad.sum_over_axis(m.hyper_fit(g, Tensor(C0), params, config) * projG), G0, h)
    out["output_normal[fitted]"] = grad_check(
        lambda x: ad.sum_over_axis(m.output_normal(x, params)[0] * proj3), fitted.data, h)
    return out


def loss_suite(config: m.ModelConfig | None = None, seed: int = 0, h: float = 1e-6,
               max_coords: int = 6) -> dict[str, float]:
    config = config or m.ModelConfig.tiny()
    rng, pts, n_gt, params = _tiny_inputs(config, seed)
    n = rng.normal(size=(2, 3))
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    w = rng.uniform(0.1, 0.9, size=(2, config.n_encoded))
    enc = m.encoded_points(pts, config)
    out = {
        "sin_loss": grad_check(lambda x: sin_loss(x, n_gt), n, h),
        "mse_loss": grad_check(lambda x: mse_loss(x, n_gt), n, h),
        "weight_loss": grad_check(lambda x: weight_loss(x, enc, n_gt), w, h),
    }
    for loss in ("sin", "mse"):
        cfg = TrainConfig(loss=loss)
        errs = grad_check_params(lambda p: patch_loss(pts, n_gt, p, config, cfg)[0], params, h=h,
                                 max_coords=max_coords, seed=seed)
        out[f"total_loss[{loss}]"] = max(errs.values())
    return out


def run_all(config: m.ModelConfig | None = None, seed: int = 0) -> dict[str, float]:
    results = {f"op:{k}": v for k, v in op_suite(seed).items()}
    results.update({f"block:{k}": v for k, v in block_suite(config, seed).items()})
    results.update({f"loss:{k}": v for k, v in loss_suite(config, seed).items()})
    return results


def passed(results: dict[str, float], threshold: float = THRESHOLD) -> bool:
    return all(np.isfinite(v) and v < threshold for v in results.values())
