"""Regenerate the small point-cloud and checkpoint fixtures under tests/fixtures."""

from pathlib import Path

import numpy as np

from hsurf import io
from hsurf.geometry import PointCloud
from hsurf.model import ModelConfig, init_params
from hsurf.synthetic import Corruption, SyntheticSurface, generate_dataset
from hsurf.training import TrainConfig

OUT = Path(__file__).resolve().parent.parent / "tests" / "fixtures"


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(2024)
    # flat z = 0 plane on a jittered grid
    xy = rng.uniform(-1, 1, (150, 2))
    plane = PointCloud(np.column_stack([xy, np.zeros(150)]), np.tile([0.0, 0.0, 1.0], (150, 1)))
    io.write_shape(OUT, "plane", plane, {"kind": "plane", "corruption": "sigma=0"})
    shapes = {
        "sphere": SyntheticSurface.sphere(0.8),
        "quadric": SyntheticSurface.quadric([0.1, 0.2, -0.3, 0.8, -0.4, 0.5]),
        "saddle": SyntheticSurface.saddle(1.0),
    }
    for i, (name, surf) in enumerate(shapes.items()):
        corr = Corruption(0.005 if name == "quadric" else 0.0)
        cloud = generate_dataset([surf], 150, corr, seed=i)[0]
        io.write_shape(OUT, name, cloud, {"kind": name, "corruption": corr.label})
    cfg = ModelConfig.tiny()
    params = {k: t.data for k, t in init_params(cfg, 0, False).items()}
    io.save_checkpoint(OUT / "tiny_init.ckpt", io.Checkpoint(cfg, TrainConfig(), params))


if __name__ == "__main__":
    main()
