"""Train the desk model, save a checkpoint, and benchmark it against the classical estimators.

    python3 scripts/desk_train.py --out runs/desk [--loss sin|mse] [--epochs N]
"""

import argparse
import dataclasses
import logging
from pathlib import Path

from threadpoolctl import threadpool_limits

from hsurf import desk, io


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--loss", choices=("sin", "mse"), default="sin")
    ap.add_argument("--epochs", type=int, default=None)
    ap.add_argument("--seed", type=int, default=None)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    cfg = desk.DESK_TRAIN
    if args.epochs:
        cfg = dataclasses.replace(cfg, epochs=args.epochs)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with threadpool_limits(1):
        state, seconds = desk.train_desk(args.loss, cfg, log_every=1)
        io.save_checkpoint(out / f"{args.loss}.ckpt", io.Checkpoint.from_state(state, desk.DESK_MODEL, cfg))
        report = desk.bench_desk(state.params)
    table = report.to_table()
    print(f"trained in {seconds / 60:.1f} min")
    print(table, end="")
    (out / f"{args.loss}_report.json").write_text(report.to_json())
    (out / f"{args.loss}_report.txt").write_text(table)


if __name__ == "__main__":
    main()
