"""``hsurf`` command line: synth, estimate, train, bench, gradcheck.

Exit codes: 0 success, 1 usage, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import io
from .autodiff import Tensor
from .classical import FitError, JetConfig, estimate_batch
from .geometry import GeometryError, KDTree, extract_patches
from .metrics import classical_estimator, hsurf_estimator, run_benchmark
from .model import ConfigError, DegenerateOutput, ModelConfig, predict
from .synthetic import DENSITY_MODES, Corruption, generate_dataset, parse_shape_spec, random_surfaces
from .training import TrainConfig, TrainingDiverged, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
THREADS_ENV = "HSURF_THREADS"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _default_threads() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"{THREADS_ENV}={raw!r} is not an integer") from None
    if n < 1:
        raise UsageError(f"{THREADS_ENV} must be >= 1")
    return n


def check_method(spec: str) -> str:
    """Validate ``pca``, ``hsurf`` or ``jet:<n>``."""
    if spec in ("pca", "hsurf"):
        return spec
    kind, _, order = spec.partition(":")
    if kind == "jet":
        try:
            JetConfig(int(order))
            return spec
        except ValueError:
            pass
    raise UsageError(f"invalid method {spec!r}; expected pca, hsurf or jet:<1-4>")


def load_config_file(path) -> tuple[ModelConfig, TrainConfig]:
    """JSON with optional ``"model"`` and ``"train"`` objects of dataclass fields."""
    path = Path(path)
    if not path.is_file():
        raise io.DataError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise io.DataError(f"{path}: {exc}") from None
    if not isinstance(doc, dict) or set(doc) - {"model", "train"}:
        raise io.DataError(f"{path}: expected an object with 'model' and/or 'train' sections")
    model = dict(doc.get("model", {}))
    if "scales" in model and model["scales"] is not None:
        model["scales"] = tuple(model["scales"])
    try:
        return ModelConfig(**model), TrainConfig(**doc.get("train", {}))
    except (TypeError, ValueError) as exc:
        raise io.DataError(f"{path}: bad config: {exc}") from None


def _load_model(path):
    ckpt = io.load_checkpoint(path)
    return {k: Tensor(v) for k, v in ckpt.params.items()}, ckpt.model


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    try:
        counts = parse_shape_spec(args.shapes)
        corruption = Corruption(args.sigma, args.density)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    surfaces = random_surfaces(counts, args.seed)
    clouds = generate_dataset(surfaces, args.samples, corruption, args.seed)
    slug = corruption.label.replace("=", "").replace(",", "-")
    seen: dict[str, int] = {}
    for surf, cloud in zip(surfaces, clouds):
        j = seen[surf.kind] = seen.get(surf.kind, -1) + 1
        name = f"{surf.kind}_{j:03d}_{slug}"
        meta = {"kind": surf.kind, "corruption": corruption.label, "seed": args.seed,
                "radius": surf.radius if surf.kind == "sphere" else None,
                "coefficients": None if surf.coeffs is None else [float(a) for a in surf.coeffs.alpha]}
        io.write_shape(args.out, name, cloud, meta)
        print(f"{name}: {len(cloud)} points")
    return EXIT_OK


def cmd_estimate(args) -> int:
    method = check_method(args.method)
    cloud = io.load_xyz(args.input)
    if method == "hsurf":
        if args.checkpoint is None:
            raise UsageError("--method hsurf needs --checkpoint")
        params, mcfg = _load_model(args.checkpoint)
        patch_size = mcfg.patch_size
        if args.patch_size is not None and args.patch_size != patch_size:
            raise UsageError(f"--patch-size {args.patch_size} differs from the checkpoint's {patch_size}")
    else:
        patch_size = args.patch_size or 64
    if len(cloud) < patch_size:
        raise io.DataError(f"{args.input}: {len(cloud)} points, fewer than patch size {patch_size}")
    patches = extract_patches(cloud, range(len(cloud)), patch_size, KDTree(cloud.points))
    ok = [i for i, p in enumerate(patches) if p is not None]
    local = np.full((len(cloud), 3), np.nan)
    if ok:
        stack = np.stack([patches[i].local_points for i in ok])
        if method == "hsurf":
            local[ok] = predict(stack, params, mcfg)
        else:
            local[ok] = estimate_batch(stack, method)
    world = np.full_like(local, np.nan)
    for i in ok:
        world[i] = patches[i].to_world(local[i])
    io.save_normals(args.out, world)
    failed = int(np.isnan(world).any(axis=1).sum())
    if failed:
        print(f"warning: {failed} of {len(cloud)} normals could not be estimated (written as nan)",
              file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_train(args) -> int:
    mcfg, tcfg = load_config_file(args.config)
    overrides = {k: v for k, v in (("seed", args.seed), ("epochs", args.epochs)) if v is not None}
    tcfg = dataclasses.replace(tcfg, threads=args.threads, **overrides)
    data = io.load_dataset(args.data)
    clouds = [c for _, _, c in data]
    resume = None
    if args.resume:
        resume = io.load_checkpoint(args.resume, expect_model=mcfg).to_state()
    try:
        state = train(mcfg, tcfg, clouds, resume=resume, checkpoint_path=args.out,
                      checkpoint_every=args.checkpoint_every, log_every=0 if args.quiet else 1)
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}; last good epoch {exc.last_good.epoch} saved to {args.out}",
              file=sys.stderr)
        return EXIT_NUMERIC
    io.save_checkpoint(args.out, io.Checkpoint.from_state(state, mcfg, tcfg))
    print(f"saved {args.out} after {state.epoch} epochs, {len(state.history)} steps")
    return EXIT_OK


def cmd_bench(args) -> int:
    methods = [check_method(m.strip()) for m in args.methods.split(",") if m.strip()]
    if not methods:
        raise UsageError("--methods is empty")
    patch_size = args.patch_size or 64
    estimators = {}
    for m in methods:
        if m == "hsurf":
            if args.checkpoint is None:
                raise UsageError("method hsurf needs --checkpoint")
            params, mcfg = _load_model(args.checkpoint)
            if args.patch_size is not None and args.patch_size != mcfg.patch_size:
                raise UsageError(f"--patch-size {args.patch_size} differs from the checkpoint's "
                                 f"{mcfg.patch_size}")
            patch_size = mcfg.patch_size
            estimators[m] = hsurf_estimator(params, mcfg)
        else:
            estimators[m] = classical_estimator(m)
    # group corruption columns in label order rather than file-name order
    data = sorted(io.load_dataset(args.data), key=lambda d: (d[1], d[0]))
    missing = [n for n, _, c in data if c.normals is None]
    if missing:
        raise io.DataError(f"no ground-truth normals for {', '.join(missing)}")
    too_small = [n for n, _, c in data if len(c) < patch_size]
    if too_small:
        raise io.DataError(f"fewer points than patch size {patch_size}: {', '.join(too_small)}")
    report = run_benchmark(estimators, [(label, c) for _, label, c in data], patch_size,
                           args.queries_per_shape, args.seed)
    table = report.to_table()
    print(table, end="")
    if args.report:
        path = Path(args.report)
        path.write_text(report.to_json())
        path.with_suffix(".txt").write_text(table)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import THRESHOLD, run_all
    config = load_config_file(args.config)[0] if args.config else ModelConfig.tiny()
    results = run_all(config, args.seed)
    ok = True
    for name, err in results.items():
        good = bool(np.isfinite(err) and err < THRESHOLD)
        ok &= good
        print(f"{'PASS' if good else 'FAIL'}  {name:<32s} {err:.3e}")
    print(f"{'all passed' if ok else 'FAILED'} (threshold {THRESHOLD:g})")
    return EXIT_OK if ok else EXIT_NUMERIC


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hsurf", description="Point cloud normal estimation toolkit.")
    p.add_argument("--threads", type=int, default=None,
                   help=f"BLAS threads (default ${THREADS_ENV} or 1)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate analytic point clouds with ground-truth normals")
    s.add_argument("--shapes", required=True, help='e.g. "sphere:2,quadric:3"')
    s.add_argument("--sigma", type=float, default=0.0, help="noise as a fraction of the bbox diagonal")
    s.add_argument("--density", choices=DENSITY_MODES, default="none")
    s.add_argument("--samples", type=int, default=2000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("estimate", help="estimate a normal for every point of an .xyz file")
    s.add_argument("--method", required=True, help="pca, jet:<n> or hsurf")
    s.add_argument("--input", required=True)
    s.add_argument("--checkpoint")
    s.add_argument("--patch-size", type=int, default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_estimate)

    s = sub.add_parser("train", help="train the network on a synthetic dataset directory")
    s.add_argument("--data", required=True)
    s.add_argument("--config", required=True, help='JSON {"model": {...}, "train": {...}}')
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--epochs", type=int, default=None)
    s.add_argument("--resume")
    s.add_argument("--checkpoint-every", type=int, default=0)
    s.add_argument("--quiet", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("bench", help="RMSE table of several methods on a dataset directory")
    s.add_argument("--data", required=True)
    s.add_argument("--methods", required=True, help="comma separated, e.g. pca,jet:2,hsurf")
    s.add_argument("--checkpoint")
    s.add_argument("--patch-size", type=int, default=None)
    s.add_argument("--queries-per-shape", type=int, default=None)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--report", help="JSON report path; the text table goes next to it as .txt")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("gradcheck", help="finite-difference check of every op, block and loss")
    s.add_argument("--config")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:   # --help or a usage error from argparse
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    # the per-epoch loss log of `train` is its regular output
    is_train = args.command == "train"
    logging.basicConfig(level=logging.INFO if args.verbose or is_train else logging.WARNING,
                        format="%(message)s", stream=sys.stdout if is_train else sys.stderr, force=True)
    try:
        threads = args.threads if args.threads is not None else _default_threads()
        if threads < 1:
            raise UsageError("--threads must be >= 1")
        args.threads = threads
        with threadpool_limits(limits=threads):
            return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"hsurf: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (io.DataError, GeometryError, ConfigError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"hsurf: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (FitError, DegenerateOutput, ArithmeticError) as exc:
        print(f"hsurf: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
