"""Command-line pipeline: synth, train, render, eval, ablate-init.

Every subcommand is deterministic under fixed flags and seeds. Exit codes:
0 success, 1 usage error, 2 data error. A ``--config`` file of ``key=value``
lines (flag spellings without the leading dashes) supplies defaults;
explicit flags win on conflict.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import dataio, metrics, priors, synth, training
from .errors import ThermosplatError
from .losses import LossWeights
from .scene import init_from_points, init_random
from .rasterizer import render


class _Parser(argparse.ArgumentParser):
    # usage problems exit 1; data problems exit 2 (handled in main)
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(1)


def _build_parser() -> _Parser:
    parser = _Parser(prog="thermosplat",
                     description="Depth-supervised thermal Gaussian splatting pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[], help="generate a synthetic bundle directory")
    p.add_argument("--gaussians", type=int, default=5)
    p.add_argument("--views", type=int, default=12)
    p.add_argument("--resolution", type=int, default=synth.DEFAULT_RESOLUTION)
    p.add_argument("--orbit-radius", type=float, default=synth.DEFAULT_ORBIT_RADIUS)
    p.add_argument("--prior-noise", type=float, default=0.0,
                   help="stddev of Gaussian noise added to the emitted depth priors")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="bundle directory to create")
    p.add_argument("--config", help="key=value defaults file")

    p = sub.add_parser("train", help="optimize a scene against a bundle")
    _add_train_flags(p)
    p.add_argument("--out", required=True, help="checkpoint path to write")
    p.add_argument("--loss-csv", help="loss log path (default: <out>.loss.csv)")

    p = sub.add_parser("render", help="render views from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--bundle", required=True)
    p.add_argument("--view-index", type=int, help="render this bundle view's camera")
    p.add_argument("--orbit", type=int, help="render N cameras on a fresh orbit instead")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="key=value defaults file")

    p = sub.add_parser("eval", help="score a checkpoint on the bundle's test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--bundle", required=True)
    p.add_argument("--out", required=True, help="metrics CSV path")
    p.add_argument("--config", help="key=value defaults file")

    p = sub.add_parser("ablate-init",
                       help="train twice (points vs random init) and tabulate both")
    _add_train_flags(p)
    p.add_argument("--out", required=True, help="comparison CSV path")
    return parser


def _add_train_flags(p):
    p.add_argument("--bundle", required=True)
    p.add_argument("--iters", type=int, default=3000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lambda-ssim", type=float, default=None)
    p.add_argument("--lambda-smooth", type=float, default=None)
    p.add_argument("--lambda-depth", type=float, default=None)
    p.add_argument("--t-end-frac", type=float, default=0.5,
                   help="depth decay window as a fraction of the run")
    p.add_argument("--prior-space", choices=("depth", "inverse"), default="depth")
    p.add_argument("--init", choices=("points", "random"), default="points")
    p.add_argument("--random-points", type=int, default=100,
                   help="Gaussian count for --init random")
    p.add_argument("--config", help="key=value defaults file")


def _expand_config(argv):
    """Inline a --config file as flags placed right after the subcommand."""
    argv = list(argv)
    path = None
    cleaned = []
    i = 0
    while i < len(argv):
        arg = argv[i]
        if arg == "--config":
            if i + 1 >= len(argv):
                cleaned.append(arg)  # let argparse report the missing value
                i += 1
                continue
            path = argv[i + 1]
            i += 2
        elif arg.startswith("--config="):
            path = arg.split("=", 1)[1]
            i += 1
        else:
            cleaned.append(arg)
            i += 1
    if path is None:
        return argv
    extra = []
    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ThermosplatError(f"{path}: expected key=value, got {line!r}")
        extra.extend([f"--{key.strip()}", value.strip()])
    return cleaned[:1] + extra + cleaned[1:]


def _weights(args, iterations: int) -> LossWeights:
    kwargs = {"t_start": 0, "t_end": max(1, int(round(iterations * args.t_end_frac)))}
    if args.lambda_ssim is not None:
        kwargs["lambda_ssim"] = args.lambda_ssim
    if args.lambda_smooth is not None:
        kwargs["lambda_smooth"] = args.lambda_smooth
    if args.lambda_depth is not None:
        kwargs["lambda_depth"] = args.lambda_depth
    return LossWeights(**kwargs)


def _load_bundle(args) -> dataio.TrainingBundle:
    root = Path(args.bundle)
    bundle = dataio.read_bundle(root)
    depth_dir = root / "depth"
    if depth_dir.is_dir():
        bundle = priors.attach_priors(bundle, depth_dir, space=args.prior_space)
    return bundle


def _initial_scene(bundle, kind: str, n_random: int, seed: int):
    if kind == "points":
        return init_from_points(bundle.initial_points, bundle.initial_intensities)
    centers = np.stack([v.camera.position() for v in bundle.views])
    centroid = centers.mean(axis=0)
    half = training.camera_extent(bundle)
    return init_random(n_random, (centroid - half, centroid + half), seed=seed)


def _run_train(bundle, args, initial_scene):
    cfg = training.TrainConfig(iterations=args.iters, seed=args.seed,
                               weights=_weights(args, args.iters))
    return training.train(bundle, cfg, initial_scene=initial_scene)


def _cmd_synth(args) -> int:
    spec = synth.SynthSpec(n_gaussians=args.gaussians, n_views=args.views,
                           resolution=args.resolution, orbit_radius=args.orbit_radius,
                           seed=args.seed, prior_noise=args.prior_noise)
    synth.generate_to_dir(spec, args.out)
    print(f"wrote bundle with {args.views} views to {args.out}")
    return 0


def _cmd_train(args) -> int:
    bundle = _load_bundle(args)
    initial = _initial_scene(bundle, args.init, args.random_points, args.seed)
    result = _run_train(bundle, args, initial)
    dataio.save_scene(result.scene, args.out)
    csv_path = Path(args.loss_csv) if args.loss_csv else Path(str(args.out) + ".loss.csv")
    dataio.atomic_write(csv_path, training.loss_log_csv(result.loss_log).encode())
    # Wall time lives in a sidecar so reruns keep checkpoints and CSVs byte-identical.
    dataio.atomic_write(Path(str(args.out) + ".time.txt"), f"{result.wall_seconds:.3f}\n".encode())
    final = result.loss_log[-1]
    print(f"trained {final.iteration} iterations, {final.gaussian_count} gaussians, "
          f"final loss {final.report.total:.6f}")
    return 0


def _cmd_render(args) -> int:
    scene = dataio.load_scene(args.checkpoint)
    bundle = dataio.read_bundle(args.bundle)
    jobs = []
    if (args.view_index is None) == (args.orbit is None):
        raise ThermosplatError("render: pass exactly one of --view-index or --orbit")
    if args.view_index is not None:
        if not 0 <= args.view_index < len(bundle.views):
            raise ThermosplatError(f"render: view index {args.view_index} out of range "
                                   f"(bundle has {len(bundle.views)} views)")
        view = bundle.views[args.view_index]
        jobs.append((view.name, view.camera))
    else:
        centers = np.stack([v.camera.position() for v in bundle.views])
        centroid = centers.mean(axis=0)
        radius = float(np.linalg.norm(centers - centroid, axis=1).mean())
        ref = bundle.views[0].camera
        for i in range(args.orbit):
            camera = synth.orbit_camera(2.0 * np.pi * i / args.orbit, radius, ref.width)
            jobs.append((f"orbit{i:03d}", camera))
    for name, camera in jobs:
        out = render(scene, camera)
        paths = dataio.write_render(out, args.out, name)
        print(f"wrote {', '.join(str(p) for p in paths)}")
    return 0


def _cmd_eval(args) -> int:
    scene = dataio.load_scene(args.checkpoint)
    bundle = dataio.read_bundle(args.bundle)
    sidecar = Path(str(args.checkpoint) + ".time.txt")
    train_seconds = float(sidecar.read_text().strip()) if sidecar.exists() else None
    report = metrics.evaluate(scene, bundle, train_seconds=train_seconds)
    dataio.atomic_write(Path(args.out), report.to_csv().encode())
    print(f"mean psnr {report.mean_psnr:.3f} dB, mean ssim {report.mean_ssim:.4f} "
          f"over {len(report.rows)} test views")
    if train_seconds is not None:
        print(f"training wall time: {train_seconds:.3f} s")
    return 0


def _cmd_ablate(args) -> int:
    bundle = _load_bundle(args)
    rows = []
    for kind in ("points", "random"):
        initial = _initial_scene(bundle, kind, args.random_points, args.seed)
        result = _run_train(bundle, args, initial)
        report = metrics.evaluate(result.scene, bundle)
        rows.append((kind, report.mean_psnr, report.mean_ssim))
    lines = ["init,psnr,ssim"]
    lines += [f"{kind},{p!r},{s!r}" for kind, p, s in rows]
    dataio.atomic_write(Path(args.out), ("\n".join(lines) + "\n").encode())
    print(f"{'init':<8}{'psnr':>10}{'ssim':>10}")
    for kind, p, s in rows:
        print(f"{kind:<8}{p:>10.3f}{s:>10.4f}")
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "render": _cmd_render,
    "eval": _cmd_eval,
    "ablate-init": _cmd_ablate,
}


def main(argv=None) -> int:
    threads = os.environ.get("TDG_THREADS")
    if threads is not None and (not threads.isdigit() or int(threads) < 1):
        print(f"thermosplat: TDG_THREADS must be a positive integer, got {threads!r}",
              file=sys.stderr)
        return 1
    try:
        argv = _expand_config(sys.argv[1:] if argv is None else argv)
        args = _build_parser().parse_args(argv)
        return _COMMANDS[args.command](args)
    except SystemExit as exc:  # argparse --help (0) or usage error (1)
        return int(exc.code or 0)
    except ThermosplatError as exc:
        print(f"thermosplat: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"thermosplat: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
