"""Command-line interface: ``aldk <subcommand> ...``.

Every subcommand prints a JSON document on stdout.  Exit status is 0 on
success, 1 on invalid input (bad flags, missing or malformed files) and 2
when an internal check fails (including a failed gradient check).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path


from . import __version__

log = logging.getLogger("aldk")


class UsageError(ValueError):
    """Invalid command line; reported with exit status 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit with status 2
        raise UsageError(f"{self.prog}: {message}")


def _emit(doc: dict) -> None:
    sys.stdout.write(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"no such file: {path}")
    return p


def _figures(args) -> Path | None:
    return Path(args.figures_dir) if getattr(args, "figures_dir", None) else None


# -- gen-data ----------------------------------------------------------------

def cmd_gen_data(args) -> dict:
    from .data import FieldSpec, PhantomSpec, generate_dataset

    spec = PhantomSpec(extent=args.extent, blobs=args.blobs, organ_intensity=args.organ_intensity)
    fspec = FieldSpec(control=args.control, amplitude=args.amplitude, max_derivative=args.max_derivative)
    path = generate_dataset(args.out_dir, args.count, args.seed, spec, fspec, prefix=args.prefix)
    return {"manifest": str(path), "count": args.count, "seed": args.seed, "extent": args.extent}


# -- train ---------------------------------------------------------------------

def _train_config(args):
    from .training import TrainConfig

    cfg = {}
    if args.config:
        cfg.update(json.loads(_existing(args.config).read_text()))
    for f in fields(TrainConfig):
        value = getattr(args, f.name, None)
        if value is not None:
            cfg[f.name] = value
    return TrainConfig.from_dict(cfg)


def cmd_train(args) -> dict:
    from .data import load_manifest, teacher_from_files, teacher_from_ground_truth
    from .training import load_checkpoint, save_checkpoint, train

    manifest = load_manifest(_existing(args.manifest))
    if args.resume:
        state = load_checkpoint(_existing(args.resume))
        config = state.config
    else:
        state, config = None, _train_config(args)
    teacher = teacher_from_ground_truth(manifest) if args.teacher == "ground-truth" else \
        teacher_from_files(manifest, args.teacher_key)
    iterations = args.iterations if args.resume and args.iterations else None
    state = train(config, manifest, teacher, state=state, iterations=iterations)
    save_checkpoint(state, args.checkpoint_out)
    doc = {"checkpoint": str(args.checkpoint_out), "iterations": state.iteration, "config": asdict(config),
           "final": state.log[-1] if state.log else {}}
    if args.loss_log_out:
        Path(args.loss_log_out).write_text(json.dumps(state.log, indent=1, sort_keys=True) + "\n")
        doc["loss_log"] = str(args.loss_log_out)
    if (figs := _figures(args)) is not None:
        from .plotting import plot_loss_curves
        doc["figures"] = [str(plot_loss_curves(state.log, figs / "loss_curves.png"))]
    return doc


# -- register / evaluate ---------------------------------------------------------

def cmd_register(args) -> dict:
    from .data import VolKind, read_vol, write_vol
    from .deformation import folding_count
    from .evaluate import measure_latency, register
    from .training import load_checkpoint

    state = load_checkpoint(_existing(args.checkpoint))
    moving = read_vol(_existing(args.moving), VolKind.INTENSITY)
    fixed = read_vol(_existing(args.fixed), VolKind.INTENSITY)
    if moving.shape != fixed.shape:
        raise UsageError(f"moving {moving.shape} and fixed {fixed.shape} extents differ")
    scfg = state.config.student_config()
    phi, warped = register(moving, fixed, state.student, scfg)
    write_vol(args.field_out, phi, VolKind.DISPLACEMENT)
    doc = {"field": str(args.field_out), "folding_count": folding_count(phi)}
    if args.warped_out:
        write_vol(args.warped_out, warped, VolKind.INTENSITY)
        doc["warped"] = str(args.warped_out)
    if args.moving_mask:
        from .deformation import warp
        mask = warp(read_vol(_existing(args.moving_mask), VolKind.MASK), phi, "nearest").data
        if args.warped_mask_out:
            write_vol(args.warped_mask_out, mask, VolKind.MASK)
            doc["warped_mask"] = str(args.warped_mask_out)
        if args.fixed_mask:
            from .evaluate import dice, jacc
            fm = read_vol(_existing(args.fixed_mask), VolKind.MASK)
            doc.update(dice=dice(mask, fm), jacc=jacc(mask, fm))
    if args.latency_repeats:
        doc["latency_seconds"] = measure_latency(lambda: register(moving, fixed, state.student, scfg),
                                                 args.latency_repeats)
    return doc


def cmd_evaluate(args) -> dict:
    from .data import load_manifest
    from .evaluate import evaluate
    from .training import load_checkpoint

    state = load_checkpoint(_existing(args.checkpoint))
    manifest = load_manifest(_existing(args.manifest))
    if manifest.extent != state.config.extent:
        raise UsageError(f"manifest extent {manifest.extent} does not match checkpoint extent {state.config.extent}")
    report = evaluate(state.student, manifest, state.config.student_config(), args.latency_repeats,
                      config_echo=asdict(state.config))
    doc = report.to_dict()
    if args.report_out:
        Path(args.report_out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.report_out).write_text(report.to_json())
    if (figs := _figures(args)) is not None:
        from .plotting import plot_evaluation
        doc["figures"] = [str(plot_evaluation(doc, figs / "evaluation.png"))]
    return doc


# -- gradcheck / bench -------------------------------------------------------------

def cmd_gradcheck(args) -> dict:
    from .gradsuite import CASES, run_suite

    names = args.only or None
    if names and (unknown := set(names) - set(CASES)):
        raise UsageError(f"unknown gradcheck case(s): {sorted(unknown)}")
    results = run_suite(range(args.seeds), names, args.tol)
    return {"passed": all(r.passed for r in results), "tol": args.tol,
            "cases": [asdict(r) for r in results]}


def bench_rows(extent: int, cascades: list[int], repeats: int, seed: int = 0, base_channels: int = 16) -> list[dict]:
    """Parameter count and median registration latency per cascade count."""
    from .data import PhantomSpec, gen_phantom
    from .evaluate import measure_latency, register
    from .networks import StudentConfig, init_cascade, param_count

    moving, _ = gen_phantom(PhantomSpec(extent=extent, seed=seed))
    fixed, _ = gen_phantom(PhantomSpec(extent=extent, seed=seed + 1))
    rows = []
    for n in cascades:
        cfg = StudentConfig(base_channels=base_channels, cascades=n)
        params = init_cascade(cfg, seed)
        lat = measure_latency(lambda: register(moving, fixed, params, cfg), repeats)
        rows.append({"cascades": n, "param_count": param_count(params), "latency_seconds": lat})
    return rows


def cmd_bench(args) -> dict:
    rows = bench_rows(args.extent, args.cascades, args.repeats, args.seed, args.base_channels)
    lat = [r["latency_seconds"] for r in rows]
    doc = {"extent": args.extent, "repeats": args.repeats, "rows": rows,
           "latency_monotone": all(a < b for a, b in zip(lat, lat[1:]))}
    if (figs := _figures(args)) is not None:
        from .plotting import plot_bench
        doc["figures"] = [str(plot_bench(rows, figs / "bench.png"))]
    return doc


# -- parser ----------------------------------------------------------------------------

def _int_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError(f"expected positive integers, got {text!r}")
    return values


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="aldk", description="Light-weight deformable registration with adversarial distillation.")
    p.add_argument("--version", action="version", version=f"aldk {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write synthetic phantom pairs and a manifest")
    g.add_argument("--out-dir", required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--extent", type=int, default=32)
    g.add_argument("--blobs", type=int, default=6)
    g.add_argument("--organ-intensity", type=float, default=1.0)
    g.add_argument("--control", type=int, default=4, help="control-grid points per axis")
    g.add_argument("--amplitude", type=float, default=3.0, help="max displacement in voxels")
    g.add_argument("--max-derivative", type=float, default=0.4)
    g.add_argument("--prefix", default="pair")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a student (optionally against the critic)")
    t.add_argument("--manifest", required=True)
    t.add_argument("--config", help="JSON file of TrainConfig fields; flags override it")
    t.add_argument("--teacher", choices=["ground-truth", "files"], default="ground-truth")
    t.add_argument("--teacher-key", default="teacher", help="record key holding teacher files")
    t.add_argument("--checkpoint-out", required=True)
    t.add_argument("--loss-log-out")
    t.add_argument("--resume", help="checkpoint to continue from (its config is used)")
    t.add_argument("--figures-dir")
    for name, typ in (("batch", int), ("n-gen", int), ("beta", float), ("gamma", float), ("lam", float),
                      ("lr", float), ("iterations", int), ("seed", int), ("cascades", int), ("extent", int),
                      ("base-channels", int), ("disc-size", int)):
        t.add_argument(f"--{name}", type=typ, dest=name.replace("-", "_"))
    t.add_argument("--no-critic", dest="critic", action="store_const", const=False,
                   help="reconstruction-only training (use with --gamma 1)")
    t.add_argument("--penalty-to-student", dest="penalty_to_student", action="store_const", const=True)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("register", help="register one moving/fixed pair")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--moving", required=True)
    r.add_argument("--fixed", required=True)
    r.add_argument("--field-out", required=True)
    r.add_argument("--warped-out")
    r.add_argument("--moving-mask")
    r.add_argument("--fixed-mask")
    r.add_argument("--warped-mask-out")
    r.add_argument("--latency-repeats", type=int, default=0)
    r.set_defaults(func=cmd_register)

    e = sub.add_parser("evaluate", help="score a checkpoint on a held-out manifest")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--report-out")
    e.add_argument("--latency-repeats", type=int, default=5)
    e.add_argument("--figures-dir")
    e.set_defaults(func=cmd_evaluate)

    c = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    c.add_argument("--seeds", type=int, default=5)
    c.add_argument("--tol", type=float, default=1e-2)
    c.add_argument("--only", nargs="*", help="subset of case names")
    c.set_defaults(func=cmd_gradcheck)

    b = sub.add_parser("bench", help="parameter count and latency per cascade count")
    b.add_argument("--extent", type=int, default=32)
    b.add_argument("--cascades", type=_int_list, default=[1, 2, 3])
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--base-channels", type=int, default=16)
    b.add_argument("--figures-dir")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    from .data import TeacherError, VolFormatError
    from .training import CheckpointError, TrainingError

    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        doc = args.func(args)
    except (UsageError, VolFormatError, CheckpointError, TeacherError, TrainingError, FileNotFoundError,
            ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except AssertionError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return 2
    _emit(doc)
    if args.command == "gradcheck" and not doc["passed"]:
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
