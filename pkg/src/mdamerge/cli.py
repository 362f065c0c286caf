"""Command-line interface.

Exit codes: 0 success, 2 validation error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import chkpt, etf, feature_align, metrics, param_align, pipeline, toybench
from .errors import FormatError, InvalidArgumentError, MdaError

log = logging.getLogger("mdamerge")

MANIFEST = "tasks.json"
DATA = "data.npz"


def _add_bench_args(p):
    d = toybench.BenchConfig()
    p.add_argument("--tasks", type=int, default=d.num_tasks)
    p.add_argument("--classes", type=int, default=d.classes_per_task, help="classes per task")
    p.add_argument("--d-in", type=int, default=d.d_in)
    p.add_argument("--d-hidden", type=int, default=d.d_hidden)
    p.add_argument("--d-feature", type=int, default=d.d_feature)
    p.add_argument("--n-train", type=int, default=d.n_train)
    p.add_argument("--n-test", type=int, default=d.n_test)
    p.add_argument("--stddev", type=float, default=d.stddev)
    p.add_argument("--train-epochs", type=int, default=d.train_epochs)
    p.add_argument("--train-lr", type=float, default=d.train_lr)


def _bench_config(args, seed: int) -> toybench.BenchConfig:
    return toybench.BenchConfig(
        num_tasks=args.tasks,
        classes_per_task=args.classes,
        d_in=args.d_in,
        d_hidden=args.d_hidden,
        d_feature=args.d_feature,
        n_train=args.n_train,
        n_test=args.n_test,
        stddev=args.stddev,
        train_epochs=args.train_epochs,
        train_lr=args.train_lr,
        seed=seed,
    )


def _add_mda_args(p):
    p.add_argument("--target", choices=param_align.TARGETS, default="etf")
    p.add_argument("--k-frac", default=param_align.PER_TASK, help="fraction of d_out per task, or 'per-task'")
    p.add_argument("--mode", choices=param_align.MODES, default="projected")
    p.add_argument("--no-norm-match", action="store_true")
    p.add_argument("--num-classes", type=int, default=None, help="frame size C (default: total classes)")
    p.add_argument("--frame-seed", type=int, default=0)


def _mda_config(args, lam: float | None = None) -> param_align.MdaConfig:
    k = args.k_frac if args.k_frac == param_align.PER_TASK else float(args.k_frac)
    return param_align.MdaConfig(
        k_fraction=k,
        target=args.target,
        lambda_default=1.0 if lam is None else lam,
        norm_match=not args.no_norm_match,
        mode=args.mode,
        seed=args.frame_seed,
        num_classes=args.num_classes,
    )


def _add_hp_args(p):
    d = feature_align.AlignHParams()
    p.add_argument("--alpha", type=float, default=d.alpha)
    p.add_argument("--beta", type=float, default=d.beta)
    p.add_argument("--lr", type=float, default=d.lr)
    p.add_argument("--epochs", type=int, default=d.epochs)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--label-mode", choices=("true", "pseudo"), default=d.label_mode)
    p.add_argument("--frame-orientation", choices=("heads", "seeded"), default=d.frame_orientation)


def _hp(args) -> feature_align.AlignHParams:
    return feature_align.AlignHParams(
        alpha=args.alpha,
        beta=args.beta,
        lr=args.lr,
        epochs=args.epochs,
        batch=args.batch,
        label_mode=args.label_mode,
        frame_orientation=args.frame_orientation,
    )


# bench directory -----------------------------------------------------------


def write_bench(bench: toybench.Bench, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    chkpt.save(bench.pretrained, out / "pretrained.mdat")
    arrays, tasks = {}, []
    for task, ft in zip(bench.tasks, bench.finetuned):
        name = f"{task.task_id}.mdat"
        chkpt.save(ft, out / name)
        tasks.append({"task_id": task.task_id, "checkpoint": name, "num_classes": task.num_classes})
        for key in ("means", "x_train", "y_train", "x_test", "y_test"):
            arrays[f"{task.task_id}/{key}"] = getattr(task, key)
    np.savez(out / DATA, **arrays)
    manifest = {
        "format": "mda-bench/1",
        "config": bench.config.to_dict(),
        "pretrained": "pretrained.mdat",
        "data": DATA,
        "tasks": tasks,
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2))


def read_bench(root: Path) -> toybench.Bench:
    path = Path(root) / MANIFEST
    if not path.exists():
        raise InvalidArgumentError(f"no bench manifest at {path}")
    manifest = json.loads(path.read_text())
    if manifest.get("format") != "mda-bench/1":
        raise InvalidArgumentError(f"unsupported bench manifest {manifest.get('format')!r}")
    cfg = toybench.BenchConfig(**manifest["config"])
    data = np.load(Path(root) / manifest["data"])
    tasks, finetuned = [], []
    for entry in manifest["tasks"]:
        tid = entry["task_id"]
        tasks.append(
            toybench.SyntheticTask(
                tid,
                entry["num_classes"],
                data[f"{tid}/means"],
                cfg.stddev,
                data[f"{tid}/x_train"],
                data[f"{tid}/y_train"],
                data[f"{tid}/x_test"],
                data[f"{tid}/y_test"],
            )
        )
        finetuned.append(chkpt.load(Path(root) / entry["checkpoint"]))
    return toybench.Bench(cfg, tasks, chkpt.load(Path(root) / manifest["pretrained"]), finetuned)


def _run_config(bench: toybench.Bench, args, lam=None) -> pipeline.RunConfig:
    cfg = pipeline.RunConfig(bench=bench.config)
    if hasattr(args, "target"):
        cfg.mda = _mda_config(args, lam)
    if hasattr(args, "alpha"):
        cfg.hp = _hp(args)
    if getattr(args, "classifier_mode", None):
        cfg.classifier_mode = args.classifier_mode
    return cfg


def _save_rotations(result: feature_align.AlignResult, path: Path) -> None:
    layers = [(f"rotation/{p.task_id}", p.r, "weight-2d") for p in result.rotations]
    layers.append(("etf/w", result.frame_rows, "weight-2d"))
    chkpt.save(chkpt.make_checkpoint(layers), path)


def _load_rotations(path: Path | None) -> dict[str, np.ndarray] | None:
    if path is None:
        return None
    ck = chkpt.load(path)
    return {
        s.name.split("/", 1)[1]: ck[s.name] for s in ck.manifest if s.name.startswith("rotation/")
    }


# subcommands ----------------------------------------------------------------


def cmd_gen(args) -> int:
    bench = toybench.build_bench(_bench_config(args, args.seed))
    write_bench(bench, Path(args.out))
    acc = pipeline.individual_accuracy(bench)
    print(json.dumps({"out": str(args.out), "individual_accuracy": acc}, indent=2))
    return 0


def cmd_merge(args) -> int:
    bench = read_bench(Path(args.bench))
    cfg = _run_config(bench, args, args.lam if args.method == "mda-ta" else None)
    if args.method == "avg":
        model = pipeline.merge_weight_average(bench, cfg)
    elif args.method == "ta":
        model = pipeline.merge_task_arithmetic(bench, cfg, args.lam if args.lam is not None else cfg.ta_lambda)
    else:
        if args.lam is None:
            cfg.mda.lambda_default = 1.0
        model = pipeline.merge_mda_ta(bench, cfg)
    chkpt.save(model.backbone, Path(args.out))
    print(json.dumps({"method": model.method, "out": str(args.out), **model.extra}))
    return 0


def cmd_align(args) -> int:
    bench = read_bench(Path(args.bench))
    cfg = _run_config(bench, args)
    model, result = pipeline.merge_mda_am(bench, cfg)
    out = Path(args.out)
    chkpt.save(model.backbone, out)
    rot_path = Path(args.rotations) if args.rotations else out.with_suffix(".rotations.mdat")
    _save_rotations(result, rot_path)
    trace = result.trace_jsonl()
    if args.trace:
        Path(args.trace).write_text(trace)
    else:
        sys.stdout.write(trace)
    print(json.dumps({"out": str(out), "rotations": str(rot_path), "lambda": result.lam.values}))
    return 0


def _model_from_args(bench, args) -> pipeline.MergedModel:
    backbone = chkpt.load(Path(args.checkpoint))
    rotations = _load_rotations(Path(args.rotations)) if args.rotations else None
    return pipeline.MergedModel(args.method, backbone, rotations)


def cmd_eval(args) -> int:
    bench = read_bench(Path(args.bench))
    cfg = _run_config(bench, args)
    model = _model_from_args(bench, args)
    baseline = pipeline.merge_task_arithmetic(bench, cfg)
    report = pipeline.report_for(bench, model, cfg, baseline)
    report.timestamp = datetime.now(timezone.utc).isoformat()
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text)
    if args.csv:
        Path(args.csv).write_text(metrics.accuracy_csv([report]))
    print(text if not args.out else json.dumps({"method": report.method, "mean_accuracy": report.mean_accuracy}))
    return 0


def cmd_etf(args) -> int:
    if args.kind == "orthogonal":
        frame = etf.build_orthogonal(args.classes, args.dim, args.seed)
    else:
        frame = etf.build_etf(args.classes, args.dim, args.seed)
    op = etf.align_operator(frame)
    summary = {
        "classes": frame.num_classes,
        "dim": frame.dim,
        "kind": frame.kind,
        "construction": frame.construction,
        "max_gram_deviation": etf.gram_deviation(frame),
        "operator_rank": op.rank,
        "scale": op.scale,
    }
    if args.out:
        chkpt.save(chkpt.make_checkpoint([("etf/w", frame.w, "weight-2d")]), Path(args.out))
        summary["out"] = str(args.out)
    print(json.dumps(summary, indent=2))
    return 0


def cmd_inspect(args) -> int:
    bench = read_bench(Path(args.bench))
    cfg = _run_config(bench, args)
    model = _model_from_args(bench, args)
    diag = pipeline.diagnostics(bench, model, cfg, pipeline.merge_task_arithmetic(bench, cfg))
    print(json.dumps(diag, indent=2, sort_keys=True))
    return 0


def cmd_run(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    all_reports = []
    for seed in args.seeds:
        cfg = pipeline.RunConfig(
            bench=_bench_config(args, seed), mda=_mda_config(args), hp=_hp(args),
            classifier_mode=args.classifier_mode,
        )
        if args.ta_lambda is not None:
            cfg.ta_lambda = args.ta_lambda
        reports = pipeline.run_seed(cfg)
        for r in reports:
            (out / f"report_seed{seed}_{r.method}.json").write_text(r.to_json(with_timestamp=False))
        all_reports.extend(reports)
        print(json.dumps({"seed": seed, **{r.method: r.mean_accuracy for r in reports}}))
    (out / "accuracy.csv").write_text(metrics.accuracy_csv(all_reports))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mdamerge", description=__doc__)
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate the toy bench: tasks, pretrained and fine-tuned checkpoints")
    _add_bench_args(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("merge", help="data-free merge (avg | ta | mda-ta)")
    p.add_argument("--bench", required=True)
    p.add_argument("--method", choices=("avg", "ta", "mda-ta"), required=True)
    p.add_argument("--lambda", dest="lam", type=float, default=None)
    _add_mda_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("align", help="feature-space alignment on top of the mda-ta update (mda-am)")
    p.add_argument("--bench", required=True)
    _add_mda_args(p)
    _add_hp_args(p)
    p.add_argument("--out", required=True)
    p.add_argument("--rotations", default=None)
    p.add_argument("--trace", default=None, help="write the per-epoch loss trace (JSON lines) here")
    p.set_defaults(func=cmd_align)

    for name, func, helptext in (
        ("eval", cmd_eval, "evaluate a merged checkpoint and write a report"),
        ("inspect", cmd_inspect, "print delta_etf, NC and bound diagnostics"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--bench", required=True)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--rotations", default=None)
        p.add_argument("--method", default="merged")
        p.add_argument("--classifier-mode", choices=("head", "etf-nearest"), default="head")
        _add_mda_args(p)
        _add_hp_args(p)
        if name == "eval":
            p.add_argument("--out", default=None)
            p.add_argument("--csv", default=None)
        p.set_defaults(func=func)

    p = sub.add_parser("etf", help="build a frame and print its Gram deviation")
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--kind", choices=("etf", "orthogonal"), default="etf")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_etf)

    p = sub.add_parser("run", help="full five-method pipeline over several seeds")
    _add_bench_args(p)
    _add_mda_args(p)
    _add_hp_args(p)
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.add_argument("--ta-lambda", type=float, default=None)
    p.add_argument("--classifier-mode", choices=("head", "etf-nearest"), default="head")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_run)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except FormatError as exc:
        print(f"error: checkpoint format: {exc}", file=sys.stderr)
        return 2
    except MdaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: missing file: {exc.filename}", file=sys.stderr)
        return 2
    except (KeyError, json.JSONDecodeError) as exc:
        print(f"error: schema mismatch: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
