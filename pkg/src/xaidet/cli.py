"""Command-line entry point.

Exit codes: 0 success, 2 invalid input, 3 metric undefined, 1 anything else
raised by the toolkit (for example a diverged training run).
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import experiment as ex
from . import io
from . import synthdata as sd
from .detmetrics import ApConfig, mean_ap
from .errors import InputError, MetricUndefined, ShapeMismatch, XaidetError
from .micromodel import checkpoint, gradcam, training
from .micromodel.training import TrainConfig, TrainData, TransferRegime
from .xaimetrics import ExplainedDetection, TargetMode, XaiEvalConfig, evaluate_explanations

EXIT_OK, EXIT_FAIL, EXIT_INPUT, EXIT_METRIC = 0, 1, 2, 3


def _load_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise InputError(f"config file not found: {p}")
    try:
        data = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise io.ParseError(f"{p}: {e.msg}", e.lineno, e.colno) from None
    if not isinstance(data, dict):
        raise InputError(f"{p}: config must be a JSON object")
    return data


def _spec(args) -> ex.ExperimentSpec:
    cfg = _load_config(args.config)
    if getattr(args, "seed", None):
        cfg["seeds"] = list(args.seed)
    return ex.ExperimentSpec.from_dict(cfg, out_dir=getattr(args, "out", None))


def _train_config(args, section: str) -> TrainConfig:
    """Training settings from the ``pretrain`` / ``train`` sections of an experiment config."""
    cfg = _load_config(args.config)
    spec = ex.ExperimentSpec.from_dict({k: cfg[k] for k in ("pretrain", "train") if k in cfg})
    return spec.pretrain if section == "pretrain" else spec.train[args.regime]


def _emit(text: str, out):
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _bundle_data(dirs) -> TrainData:
    return TrainData(*sd.concat([sd.load_bundle(d) for d in dirs]))


# ----------------------------------------------------------------- commands


def cmd_synth(args):
    spec = _spec(args)
    out = Path(args.out)
    seed = spec.seeds[0]
    for key in ex.DOMAIN_KEYS:
        bundle = sd.generate(spec.domains[key], int(spec.sizes[key]), ex._data_seed(seed, key))
        for name, part in zip(("train", "val", "test"), sd.split(bundle, seed=seed)):
            sd.save_bundle(part, out / key / name, extra={"split": name, "domain_key": key})
    print(f"wrote bundles for {', '.join(ex.DOMAIN_KEYS)} under {out}")


def cmd_pretrain(args):
    cfg = _train_config(args, "pretrain")
    val = _bundle_data(args.val) if args.val else None
    backbone, hist = training.pretrain(_bundle_data(args.train), val, cfg, args.seed)
    checkpoint.save_params(backbone, args.out)
    _write_history(hist, args.out)


def cmd_train(args):
    cfg = _train_config(args, "train")
    pretrained = checkpoint.load_params(args.pretrained) if args.pretrained else None
    val = _bundle_data(args.val) if args.val else None
    params, hist = training.train(_bundle_data(args.train), val, args.regime, cfg, args.seed, pretrained)
    checkpoint.save_params(params, args.out)
    _write_history(hist, args.out)


def _write_history(hist, ckpt_path):
    p = Path(ckpt_path).with_suffix(".history.json")
    p.write_text(json.dumps(hist.to_dict(), indent=2) + "\n", encoding="utf-8")


def _load_model(path) -> dict:
    params = checkpoint.load_params(path)
    missing = set(training.net.PARAM_NAMES) - set(params)
    if missing:
        raise InputError(f"{path}: checkpoint lacks {sorted(missing)}")
    return params


def cmd_predict(args):
    params = _load_model(args.params)
    bundle = sd.load_bundle(args.data)
    dets = training.predict_batch(params, bundle.images(), bundle.image_ids, args.score_threshold)
    io.write_detections(dets, args.out)
    print(f"{len(dets)} detections written to {args.out}")


def cmd_explain(args):
    params = _load_model(args.params)
    bundle = sd.load_bundle(args.data)
    dets = io.read_detections(args.detections)
    by_id = {g.image_id: n for n, g in enumerate(bundle.ground_truths)}
    images = bundle.images()
    out = Path(args.out)
    (out / "grids").mkdir(parents=True, exist_ok=True)
    if args.heatmaps:
        (out / "heatmaps").mkdir(exist_ok=True)
    entries = []
    for n, d in enumerate(dets):
        if d.image_id not in by_id:
            raise io.IntegrityError(f"detection {n} refers to unknown image {d.image_id}")
        grid = gradcam.grad_cam(params, images[by_id[d.image_id]], d.category_id - 1)
        rel = f"grids/{n:06d}.npy"
        io.write_grid(grid, out / rel)
        if args.heatmaps:
            io.write_heatmap(grid, out / "heatmaps" / f"{n:06d}.pgm")
        entries.append(io.ManifestEntry(n, d.image_id, d.category_id, rel))
    io.write_manifest(entries, out / "manifest.json")
    print(f"{len(entries)} explanations written to {out}")


def _ap_config(args) -> ApConfig:
    if args.iou:
        return ApConfig(iou_thresholds=tuple(args.iou))
    return ApConfig()


def cmd_eval_ap(args):
    ann = io.read_annotations(args.annotations)
    dets = io.read_detections(args.detections)
    report = mean_ap(dets, ann.ground_truths(), _ap_config(args))
    d = report.to_dict()
    if args.format == "json":
        text = json.dumps(d, indent=2) + "\n"
    elif args.format == "md":
        cols = " | ".join(f"{t:.2f}" for t in report.thresholds)
        lines = [f"| Class | AP | {cols} |", "|---|---:|" + "---:|" * len(report.thresholds)]
        for c in d["classes"]:
            caps = " | ".join(f"{v:.3f}" for v in c["cap"])
            lines.append(f"| {c['category_id']} | {100 * c['ap']:.1f} | {caps} |")
        lines.append(f"| mean | {100 * report.mean_ap:.1f} |" + " |" * len(report.thresholds))
        text = "\n".join(lines) + "\n"
    else:
        lines = ["category_id,ap," + ",".join(f"cap_{t:.2f}" for t in report.thresholds)]
        for c in d["classes"]:
            lines.append(f"{c['category_id']},{c['ap']!r}," + ",".join(repr(v) for v in c["cap"]))
        lines.append(f"mean,{report.mean_ap!r}," + "," * (len(report.thresholds) - 1))
        text = "\n".join(lines) + "\n"
    _emit(text, args.out)


def cmd_eval_xai(args):
    ann = io.read_annotations(args.annotations)
    dets = io.read_detections(args.detections)
    entries = io.read_manifest(args.manifest)
    base = Path(args.manifest).parent
    sizes = {im.id: (im.height, im.width) for im in ann.images}
    explained = []
    for e in entries:
        if not 0 <= e.detection_index < len(dets):
            raise io.IntegrityError(f"manifest entry refers to missing detection {e.detection_index}")
        det = dets[e.detection_index]
        if (det.image_id, det.category_id) != (e.image_id, e.category_id):
            raise io.IntegrityError(f"manifest entry {e.detection_index} disagrees with its detection")
        grid = io.read_grid(base / e.grid_path)
        if e.image_id in sizes and (grid.height, grid.width) != sizes[e.image_id]:
            raise ShapeMismatch(f"{e.grid_path}: grid {grid.height}x{grid.width} does not match image {e.image_id}")
        explained.append(ExplainedDetection(det, grid))
    cfg = XaiEvalConfig(
        match_iou=args.iou[0] if args.iou else 0.5,
        score_threshold=args.score_threshold,
        k=args.k,
        target_mode=TargetMode(args.target_mode),
    )
    report = evaluate_explanations(explained, ann.ground_truths(), cfg)
    d = report.to_dict()
    if args.format == "json":
        text = json.dumps(d, indent=2) + "\n"
    elif args.format == "md":
        lines = ["| Class | AL ↑ | TKI ↑ | n |", "|---|---:|---:|---:|"]
        for c, v in d["per_class"].items():
            lines.append(f"| {c} | {_pm(v['al'])} | {_pm(v['tki'])} | {v['al']['count']} |")
        lines.append(f"| all | {_pm(d['al'])} | {_pm(d['tki'])} | {d['al']['count']} |")
        lines.append("")
        lines.append(
            f"skipped (no positive relevance): {d['skipped_no_relevance']}, unmatched: {d['unmatched']}, "
            f"below threshold: {d['below_threshold']}"
        )
        text = "\n".join(lines) + "\n"
    else:
        lines = ["class,al_mean,al_variance,tki_mean,tki_variance,count"]
        rows = list(d["per_class"].items()) + [("all", {"al": d["al"], "tki": d["tki"]})]
        for c, v in rows:
            lines.append(
                f"{c},{v['al']['mean']!r},{v['al']['variance']!r},{v['tki']['mean']!r},{v['tki']['variance']!r},{v['al']['count']}"
            )
        text = "\n".join(lines) + "\n"
    _emit(text, args.out_file)


def _pm(s):
    return f"{s['mean']:.3f}±{s['variance']:.3f}"


def cmd_experiment(args):
    spec = _spec(args)
    log = (lambda m: print(m, file=sys.stderr, flush=True)) if args.verbose else None
    report = ex.run_experiment(spec, args.out, log=log)
    sys.stdout.write(report.render(args.format))


def cmd_report(args):
    report = ex.load_report(args.out)
    report.write(args.out)
    sys.stdout.write(report.render(args.format))


# ------------------------------------------------------------------- parser


def _floats(text):
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="xaidet", description="Detection AP and explanation localization toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate and split the three synthetic domains")
    s.add_argument("--config")
    s.add_argument("--seed", type=int, action="append")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("pretrain", help="train on source bundles and export the backbone")
    s.add_argument("--train", nargs="+", required=True, help="bundle directories")
    s.add_argument("--val", nargs="*")
    s.add_argument("--config")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="checkpoint path")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("train", help="train a detector under one transfer regime")
    s.add_argument("--train", nargs="+", required=True)
    s.add_argument("--val", nargs="*")
    s.add_argument("--regime", choices=[r.value for r in TransferRegime], default="fine_tune_all")
    s.add_argument("--pretrained", help="backbone checkpoint")
    s.add_argument("--config")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("predict", help="write detections for a bundle")
    s.add_argument("--params", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--score-threshold", type=float, default=0.0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("explain", help="GradCAM grids for detections, plus a manifest")
    s.add_argument("--params", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--detections", required=True)
    s.add_argument("--heatmaps", action="store_true", help="also export PGM heatmaps")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_explain)

    s = sub.add_parser("eval-ap", help="COCO-style AP of detections against annotations")
    s.add_argument("--annotations", required=True)
    s.add_argument("--detections", required=True)
    s.add_argument("--iou", type=_floats, help="comma-separated IoU thresholds")
    s.add_argument("--format", choices=("json", "md", "csv"), default="json")
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval_ap)

    s = sub.add_parser("eval-xai", help="AL and TKI of explanation grids")
    s.add_argument("--annotations", required=True)
    s.add_argument("--detections", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--k", type=int, default=1000)
    s.add_argument("--iou", type=_floats, help="matching IoU")
    s.add_argument("--score-threshold", type=float, default=0.5)
    s.add_argument("--target-mode", choices=[m.value for m in TargetMode], default="matched_box")
    s.add_argument("--format", choices=("json", "md", "csv"), default="json")
    s.add_argument("--out", dest="out_file")
    s.set_defaults(func=cmd_eval_xai)

    s = sub.add_parser("experiment", help="run the regime and composition experiments")
    s.add_argument("--config")
    s.add_argument("--seed", type=int, action="append", help="repeatable; overrides the config seeds")
    s.add_argument("--out", required=True)
    s.add_argument("--format", choices=("json", "md", "csv"), default="md")
    s.add_argument("--verbose", action="store_true")
    s.set_defaults(func=cmd_experiment)

    s = sub.add_parser("report", help="rebuild the report from stored raw results")
    s.add_argument("--out", required=True, help="experiment directory")
    s.add_argument("--format", choices=("json", "md", "csv"), default="md")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except InputError as e:
        print(f"input error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except MetricUndefined as e:
        print(f"metric undefined: {e}", file=sys.stderr)
        return EXIT_METRIC
    except XaidetError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAIL
    except FileNotFoundError as e:
        print(f"input error: no such file {e.filename}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
