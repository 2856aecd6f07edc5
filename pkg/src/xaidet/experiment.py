"""Transfer-regime and data-composition experiments on the synthetic benchmark.

One run per seed generates the three domains, pretrains on the source
domain, then trains and evaluates two groups of rows on the target test
split:

* regimes: freeze backbone, no pretraining and fine-tuning, all trained on
  the ``regime_training_set`` domains (target plus auxiliary by default);
* compositions: fine-tuning on target, target+auxiliary and
  target+auxiliary+source.

Per-seed raw results are written as they complete; the report aggregates
them with the median.
"""
from __future__ import annotations

import csv
import hashlib
import io as _io
import json
import statistics
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import synthdata as sd
from .detmetrics import ApConfig, mean_ap
from .errors import InputError, NothingToExplain
from .micromodel import gradcam, training
from .micromodel.training import TrainConfig, TrainData, TransferRegime
from .xaimetrics import ExplainedDetection, TargetMode, XaiEvalConfig, evaluate_explanations

DOMAIN_KEYS = ("source", "auxiliary", "target")
COMPOSITIONS = {
    "t": ("target",),
    "ta": ("target", "auxiliary"),
    "tas": ("target", "auxiliary", "source"),
}
COMPOSITION_LABELS = {"t": "target", "ta": "target+auxiliary", "tas": "target+auxiliary+source"}
REGIME_ORDER = (TransferRegime.FREEZE_BACKBONE, TransferRegime.NO_PRETRAIN, TransferRegime.FINE_TUNE_ALL)

# reference fine-tuning row on real field data, shown for context only
REFERENCE_ROW = {"ap": 66.4, "al": (0.828, 0.05), "tki": (0.899, 0.08)}


def _regime_configs(base: TrainConfig) -> dict:
    return {r.value: TrainConfig(**{**base.to_dict(), "regime": r.value}) for r in TransferRegime}


@dataclass(frozen=True)
class ExperimentSpec:
    domains: dict = field(default_factory=lambda: sd.default_domains((32, 32)))
    sizes: dict = field(default_factory=lambda: {"source": 1000, "auxiliary": 500, "target": 2000})
    # cap on training images drawn from each domain's train split (None: all)
    train_limits: dict = field(default_factory=lambda: {"source": None, "auxiliary": None, "target": 150})
    pretrain: TrainConfig = TrainConfig(epochs=30, lr=1e-2, min_delta=0.02)
    train: dict = field(default_factory=lambda: _regime_configs(TrainConfig(epochs=40, lr=1e-2, min_delta=0.02)))
    xai: XaiEvalConfig = XaiEvalConfig(score_threshold=0.0, k=64, match_iou=0.1)
    ap: ApConfig = ApConfig()
    seeds: tuple = (0, 1, 2, 3, 4)
    regime_training_set: str = "ta"
    # validate (plateau schedule, best-epoch restore) on target val only,
    # instead of the val splits of every training domain
    validate_on_target: bool = True
    out_dir: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "train", {TransferRegime(k).value: v for k, v in self.train.items()})
        if not self.seeds:
            raise InputError("an experiment needs at least one seed")
        if len(set(self.seeds)) != len(self.seeds):
            raise InputError("seeds must be distinct")
        if "target" not in self.domains:
            raise InputError("the target domain is required")
        missing = set(DOMAIN_KEYS) - set(self.domains)
        if missing:
            raise InputError(f"missing domains: {sorted(missing)}")
        sizes = {self.domains[k].image_size for k in DOMAIN_KEYS}
        if len(sizes) != 1:
            raise InputError("all domains must share one image size")
        for k in DOMAIN_KEYS:
            if int(self.sizes.get(k, 0)) < 5:
                raise InputError(f"domain {k!r} needs at least 5 images")
            limit = self.train_limits.get(k)
            if limit is not None and int(limit) < 1:
                raise InputError(f"train limit for {k!r} must be >= 1 or null")
        if set(self.train) != {r.value for r in TransferRegime}:
            raise InputError("train must hold one TrainConfig per regime")
        if not isinstance(self.validate_on_target, bool):
            raise InputError("validate_on_target must be true or false")
        if self.regime_training_set not in COMPOSITIONS:
            raise InputError(f"regime_training_set must be one of {sorted(COMPOSITIONS)}")

    def to_dict(self) -> dict:
        return {
            "domains": {k: self.domains[k].to_dict() for k in DOMAIN_KEYS},
            "sizes": {k: int(self.sizes[k]) for k in DOMAIN_KEYS},
            "train_limits": {k: self.train_limits.get(k) for k in DOMAIN_KEYS},
            "pretrain": self.pretrain.to_dict(),
            "train": {k: self.train[k].to_dict() for k in sorted(self.train)},
            "xai": {
                "match_iou": self.xai.match_iou,
                "score_threshold": self.xai.score_threshold,
                "k": self.xai.k,
                "target_mode": self.xai.target_mode.value,
            },
            "ap": {
                "iou_thresholds": list(self.ap.iou_thresholds),
                "recall_samples": self.ap.recall_samples,
                "max_detections_per_image": self.ap.max_detections_per_image,
            },
            "seeds": list(self.seeds),
            "regime_training_set": self.regime_training_set,
            "validate_on_target": self.validate_on_target,
        }

    @classmethod
    def from_dict(cls, d: dict, out_dir=None) -> "ExperimentSpec":
        """Build a spec from a (possibly partial) JSON object; absent keys keep defaults."""
        known = {"domains", "sizes", "train_limits", "pretrain", "train", "xai", "ap", "seeds", "regime_training_set", "validate_on_target", "out_dir"}
        unknown = set(d) - known
        if unknown:
            raise InputError(f"unknown experiment keys: {sorted(unknown)}")
        kw = {}
        try:
            if "domains" in d:
                base = cls().domains
                kw["domains"] = {
                    k: sd.DomainSpec.from_dict({**base[k].to_dict(), **d["domains"].get(k, {})}) for k in DOMAIN_KEYS
                }
            if "sizes" in d:
                kw["sizes"] = {**cls().sizes, **{k: int(v) for k, v in d["sizes"].items()}}
            if "train_limits" in d:
                kw["train_limits"] = {**cls().train_limits, **d["train_limits"]}
            if "pretrain" in d:
                kw["pretrain"] = TrainConfig(**d["pretrain"])
            if "train" in d:
                t = d["train"]
                if set(t) <= set(TrainConfig.__dataclass_fields__):
                    kw["train"] = _regime_configs(TrainConfig(**t))
                else:
                    kw["train"] = {r: TrainConfig(**{**cfg, "regime": r}) for r, cfg in t.items()}
            if "xai" in d:
                kw["xai"] = XaiEvalConfig(**{**d["xai"], "target_mode": TargetMode(d["xai"].get("target_mode", "matched_box"))})
            if "ap" in d:
                a = dict(d["ap"])
                if "iou_thresholds" in a:
                    a["iou_thresholds"] = tuple(float(v) for v in a["iou_thresholds"])
                kw["ap"] = ApConfig(**a)
            for key in ("seeds", "regime_training_set", "validate_on_target"):
                if key in d:
                    kw[key] = d[key]
        except (TypeError, ValueError) as e:
            raise InputError(f"invalid experiment spec: {e}") from None
        kw["out_dir"] = out_dir if out_dir is not None else d.get("out_dir")
        return cls(**kw)

    def config_hash(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def quick_spec(**overrides) -> ExperimentSpec:
    """A tiny spec for smoke runs: 16x16 images, a handful of images and epochs."""
    doms = {
        k: sd.DomainSpec.from_dict({**v.to_dict(), "image_size": [16, 16], "object_scale_range": [0.4, 0.6]})
        for k, v in sd.default_domains().items()
    }
    cfg = TrainConfig(epochs=2, batch_size=8, lr=1e-2)
    base = dict(
        domains=doms,
        sizes={"source": 20, "auxiliary": 10, "target": 10},
        train_limits={"source": None, "auxiliary": None, "target": None},
        pretrain=cfg,
        train=_regime_configs(cfg),
        xai=XaiEvalConfig(score_threshold=0.0, k=16, match_iou=0.1),
        seeds=(0, 1),
    )
    base.update(overrides)
    return ExperimentSpec(**base)


# ------------------------------------------------------------------- running


def _data_seed(seed: int, key: str) -> int:
    return int(np.random.SeedSequence([int(seed), DOMAIN_KEYS.index(key)]).generate_state(1)[0])


def _train_data(parts: list) -> TrainData:
    return TrainData(*sd.concat(parts))


def evaluate_model(params, test: sd.DatasetBundle, xai: XaiEvalConfig, ap: ApConfig) -> dict:
    """AP on the test bundle, then GradCAM + AL/TKI for every detection."""
    images = test.images()
    dets = training.predict_batch(params, images, test.image_ids)
    report = mean_ap(dets, test.ground_truths, ap)
    acc = float(np.mean([d.category_id == g.category_id for d, g in zip(dets, test.ground_truths)]))
    by_id = {i: n for n, i in enumerate(test.image_ids)}
    explained = [
        ExplainedDetection(d, gradcam.grad_cam(params, images[by_id[d.image_id]], d.category_id - 1)) for d in dets
    ]
    out = {"ap": report.mean_ap, "class_ap": report.class_ap.tolist(), "accuracy": acc, "detections": len(dets)}
    try:
        x = evaluate_explanations(explained, test.ground_truths, xai)
    except NothingToExplain as e:
        out.update(al=None, tki=None, evaluated=0, skipped_no_relevance=None, unmatched=None, xai_error=str(e))
        return out
    out.update(
        al=x.al.to_dict(),
        tki=x.tki.to_dict(),
        evaluated=x.evaluated,
        skipped_no_relevance=x.skipped_no_relevance,
        unmatched=x.unmatched,
        below_threshold=x.below_threshold,
    )
    return out


def _accuracy(params, bundle: sd.DatasetBundle) -> float:
    dets = training.predict_batch(params, bundle.images(), bundle.image_ids)
    return float(np.mean([d.category_id == g.category_id for d, g in zip(dets, bundle.ground_truths)]))


def run_seed(spec: ExperimentSpec, seed: int, log=None) -> dict:
    """All rows for one seed, as a JSON-ready dict."""
    parts = {}
    for k in DOMAIN_KEYS:
        bundle = sd.generate(spec.domains[k], int(spec.sizes[k]), _data_seed(seed, k))
        train, val, test = sd.split(bundle, seed=seed)
        limit = spec.train_limits.get(k)
        if limit is not None and limit < len(train):
            train = train.subset(range(int(limit)))
        parts[k] = (train, val, test)
    test = parts["target"][2]

    model, hist = training.pretrain_model(_train_data([parts["source"][0]]), _train_data([parts["source"][1]]), spec.pretrain, seed)
    backbone = {k: model[k] for k in training.net.BACKBONE}
    pre = {
        "final_val_loss": hist.val_loss[-1] if hist.val_loss else None,
        "source_test_accuracy": _accuracy(model, parts["source"][2]),
        "target_test_accuracy": _accuracy(model, test),
    }
    if log:
        log(f"seed {seed}: pretrained, source acc {pre['source_test_accuracy']:.3f}, target acc {pre['target_test_accuracy']:.3f}")

    cache = {}

    def run(regime: TransferRegime, comp: str) -> dict:
        key = (regime.value, comp)
        if key not in cache:
            train = _train_data([parts[d][0] for d in COMPOSITIONS[comp]])
            val_domains = ("target",) if spec.validate_on_target else COMPOSITIONS[comp]
            val = _train_data([parts[d][1] for d in val_domains])
            params, h = training.train(train, val, regime, spec.train[regime.value], seed, backbone)
            res = evaluate_model(params, test, spec.xai, spec.ap)
            res["epochs"] = len(h.train_loss)
            res["final_lr"] = h.lr[-1] if h.lr else None
            cache[key] = res
            if log:
                log(f"seed {seed}: {regime.value} on {COMPOSITION_LABELS[comp]}: AP {100 * res['ap']:.1f}")
        return cache[key]

    regimes = {r.value: run(r, spec.regime_training_set) for r in REGIME_ORDER}
    compositions = {c: run(TransferRegime.FINE_TUNE_ALL, c) for c in COMPOSITIONS}
    return {"seed": int(seed), "pretrain": pre, "regimes": regimes, "compositions": compositions}


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def run_experiment(spec: ExperimentSpec, out_dir=None, log=None) -> "Report":
    """Run every seed, storing raw results under ``out_dir/raw`` as they finish."""
    out = Path(out_dir or spec.out_dir) if (out_dir or spec.out_dir) else None
    if out is not None:
        (out / "raw").mkdir(parents=True, exist_ok=True)
        (out / "spec.json").write_text(_dump(spec.to_dict()), encoding="utf-8")
    raw = []
    for seed in spec.seeds:
        result = run_seed(spec, seed, log)
        raw.append(result)
        if out is not None:
            (out / "raw" / f"seed_{seed}.json").write_text(_dump(result), encoding="utf-8")
    report = build_report(spec.to_dict(), raw)
    if out is not None:
        report.write(out)
    return report


# -------------------------------------------------------------------- report


def _median(values):
    vals = [v for v in values if v is not None]
    return statistics.median(vals) if vals else None


def _row(label: str, group: str, training_set: str, per_seed: list[dict]) -> dict:
    def stat(metric, part):
        return _median([r[metric][part] if r[metric] else None for r in per_seed])

    return {
        "label": label,
        "group": group,
        "training_set": training_set,
        "ap": _median([100.0 * r["ap"] for r in per_seed]),
        "al_mean": stat("al", "mean"),
        "al_variance": stat("al", "variance"),
        "tki_mean": stat("tki", "mean"),
        "tki_variance": stat("tki", "variance"),
        "accuracy": _median([r["accuracy"] for r in per_seed]),
        "evaluated": sum(r["evaluated"] for r in per_seed),
        "skipped": sum(r.get("skipped_no_relevance") or 0 for r in per_seed),
        "seeds": len(per_seed),
    }


def _non_decreasing(xs):
    return all(x is not None for x in xs) and all(a <= b for a, b in zip(xs, xs[1:]))


def trend_checks(raw: list[dict]) -> dict:
    """Per-seed orderings behind the two headline comparisons."""
    regime_ok = []
    comp_ok = {"ap": [], "al": [], "tki": []}
    for r in raw:
        g = r["regimes"]
        ap = [g[k.value]["ap"] for k in (TransferRegime.FINE_TUNE_ALL, TransferRegime.NO_PRETRAIN, TransferRegime.FREEZE_BACKBONE)]
        regime_ok.append(ap[0] > ap[1] > ap[2])
        c = [r["compositions"][k] for k in COMPOSITIONS]
        comp_ok["ap"].append(_non_decreasing([x["ap"] for x in c]))
        for m in ("al", "tki"):
            comp_ok[m].append(_non_decreasing([x[m]["mean"] if x[m] else None for x in c]))
    return {
        "regime_order_per_seed": regime_ok,
        "regime_order_seeds": sum(regime_ok),
        "composition_per_seed": comp_ok,
        "composition_seeds": {m: sum(v) for m, v in comp_ok.items()},
        "composition_all_seeds": sum(all(v[i] for v in comp_ok.values()) for i in range(len(raw))),
    }


@dataclass
class Report:
    rows: list
    raw: list
    provenance: dict
    trends: dict

    def to_dict(self) -> dict:
        return {"rows": self.rows, "trends": self.trends, "provenance": self.provenance, "raw": self.raw}

    def to_json(self) -> str:
        return _dump(self.to_dict())

    def to_markdown(self) -> str:
        lines = []
        for group, title in (("regime", "Transfer regimes"), ("composition", "Training-set composition")):
            lines += [
                f"### {title}",
                "",
                "| Experiment | Training set | AP ↑ | AL ↑ | TKI ↑ | Evaluated | Skipped |",
                "|---|---|---:|---:|---:|---:|---:|",
            ]
            for r in (x for x in self.rows if x["group"] == group):
                note = "[^ref]" if group == "regime" and r["label"].startswith("Fine-tune") else ""
                lines.append(
                    f"| {r['label']}{note} | {r['training_set']} | {_fmt(r['ap'], 1)} | "
                    f"{_pm(r['al_mean'], r['al_variance'])} | {_pm(r['tki_mean'], r['tki_variance'])} | "
                    f"{r['evaluated']} | {r['skipped']} |"
                )
            lines.append("")
        p = self.provenance
        t = self.trends
        ref = REFERENCE_ROW
        lines += [
            f"Medians over seeds {p['seeds']}; AP is x100, AL and TKI are mean ± population variance.",
            f"Regime ordering (fine-tune > no pretraining > freeze) held in {t['regime_order_seeds']} of {len(p['seeds'])} seeds; "
            f"composition trend non-decreasing in AP/AL/TKI in "
            f"{t['composition_seeds']['ap']}/{t['composition_seeds']['al']}/{t['composition_seeds']['tki']} seeds.",
            "",
            f"config {p['config_hash']}, xaidet {p['version']}",
            "",
            f"[^ref]: Reference fine-tuning row reported on real field imagery: AP {ref['ap']}, "
            f"AL {ref['al'][0]}±{ref['al'][1]}, TKI {ref['tki'][0]}±{ref['tki'][1]}. "
            "Shown for context only; the synthetic benchmark is not expected to match it.",
            "",
        ]
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = _io.StringIO()
        cols = list(self.rows[0]) if self.rows else []
        w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: ("" if v is None else repr(v) if isinstance(v, float) else v) for k, v in r.items()})
        return buf.getvalue()

    def render(self, fmt: str) -> str:
        try:
            return {"json": self.to_json, "md": self.to_markdown, "csv": self.to_csv}[fmt]()
        except KeyError:
            raise InputError(f"unknown report format {fmt!r}") from None

    def write(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for fmt, name in (("json", "report.json"), ("md", "report.md"), ("csv", "report.csv")):
            (out / name).write_text(self.render(fmt), encoding="utf-8")


def _fmt(v, digits):
    return "n/a" if v is None else f"{v:.{digits}f}"


def _pm(mean, var):
    return "n/a" if mean is None else f"{mean:.3f}±{var:.3f}"


def build_report(spec_dict: dict, raw: list[dict]) -> Report:
    rows = []
    train_set = COMPOSITION_LABELS[spec_dict["regime_training_set"]]
    names = {
        TransferRegime.FREEZE_BACKBONE: "Freeze pretrained backbone",
        TransferRegime.NO_PRETRAIN: "No pretrained weights",
        TransferRegime.FINE_TUNE_ALL: "Fine-tune pretrained weights",
    }
    for reg in REGIME_ORDER:
        rows.append(_row(names[reg], "regime", train_set, [r["regimes"][reg.value] for r in raw]))
    for comp in COMPOSITIONS:
        rows.append(_row("Fine-tune pretrained weights", "composition", COMPOSITION_LABELS[comp], [r["compositions"][comp] for r in raw]))
    text = json.dumps(spec_dict, sort_keys=True, separators=(",", ":"))
    provenance = {
        "seeds": [r["seed"] for r in raw],
        "config_hash": hashlib.sha256(text.encode("utf-8")).hexdigest()[:16],
        "version": __version__,
        "spec": spec_dict,
        "pretrain": {str(r["seed"]): r["pretrain"] for r in raw},
    }
    return Report(rows=rows, raw=raw, provenance=provenance, trends=trend_checks(raw))


def load_report(out_dir) -> Report:
    """Rebuild the report from ``spec.json`` and the per-seed raw files."""
    out = Path(out_dir)
    try:
        spec_dict = json.loads((out / "spec.json").read_text(encoding="utf-8"))
        files = sorted((out / "raw").glob("seed_*.json"), key=lambda p: int(p.stem.split("_")[1]))
        raw = [json.loads(p.read_text(encoding="utf-8")) for p in files]
    except FileNotFoundError as e:
        raise InputError(f"missing experiment file: {e.filename}") from None
    except json.JSONDecodeError as e:
        raise InputError(f"corrupt experiment file: {e}") from None
    if not raw:
        raise InputError(f"no raw results under {out / 'raw'}")
    order = {s: i for i, s in enumerate(spec_dict.get("seeds", []))}
    raw.sort(key=lambda r: order.get(r["seed"], len(order)))
    return build_report(spec_dict, raw)
