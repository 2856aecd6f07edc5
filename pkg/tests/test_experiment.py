import json

import pytest

from xaidet import experiment as ex
from xaidet.errors import InputError
from xaidet.micromodel.training import TrainConfig, TransferRegime


def zero_epoch_spec(**kw):
    cfg = TrainConfig(epochs=0, batch_size=8)
    return ex.quick_spec(pretrain=cfg, train=ex._regime_configs(cfg), **kw)


def test_zero_epoch_smoke(tmp_path):
    spec = zero_epoch_spec(seeds=(3,))
    report = ex.run_experiment(spec, tmp_path)
    raw = json.loads((tmp_path / "raw" / "seed_3.json").read_text())
    regimes = raw["regimes"]
    assert set(regimes) == {r.value for r in TransferRegime}
    for r in regimes.values():
        assert r["ap"] >= 0
    # with no training, freeze and fine-tune are the same pretrained backbone
    # under the same per-seed random heads
    fz, ft = regimes["freeze_backbone"], regimes["fine_tune_all"]
    assert fz["ap"] == ft["ap"] and fz["accuracy"] == ft["accuracy"]
    for name in ("report.json", "report.md", "report.csv", "spec.json"):
        assert (tmp_path / name).is_file()
    assert len(report.rows) == 6


def test_report_headers_and_footnote(tmp_path):
    report = ex.run_experiment(zero_epoch_spec(seeds=(0,)), tmp_path)
    md = report.to_markdown()
    assert "AP ↑" in md and "AL ↑" in md and "TKI ↑" in md
    assert "66.4" in md and report.provenance["config_hash"] in md
    csv_lines = report.to_csv().splitlines()
    assert len(csv_lines) == 7


def test_report_rebuilds_from_raw(tmp_path):
    report = ex.run_experiment(zero_epoch_spec(seeds=(0, 1)), tmp_path)
    assert ex.load_report(tmp_path).to_json() == report.to_json()


def test_rerun_byte_identical(tmp_path):
    spec = ex.quick_spec(seeds=(0,))
    a, b = tmp_path / "a", tmp_path / "b"
    ex.run_experiment(spec, a)
    ex.run_experiment(spec, b)
    for name in ("report.json", "report.md", "report.csv", "raw/seed_0.json", "spec.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_spec_round_trip_and_hash():
    spec = ex.quick_spec()
    back = ex.ExperimentSpec.from_dict(spec.to_dict())
    assert back.to_dict() == spec.to_dict()
    assert back.config_hash() == spec.config_hash()
    assert ex.quick_spec(seeds=(0, 2)).config_hash() != spec.config_hash()


def test_spec_partial_overrides():
    spec = ex.ExperimentSpec.from_dict({"sizes": {"target": 40}, "train": {"epochs": 3}})
    assert spec.sizes["target"] == 40 and spec.sizes["source"] == ex.ExperimentSpec().sizes["source"]
    assert all(cfg.epochs == 3 and cfg.regime.value == r for r, cfg in spec.train.items())
    per = ex.ExperimentSpec.from_dict({"train": {r.value: {"epochs": i} for i, r in enumerate(TransferRegime)}})
    assert sorted(c.epochs for c in per.train.values()) == [0, 1, 2]


@pytest.mark.parametrize(
    "bad",
    [
        {"seeds": []},
        {"seeds": [1, 1]},
        {"bogus": 1},
        {"sizes": {"target": 2}},
        {"train_limits": {"target": 0}},
        {"regime_training_set": "xyz"},
        {"pretrain": {"epochs": -1}},
        {"pretrain": {"nope": 1}},
        {"xai": {"k": 0}},
        {"ap": {"iou_thresholds": [0.7, 0.5]}},
        {"domains": {"target": {"image_size": [48, 48]}}},
    ],
)
def test_spec_validation(bad):
    with pytest.raises(InputError):
        ex.ExperimentSpec.from_dict(bad)


def test_trend_checks_counting():
    def seed(ft, nop, fz, comps):
        row = lambda ap, al=0.5, tki=0.5: {"ap": ap, "al": {"mean": al}, "tki": {"mean": tki}}
        return {
            "regimes": {"fine_tune_all": row(ft), "no_pretrain": row(nop), "freeze_backbone": row(fz)},
            "compositions": {k: row(*v) for k, v in zip(("t", "ta", "tas"), comps)},
        }

    raw = [
        seed(0.3, 0.2, 0.1, [(0.1, 0.5, 0.5), (0.2, 0.6, 0.5), (0.2, 0.7, 0.6)]),
        seed(0.3, 0.3, 0.1, [(0.3, 0.5, 0.5), (0.2, 0.6, 0.5), (0.4, 0.7, 0.6)]),
    ]
    checks = ex.trend_checks(raw)
    assert checks["regime_order_seeds"] == 1
    assert checks["composition_seeds"]["ap"] == 1
    assert checks["composition_seeds"]["al"] == 2
    assert checks["composition_all_seeds"] == 1
