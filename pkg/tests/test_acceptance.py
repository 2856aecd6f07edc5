"""Acceptance gate: one test per criterion, each recording a PASS/FAIL line.

The experiment criteria (7 and 8) share one multi-seed run at the default
experiment configuration, which takes tens of minutes on one CPU core.
"""
import json
import time

import numpy as np
import pytest

import gradcheck
import oracles
from conftest import ACCEPTANCE
from xaidet import cli, io
from xaidet import experiment as ex
from xaidet.core import BinaryMask, Box, Grid
from xaidet.detmetrics import ApConfig, Detection, GroundTruth, cap_at_threshold, class_ap, mean_ap
from xaidet.errors import FormatError, IntegrityError, ParseError
from xaidet.micromodel import checkpoint, gradcam, net
from xaidet.micromodel.optim import OptimState, PlateauState, adamw_step, plateau_step
from xaidet.xaimetrics import attribution_localization, topk_intersection, topk_mask


def record(n, ok, detail):
    ACCEPTANCE[n] = (bool(ok), detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


def rel_err(a, b):
    scale = max(abs(a), abs(b))
    return 0.0 if scale == 0 else abs(a - b) / scale


# ---------------------------------------------------------------- 1: AL / TKI


def test_c01_al_tki_oracle():
    rng = np.random.default_rng(1)
    worst, n_al, t0 = 0.0, 0, time.perf_counter()
    for _ in range(1000):
        h, w = rng.integers(1, 17, 2)
        values = rng.normal(size=(h, w)) * rng.choice([1e-3, 1.0, 1e3])
        values[rng.random((h, w)) < 0.1] = 0.0
        bits = rng.random((h, w)) < rng.random()
        k = int(rng.integers(1, h * w + 1))
        g, m = Grid(values), BinaryMask(bits)
        vl, ml = values.tolist(), bits.tolist()
        if (values > 0).any():
            worst = max(worst, rel_err(attribution_localization(g, m).value, oracles.attribution_localization(vl, ml)))
            n_al += 1
        worst = max(worst, rel_err(topk_intersection(g, m, k).value, oracles.topk_intersection(vl, ml, k)))
    dt = time.perf_counter() - t0
    record(1, worst <= 1e-12 and dt < 5, f"1000 grids ({n_al} with positive mass), max rel err {worst:.2e}, {dt:.2f}s")


# --------------------------------------------------------------------- 2: AP


def random_scenario(rng):
    n_img, n_cls = int(rng.integers(1, 5)), int(rng.integers(1, 4))
    gts, dets = [], []
    for img in range(n_img):
        for _ in range(rng.integers(0, 6)):
            x, y, w, h = rng.integers(0, 21), rng.integers(0, 21), rng.integers(2, 11), rng.integers(2, 11)
            gts.append((img, int(rng.integers(1, n_cls + 1)), (float(x), float(y), float(w), float(h))))
    if not gts:
        gts.append((0, 1, (1.0, 1.0, 4.0, 4.0)))
    for _ in range(rng.integers(0, 11)):
        score = float(rng.integers(0, 7)) / 6  # coarse scores force ties
        if rng.random() < 0.6:
            img, cls, b = gts[rng.integers(len(gts))]
            j = rng.integers(-2, 3, 4)
            box = (b[0] + j[0], b[1] + j[1], max(1.0, b[2] + j[2]), max(1.0, b[3] + j[3]))
            if rng.random() < 0.25:
                cls = int(rng.integers(1, n_cls + 1))
        else:
            img, cls = int(rng.integers(0, n_img)), int(rng.integers(1, n_cls + 1))
            box = (float(rng.integers(0, 26)), float(rng.integers(0, 26)), float(rng.integers(1, 11)), float(rng.integers(1, 11)))
        dets.append((img, cls, tuple(float(v) for v in box), score))
    return dets, gts


def test_c02_ap_oracle():
    rng = np.random.default_rng(2)
    fine, coarse = ApConfig(recall_samples=10001), ApConfig()
    worst, t0 = 0.0, time.perf_counter()
    for _ in range(200):
        dets, gts = random_scenario(rng)
        d = [Detection(i, c, Box(*b), s) for i, c, b, s in dets]
        g = [GroundTruth(i, c, Box(*b)) for i, c, b in gts]
        worst = max(worst, abs(mean_ap(d, g, fine).mean_ap - oracles.mean_ap_fine(dets, gts, fine.iou_thresholds)))
        worst = max(worst, abs(mean_ap(d, g, coarse).mean_ap - oracles.mean_ap(dets, gts, coarse.iou_thresholds)))
    dt = time.perf_counter() - t0
    gt = GroundTruth(0, 1, Box(0, 0, 10, 10))
    single = class_ap([Detection(0, 1, Box(0, 0, 6, 10), 0.5)], [gt], 1)  # IoU exactly 0.6
    tp_fp = cap_at_threshold([Detection(0, 1, gt.box, 0.9), Detection(0, 1, Box(50, 50, 5, 5), 0.8)], [gt], 1, 0.5)
    hand = single == 0.3 and tp_fp == 1.0
    record(2, worst <= 1e-9 and hand and dt < 10,
           f"200 scenarios, max abs err {worst:.2e}; hand cases AP {single!r}, CAP {tp_fp!r}; {dt:.2f}s")


# -------------------------------------------------------------- 3: gradients


def test_c03_gradients():
    t0 = time.perf_counter()
    worst, counts = {}, {}
    for layer in gradcheck.LAYERS:
        errs = []
        for seed in (0, 1):
            p, x, y, b = gradcheck.problem(seed=seed)
            e, _ = gradcheck.check_layer(p, x, y, b, layer, n_coords=100, seed=seed)
            errs.append(e)
            size = sum(p[k].size for k in gradcheck.LAYERS[layer])
            if size >= 100 and len(e) >= 100:
                break
        e = np.concatenate(errs)
        worst[layer], counts[layer] = float(e.max()), len(e)
    dt = time.perf_counter() - t0
    ok = all(v < 1e-4 for v in worst.values()) and all(c >= 100 for c in counts.values()) and dt < 30
    detail = ", ".join(f"{k} {counts[k]}@{worst[k]:.1e}" for k in worst)
    record(3, ok, f"coords@max rel err: {detail}; {dt:.1f}s")


# ----------------------------------------------------------------- 4: AdamW


def test_c04_adamw():
    params = {"t": np.array([1.0])}
    adamw_step(params, {"t": np.array([1.0])}, OptimState(lr=0.1, weight_decay=0.01))
    hand = abs(params["t"][0] - (1 - 0.1 * (1 / (1 + 1e-8) + 0.01))) <= 1e-12 and abs(params["t"][0] - 0.899) < 1e-7
    rng = np.random.default_rng(4)
    p = net.init_params(rng)
    before = {k: p[k].tobytes() for k in net.BACKBONE}
    state = OptimState(lr=0.05)
    for _ in range(50):
        adamw_step(p, {k: rng.standard_normal(v.shape) for k, v in p.items()}, state, frozen=net.BACKBONE)
    frozen_ok = all(p[k].tobytes() == before[k] for k in net.BACKBONE)
    record(4, hand and frozen_ok, f"theta' = {params['t'][0]!r}; backbone bit-identical after 50 steps: {frozen_ok}")


# --------------------------------------------------------------- 5: plateau


def trace(losses):
    s = PlateauState(current_lr=1.0, patience=5, factor=0.1)
    out = []
    for v in losses:
        plateau_step(s, v)
        out.append(s.current_lr)
    return out


def test_c05_plateau():
    single = trace([1.0] * 7)
    double = trace([1.0] * 13)
    ok = (
        single[:6] == [1.0] * 6
        and single[6] == 1.0 * 0.1
        and double[6:12] == [0.1] * 6
        and double[12] == 0.1 * 0.1
        and set(trace([5, 4, 3, 2, 1, 0.5, 0.25])) == {1.0}
    )
    record(5, ok, f"single {single[5]}->{single[6]}, double {double[11]}->{double[12]}")


# --------------------------------------------------------------- 6: GradCAM


def test_c06_gradcam():
    rng = np.random.default_rng(6)
    dims_ok = range_ok = inv_ok = True
    for h, w in ((16, 16), (32, 48), (24, 40)):
        p = net.init_params(rng)
        g = gradcam.grad_cam(p, rng.random((3, h, w)), int(rng.integers(4)))
        dims_ok &= (g.height, g.width) == (h, w)
        range_ok &= bool(g.values.min() >= 0 and g.values.max() <= 1)
    a = rng.random((8, 3, 3))
    zero_ok = not gradcam.upsampled_cam(a, -a, 12, 12).values.any()
    p = net.init_params(rng)
    p["cls.w"][:] = 0.0
    zero_ok &= not gradcam.grad_cam(p, rng.random((3, 16, 16)), 2).values.any()
    # top-k sets are only well defined where the k-th and (k+1)-th values differ
    checked = 0
    for seed in range(20):
        r = np.random.default_rng(seed)
        p = net.init_params(r)
        img = r.random((3, 32, 32))
        g1 = gradcam.grad_cam(p, img, seed % 4)
        desc = np.sort(g1.values.ravel())[::-1]
        ks = [k for k in (1, 5, 32, 128, 512) if desc[k - 1] - desc[k] > 1e-9]
        for s in (0.01, 3.0, 100.0):
            q = {k: v.copy() for k, v in p.items()}
            q["cls.w"] *= s
            q["cls.b"] *= s
            g2 = gradcam.grad_cam(q, img, seed % 4)
            inv_ok &= all(topk_mask(g1, k) == topk_mask(g2, k) for k in ks)
        checked += len(ks)
    record(6, dims_ok and range_ok and zero_ok and inv_ok and checked >= 10,
           f"dims {dims_ok}, range {range_ok}, non-positive gives zeros {zero_ok}, "
           f"top-k invariant under head rescaling ({checked} unambiguous k) {inv_ok}")


# ------------------------------------------------------------ 7/8: experiment


@pytest.fixture(scope="module")
def experiment_report(tmp_path_factory):
    out = tmp_path_factory.mktemp("experiment")
    t0 = time.perf_counter()
    report = ex.run_experiment(ex.ExperimentSpec(), out)
    return report, time.perf_counter() - t0


def test_c07_regime_ordering(experiment_report):
    report, dt = experiment_report
    rows = {r["label"]: r["ap"] for r in report.rows if r["group"] == "regime"}
    per_seed = report.trends["regime_order_per_seed"]
    pre = report.provenance["pretrain"]
    shift = all(v["source_test_accuracy"] > v["target_test_accuracy"] for v in pre.values())
    n = report.trends["regime_order_seeds"]
    medians = " > ".join(f"{v:.1f}" for v in (rows["Fine-tune pretrained weights"], rows["No pretrained weights"], rows["Freeze pretrained backbone"]))
    record(7, n >= 4 and len(per_seed) == 5 and shift,
           f"FT > NoPre > Freeze in {n}/5 seeds {per_seed}; median AP {medians}; "
           f"source beats target before transfer: {shift}; run {dt / 60:.1f} min")


def test_c08_composition_trend(experiment_report):
    report, _ = experiment_report
    comp = report.trends["composition_seeds"]
    rows = [r for r in report.rows if r["group"] == "composition"]
    med = {m: [r[k] for r in rows] for m, k in (("ap", "ap"), ("al", "al_mean"), ("tki", "tki_mean"))}
    ok = all(v >= 4 for v in comp.values())
    detail = "; ".join(
        f"{m.upper()} {comp[m]}/5 seeds, medians " + "->".join("n/a" if v is None else f"{v:.3f}" for v in med[m])
        for m in ("ap", "al", "tki")
    )
    record(8, ok, detail)


# ---------------------------------------------------------------- 9: formats


def test_c09_formats(tmp_path):
    rng = np.random.default_rng(9)
    checks = {}

    grid = Grid(rng.normal(size=(7, 5)))
    io.write_grid(grid, tmp_path / "g.npy")
    io.write_grid(io.read_grid(tmp_path / "g.npy"), tmp_path / "g2.npy")
    checks["npy"] = (tmp_path / "g.npy").read_bytes() == (tmp_path / "g2.npy").read_bytes()

    p = net.init_params(rng)
    checkpoint.save_params(p, tmp_path / "m.mmdl")
    checkpoint.save_params(checkpoint.load_params(tmp_path / "m.mmdl"), tmp_path / "m2.mmdl")
    checks["checkpoint"] = (tmp_path / "m.mmdl").read_bytes() == (tmp_path / "m2.mmdl").read_bytes()

    px = rng.integers(0, 256, (9, 11, 3), dtype=np.uint8)
    io.write_image(px, tmp_path / "a.ppm")
    io.write_image(io.read_image(tmp_path / "a.ppm"), tmp_path / "b.ppm")
    io.write_heatmap(grid, tmp_path / "h.pgm")
    io.write_image(io.read_image(tmp_path / "h.pgm"), tmp_path / "h2.pgm")
    checks["ppm/pgm"] = (tmp_path / "a.ppm").read_bytes() == (tmp_path / "b.ppm").read_bytes() and (
        tmp_path / "h.pgm"
    ).read_bytes() == (tmp_path / "h2.pgm").read_bytes()

    ann = {
        "images": [{"id": 1, "width": 32, "height": 32, "file_name": "x.ppm"}],
        "annotations": [{"id": 1, "image_id": 1, "category_id": 3, "bbox": [1.5, 2, 10, 12.25]}],
        "categories": [{"id": 3, "name": "triangle"}],
    }
    (tmp_path / "ann.json").write_text(json.dumps(ann))
    io.write_annotations(io.read_annotations(tmp_path / "ann.json"), tmp_path / "a1.json")
    io.write_annotations(io.read_annotations(tmp_path / "a1.json"), tmp_path / "a2.json")
    checks["annotations"] = (tmp_path / "a1.json").read_bytes() == (tmp_path / "a2.json").read_bytes()

    dets = [Detection(1, 3, Box(0.1, 0.2, 5.0, 6.5), 0.3), Detection(1, 1, Box(1, 1, 2, 2), 1 / 3)]
    io.write_detections(dets, tmp_path / "d1.json")
    io.write_detections(io.read_detections(tmp_path / "d1.json"), tmp_path / "d2.json")
    checks["detections"] = (tmp_path / "d1.json").read_bytes() == (tmp_path / "d2.json").read_bytes()

    def raises(exc, fn, *a):
        try:
            fn(*a)
        except exc:
            return True
        except Exception:
            return False
        return False

    npy = io.encode_grid(grid)
    ck = checkpoint.encode_params({"w": np.ones(3)})
    bad_ann = dict(ann, annotations=[dict(ann["annotations"][0], image_id=9)])
    (tmp_path / "bad_ann.json").write_text(json.dumps(bad_ann))
    (tmp_path / "broken.json").write_text('{"images": [')
    checks["malformed"] = all(
        [
            raises(FormatError, io.decode_grid, b"XNUMPY" + npy[6:]),
            raises(FormatError, io.decode_grid, npy[:-8]),
            raises(IntegrityError, io.decode_grid, io.encode_grid(Grid(np.zeros((2, 2)))).replace(b"\x00" * 8, b"\x00\x00\x00\x00\x00\x00\xf8\x7f", 1)),
            raises(FormatError, checkpoint.decode_params, b"XXXX" + ck[4:]),
            raises(FormatError, checkpoint.decode_params, ck[:-1]),
            raises(FormatError, io.decode_image, b"P3\n1 1\n255\n\x00\x00\x00"),
            raises(FormatError, io.decode_image, b"P6\n2 2\n255\n\x00"),
            raises(IntegrityError, io.read_annotations, tmp_path / "bad_ann.json"),
            raises(ParseError, io.read_annotations, tmp_path / "broken.json"),
            raises(ParseError, io.read_detections, tmp_path / "broken.json"),
        ]
    )
    record(9, all(checks.values()), ", ".join(f"{k} {'ok' if v else 'BROKEN'}" for k, v in checks.items()))


# ------------------------------------------------------------ 10: determinism


def test_c10_determinism(tmp_path):
    cfg = tmp_path / "spec.json"
    cfg.write_text(json.dumps(ex.quick_spec(seeds=(0, 1)).to_dict()))
    outs = []
    for name in ("a", "b"):
        assert cli.main(["experiment", "--config", str(cfg), "--out", str(tmp_path / name)]) == 0
        outs.append(tmp_path / name)
    files = ["report.json", "report.md", "report.csv", "spec.json", "raw/seed_0.json", "raw/seed_1.json"]
    same = [f for f in files if (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes()]
    record(10, len(same) == len(files), f"{len(same)}/{len(files)} output files byte-identical across two runs")
