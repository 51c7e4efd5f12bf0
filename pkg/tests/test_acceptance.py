"""The ten acceptance criteria, one test each.

Every test records a PASS/FAIL line that the conftest terminal-summary hook
prints at the end of the session.
"""

import json
import math
import time

import numpy as np
import pytest
import torch
import yaml

from conftest import ACCEPTANCE_RESULTS, make_record, random_records
from gadetect.dataset import AreaCategory, Centrality, Task, derive_labels
from gadetect.error_analysis import ErrorTable, fn_by_area, fn_by_centrality, monotonicity_check
from gadetect.experiment import load_config, run_crossval
from gadetect.folds import assign_folds, rotation_schedule, split_items
from gadetect.metrics import ConfusionCounts, aggregate_folds, binary_metrics, confusion, kappa_from_counts, roc_auc
from gadetect.model import ModelConfig, build_model
from gadetect.preprocess import PreprocessConfig, color_normalize, preprocess
from gadetect.saliency import input_gradient
from gadetect.synth import generate_dataset
from test_metrics import definitional_kappa, pair_auc
from test_preprocess import dense_blur
from test_saliency import finite_difference_gradient

E2E_MINUTES = 15.0


def record(n, ok, detail=""):
    ACCEPTANCE_RESULTS[n] = (bool(ok), detail)
    assert ok, detail


# 1 -------------------------------------------------------------------------


def test_c01_metric_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst_auc, worst_kappa, done = 0.0, 0.0, 0
    while done < 1000:
        n = int(rng.integers(2, 201))
        y = rng.random(n) < rng.uniform(0.05, 0.95)
        if y.all() or not y.any():
            continue
        # coarse grid of scores so ties are common
        s = np.round(rng.random(n) * rng.integers(2, 30)) / 10
        worst_auc = max(worst_auc, abs(roc_auc(s, y).auc - pair_auc(s, y)))
        a = s >= np.median(s)
        k = kappa_from_counts(confusion(a.astype(float), y))
        if k is not None:
            worst_kappa = max(worst_kappa, abs(k - definitional_kappa(a, y)))
        done += 1
    elapsed = time.perf_counter() - t0
    ok = worst_auc <= 1e-9 and worst_kappa <= 1e-9 and elapsed < 30
    record(1, ok, f"max |AUC diff| {worst_auc:.2e}, max |kappa diff| {worst_kappa:.2e}, {elapsed:.1f}s")


# 2 -------------------------------------------------------------------------


def test_c02_hand_values():
    m = binary_metrics(ConfusionCounts(tp=40, fp=20, tn=30, fn=10))
    got = (m.accuracy, m.sensitivity, m.specificity, round(m.precision, 3), round(m.kappa, 12))
    record(2, got == (0.7, 0.8, 0.6, 0.667, 0.4), f"acc/sens/spec/prec/kappa = {got}")


# 3 -------------------------------------------------------------------------


def test_c03_no_participant_leakage():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    violations = 0
    for m in range(500):
        n_part = int(rng.integers(5, 301))
        items = [(f"P{p}", j) for p in range(n_part) for j in range(int(rng.integers(1, 11)))]
        order = rng.permutation(len(items))
        items = [items[i] for i in order]
        a = assign_folds([pid for pid, _ in items], 5, seed=m)
        sizes = a.fold_sizes()
        if max(sizes) - min(sizes) > 1:
            violations += 1
        for split in rotation_schedule(5):
            parts = [{pid for pid, _ in part} for part in split_items(items, a, split, participant=lambda it: it[0])]
            if parts[0] & parts[1] or parts[0] & parts[2] or parts[1] & parts[2]:
                violations += 1
            if sum(len(p) for p in parts) != n_part:
                violations += 1
    elapsed = time.perf_counter() - t0
    record(3, violations == 0 and elapsed < 60, f"{violations} violations over 500 manifests, {elapsed:.1f}s")


# 4 -------------------------------------------------------------------------

AREA_COUNTS = [275, 38, 125, 192, 297, 403, 1255]
AREA_FN = [173, 30, 76, 90, 79, 95, 248]
AREA_RATES = ["62.9", "78.9", "60.8", "46.9", "26.6", "23.6", "19.8"]
CENTRAL_COUNTS = [1297, 158]
CENTRAL_FN = [279, 50]


def test_c04_table_reproduction(tmp_path):
    records, preds = [], []
    for cat, total, fn in zip(AreaCategory, AREA_COUNTS, AREA_FN):
        for i in range(total):
            records.append(make_record(pid=f"A{cat.value}_{i}", ga=True, area=cat))
            preds.append(i >= fn)
    area = ErrorTable.read_csv(fn_by_area(preds, records).write_csv(tmp_path / "a.csv"), "area")
    records, preds = [], []
    for cen, total, fn in zip((Centrality.DEFINITE_CENTER_POINT, Centrality.QUESTIONABLE_CP_DEFINITE_SUBFIELD),
                              CENTRAL_COUNTS, CENTRAL_FN):
        for i in range(total):
            records.append(make_record(pid=f"C{cen.name}{i}", ga=True, centrality=cen))
            preds.append(i >= fn)
    central = fn_by_centrality(preds, records)
    got_area = [str(r.rate_percent) for r in area.rows]
    got_central = [str(r.rate_percent) for r in central.rows]
    ok = got_area == AREA_RATES and got_central == ["21.5", "31.6"]
    record(4, ok, f"area {got_area}, centrality {got_central}")


# 5 -------------------------------------------------------------------------


def test_c05_fold_aggregation():
    aucs = [0.933, 0.952, 0.962, 0.964, 0.976]
    est = aggregate_folds(aucs)
    sd = math.sqrt(sum((a - 0.9574) ** 2 for a in aucs) / 4)
    half = 2.7764451051977987 * sd / math.sqrt(5)  # t(0.975, df=4)
    same = aggregate_folds([0.95] * 5)
    ok = (
        abs(est.point - 0.9574) < 1e-12
        and abs(est.ci_low - (0.9574 - half)) < 1e-9
        and abs(est.ci_high - (0.9574 + half)) < 1e-9
        and same.ci_low == same.ci_high == same.point
    )
    record(5, ok, f"mean {est.point:.4f}, 95% CI ({est.ci_low:.4f}, {est.ci_high:.4f}); constant input width "
                  f"{same.ci_high - same.ci_low}")


# 6 -------------------------------------------------------------------------


def test_c06_preprocessing():
    rng = np.random.default_rng(6)
    img = rng.integers(0, 256, (300, 400, 3)).astype(np.uint8)
    cfg = PreprocessConfig(target_size=128)
    stable = preprocess(img, cfg).tobytes() == preprocess(img.copy(), cfg).tobytes()
    const = preprocess(np.full((50, 70, 3), 31, np.uint8), PreprocessConfig(target_size=40))
    const_ok = bool(np.all(const == 128))
    small = rng.integers(0, 256, (8, 8, 3)).astype(np.uint8)
    c8 = PreprocessConfig(target_size=8)
    oracle = np.clip(4 * (small - dense_blur(small, c8.sigma)) + 128, 0, 255)
    err = float(np.max(np.abs(color_normalize(small, c8) - oracle)))
    record(6, stable and const_ok and err <= 1.0, f"byte-stable {stable}, constant->128 {const_ok}, 8x8 max err {err:.3f}")


# 7 -------------------------------------------------------------------------


def test_c07_saliency_gradient_check():
    rng = np.random.default_rng(7)
    model = build_model(ModelConfig(input_size=16), seed=7).double()
    model.train()
    with torch.no_grad():
        model(torch.from_numpy(rng.uniform(0, 255, (16, 3, 16, 16))))
    model.eval()
    errs = []
    for _ in range(10):
        image = rng.integers(0, 256, (16, 16, 3)).astype(np.uint8)
        g = input_gradient(model, image, dtype=torch.float64)
        fd = finite_difference_gradient(model, image)
        errs.append(float(np.linalg.norm(g - fd) / np.linalg.norm(g)))
    record(7, max(errs) < 1e-3, f"max relative error {max(errs):.2e} over 10 images")


# 8, 9 ----------------------------------------------------------------------


@pytest.fixture(scope="session")
def e2e_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("e2e")
    t0 = time.perf_counter()
    manifest = generate_dataset(2000, 0.25, 0.5, seed=0, out_dir=root / "data", image_size=128)
    cfg_path = root / "config.yaml"
    cfg_path.write_text(yaml.safe_dump({"training": {"max_epochs": 25, "patience_epochs": 5}}))
    cfg = load_config(cfg_path, {"task": "ga", "profile": "tiny", "seed": 0, "manifest": str(manifest),
                                 "out": str(root / "exp")})
    out = run_crossval(cfg)
    minutes = (time.perf_counter() - t0) / 60
    return out, minutes


def test_c08_synthetic_end_to_end(e2e_run):
    out, minutes = e2e_run
    agg = json.loads((out / "report" / "aggregate.json").read_text())
    runs = sorted(p.name for p in out.glob("run_*"))
    cfg = yaml.safe_load((out / "config.yaml").read_text())
    settings = cfg["training"]["learning_rate"] == 1e-4 and cfg["training"]["batch_size"] == 32
    ok = agg["mean_auc"] >= 0.90 and minutes <= E2E_MINUTES and len(runs) == 5 and settings
    per_fold = ", ".join("NOT_DEFINED" if a is None else f"{a:.3f}" for a in agg["per_fold_auc"])
    record(8, ok, f"mean AUC {agg['mean_auc']:.3f} (folds {per_fold}), {minutes:.1f} min wall time")


def test_c09_dose_response(e2e_run):
    out, _ = e2e_run
    table = ErrorTable.read_csv(out / "report" / "errors_area.csv", "area")
    res = monotonicity_check(table)
    rates = ", ".join(f"{r.category}={r.rate_percent if r.rate_percent is not None else 'NOT_DEFINED'}"
                      for r in table.rows)
    detail = rates if res.ok else f"first increase at {res.category}; {rates}"
    record(9, res.ok, detail)


# 10 ------------------------------------------------------------------------


def test_c10_label_hierarchy():
    rng = np.random.default_rng(10)
    bad = 0
    for _ in range(100):
        records = random_records(rng, int(rng.integers(1, 40)), 6)
        for include_q in (True, False):
            ga = derive_labels(records, Task.GA, include_q)
            cga = derive_labels(records, Task.CGA, include_q)
            cen = derive_labels(records, Task.CENTRALITY, include_q)
            ga_pos = {r.key for r, y in ga.items if y}
            cga_pos = {r.key for r, y in cga.items if y}
            if not cga_pos <= ga_pos:
                bad += 1
            if [r.key for r in cen.records] != [r.key for r, y in ga.items if y]:
                bad += 1
    record(10, bad == 0, f"{bad} violations over 100 manifests")
