"""Acceptance criteria, each run at its stated tolerance.

Every test records a PASS/FAIL line that the terminal summary prints under
"acceptance criteria".  Two criteria cannot be met by the method as
specified; they still run unchanged and are marked ``xfail`` with the
measured shortfall (see README, "Known shortfalls").
"""
import json
import math
import re
import shutil
import time
from importlib import resources

import numpy as np
import pytest

from cellcount.augment import AUGMENT_LOG, augment_missing_counts, load_formula_fixtures, pools_for_round
from cellcount.ensemble import PredictionRecord, Source, fit_belief_model
from cellcount.harness import Arm, ScenarioConfig, mae, result_to_dict, rmse, run_scenario
from cellcount.imaging import average_intensity, pixelwise_max, read_pgm
from cellcount.predictors import _with_bias, ce_loss_and_grad, train_regressor
from cellcount.synth import DEFAULT_COUNT_GRID, GROUPS, delete_counts, read_manifest

from conftest import record_criterion


def loop_max(images):
    h, w = images[0].shape
    out = np.zeros((h, w), dtype=np.uint8)
    for i in range(h):
        for j in range(w):
            best = 0
            for im in images:
                if im[i, j] > best:
                    best = im[i, j]
            out[i, j] = best
    return out


def test_criterion_01_overlay_oracle():
    rng = np.random.default_rng(0)
    tuples = []
    for _ in range(100):
        h, w = rng.integers(1, 65, 2)
        k = int(rng.integers(1, 6))
        tuples.append([rng.integers(0, 256, (h, w), dtype=np.uint8) for _ in range(k)])
    start = time.perf_counter()
    outputs = [pixelwise_max(t) for t in tuples]
    elapsed = time.perf_counter() - start
    mismatches = sum(not np.array_equal(o, loop_max(t)) for o, t in zip(outputs, tuples))
    ok = mismatches == 0 and elapsed < 1.0
    record_criterion(1, "", ok, f"{mismatches}/100 mismatches, {elapsed * 1e3:.1f} ms")
    assert mismatches == 0
    assert elapsed < 1.0


TERM = re.compile(r"^\s*(\d+)\s*x\s*\(\s*(\d+)\s*\)\s*$")


def test_criterion_02_fixture_integrity():
    failures, rows = [], 0
    for which in ("exp2", "exp3"):
        text = resources.files("cellcount.data").joinpath(f"formulae_{which}.txt").read_text()
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            rows += 1
            lhs, rhs = line.split("=")
            terms = [TERM.match(t) for t in rhs.split("+")]
            if not all(terms):
                failures.append(line)
                continue
            bases = [int(t.group(1)) for t in terms]
            total = sum(int(t.group(1)) * int(t.group(2)) for t in terms)
            if len(set(bases)) != len(bases) or total != int(lhs):
                failures.append(line)
        # the package loader must accept every row too
        loaded = sum(len(p.formulae) for p in load_formula_fixtures(which).values())
        assert loaded == sum(
            1 for ln in text.splitlines() if ln.strip() and not ln.strip().startswith("#")
        )
    example = load_formula_fixtures("exp2")[(1, 14)]
    has_example = any(f.terms == ((5, 2), (1, 4)) for f in example.formulae)
    record_criterion(2, "", not failures and has_example, f"{rows} rows, {len(failures)} failures")
    assert not failures
    assert has_example


def test_criterion_03_da_label_closure(experiment_dataset):
    deleted = {14, 35, 57, 66, 83}
    manifest = delete_counts(read_manifest(experiment_dataset), deleted)
    pools = pools_for_round(load_formula_fixtures("exp2"), 1)
    subdir = "acceptance_da"
    shutil.rmtree(experiment_dataset / subdir, ignore_errors=True)
    out = augment_missing_counts(manifest, pools, 6, 0, out_subdir=subdir)
    closed = out.train_labels() == set(DEFAULT_COUNT_GRID)
    rows = (experiment_dataset / subdir / AUGMENT_LOG).read_text().splitlines()[1:]
    rng = np.random.default_rng(0)
    bad = 0
    for k in rng.choice(len(rows), 20, replace=False):
        path, _, donors = rows[k].split(",")
        expected = loop_max([read_pgm(experiment_dataset / d) for d in donors.split(";")])
        bad += not np.array_equal(read_pgm(experiment_dataset / path), expected)
    record_criterion(3, "", closed and bad == 0,
                     f"train labels == grid: {closed}; {bad}/20 spot checks differ ({len(rows)} synthetic images)")
    assert closed
    assert bad == 0


def test_criterion_04_metric_exactness():
    rng = np.random.default_rng(0)
    truth = rng.integers(1, 101, 1000)
    pred = rng.integers(-10, 111, 1000)
    recs = [PredictionRecord(int(t), int(p), Source.CLASSIFIER) for t, p in zip(truth, pred)]
    sq = ab = 0.0
    for t, p in zip(truth, pred):
        sq += float(t - p) ** 2
    for t, p in zip(truth, pred):
        ab += abs(float(t - p))
    err = max(abs(rmse(recs) - math.sqrt(sq / 1000)), abs(mae(recs) - ab / 1000))
    pair = [PredictionRecord(10, 7, Source.CLASSIFIER), PredictionRecord(10, 14, Source.CLASSIFIER)]
    exact = rmse(pair) == math.sqrt(12.5) and mae(pair) == 3.5
    record_criterion(4, "", err <= 1e-12 and exact, f"max oracle deviation {err:.1e}; {{3,4}} exact: {exact}")
    assert err <= 1e-12
    assert exact


def test_criterion_05_gradient_check():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(10):
        k = int(rng.integers(2, 6))
        n = int(rng.integers(2, 21))
        Xb = _with_bias(rng.normal(size=(n, 4)))
        y = rng.integers(0, k, n)
        W = rng.normal(size=(k, 5))
        _, grad = ce_loss_and_grad(W, Xb, y, 1e-2)
        num = np.zeros_like(W)
        for idx in np.ndindex(W.shape):
            e = np.zeros_like(W)
            e[idx] = 1e-5
            num[idx] = (ce_loss_and_grad(W + e, Xb, y, 1e-2)[0] - ce_loss_and_grad(W - e, Xb, y, 1e-2)[0]) / 2e-5
        worst = max(worst, np.linalg.norm(grad - num) / np.linalg.norm(num))
    record_criterion(5, "", worst <= 1e-6, f"worst relative error {worst:.1e}")
    assert worst <= 1e-6


def test_criterion_06_ridge_exactness():
    rng = np.random.default_rng(0)
    worst_ne = worst_gd = 0.0
    for _ in range(3):
        X = rng.normal(size=(40, 33)) * rng.uniform(0.5, 5, 33)
        y = X @ rng.normal(size=33) + rng.normal(size=40)
        lam = 0.1
        model = train_regressor(X, y, lam)
        Z = model.standardizer.transform(X)
        rhs = Z.T @ (y - y.mean())
        worst_ne = max(worst_ne, np.linalg.norm((Z.T @ Z + lam * np.eye(33)) @ model.weights[:-1] - rhs)
                       / np.linalg.norm(rhs))
        # independent oracle: plain gradient descent on the same objective
        Zo = (X - X.mean(axis=0)) / X.std(axis=0)
        A = np.hstack([Zo, np.ones((40, 1))])
        pen = np.r_[np.full(33, lam), 0.0]
        step = 1.0 / (2 * (np.linalg.eigvalsh(A.T @ A).max() + lam))
        w = np.zeros(34)
        for _ in range(500_000):
            g = 2 * (A.T @ (A @ w - y)) + 2 * pen * w
            w -= step * g
            if np.linalg.norm(g) < 1e-12:
                break
        worst_gd = max(worst_gd, np.abs(w - model.weights).max())
    ok = worst_ne <= 1e-8 and worst_gd <= 1e-6
    record_criterion(6, "", ok, f"normal-equation residual {worst_ne:.1e}, GD oracle gap {worst_gd:.1e}")
    assert worst_ne <= 1e-8
    assert worst_gd <= 1e-6


@pytest.mark.xfail(
    strict=True,
    reason="min/max intensity envelopes fitted on 3 training images per count cover "
    "~60% of held-out images; 90% needs roughly 15+ per count",
)
def test_criterion_07_belief_coverage(default_dataset):
    start = time.perf_counter()
    manifest = read_manifest(default_dataset)
    per_group, inside_all = [], []
    for group in GROUPS:
        train = [r for r in manifest.train() if r.group == group]
        test = [r for r in manifest.test() if r.group == group]
        intensity = {r.image_path: average_intensity(read_pgm(manifest.path_of(r))) for r in train + test}
        model = fit_belief_model([intensity[r.image_path] for r in train], [r.count for r in train], *group)
        inside = []
        for r in test:
            lo, hi = model.interval_at(intensity[r.image_path])
            inside.append(lo <= r.count <= hi)
        per_group.append(f"{group[0].value}/{group[1]} {np.mean(inside):.0%}")
        inside_all += inside
    elapsed = time.perf_counter() - start
    coverage = float(np.mean(inside_all))
    ok = coverage >= 0.90 and elapsed < 10
    record_criterion(7, "", ok, f"coverage {coverage:.1%} (need >= 90%; {', '.join(per_group)}), {elapsed:.1f} s")
    assert elapsed < 10
    assert coverage >= 0.90


@pytest.fixture(scope="module")
def exp2_result(experiment_dataset):
    start = time.perf_counter()
    result = run_scenario(ScenarioConfig("exp2"), experiment_dataset)
    return result, time.perf_counter() - start


@pytest.fixture(scope="module")
def exp3_result(experiment_dataset):
    start = time.perf_counter()
    result = run_scenario(ScenarioConfig("exp3"), experiment_dataset)
    return result, time.perf_counter() - start


def test_criterion_08_decision_soundness(exp2_result):
    result, _ = exp2_result
    checked = violations = 0
    for rd in result.rounds:
        for arm in (Arm.ENSEMBLE, Arm.DA_ENSEMBLE):
            for p in rd.predictions[arm]:
                lo, hi = p.interval
                checked += 1
                violations += (p.source is Source.CLASSIFIER) != (lo <= p.classifier_count <= hi)
    record_criterion(8, "", violations == 0, f"{violations} violations in {checked} ensemble predictions")
    assert checked > 0
    assert violations == 0


def test_criterion_09_exp1_trend(default_dataset):
    start = time.perf_counter()
    result = run_scenario(ScenarioConfig("exp1"), default_dataset)
    elapsed = time.perf_counter() - start
    ce, mse = result.mean_mae(Arm.CE), result.mean_mae(Arm.MSE)
    record_criterion(9, "", ce < mse and elapsed < 120, f"MAE CE {ce:.3f} < MSE {mse:.3f}, {elapsed:.1f} s")
    assert ce < mse
    assert elapsed < 120


def _ordering(result):
    r = {arm: result.mean_rmse(arm) for arm in (Arm.CE, Arm.DA, Arm.ENSEMBLE, Arm.DA_ENSEMBLE)}
    checks = {
        "DA+Ens <= DA": r[Arm.DA_ENSEMBLE] <= r[Arm.DA],
        "DA+Ens <= Ens": r[Arm.DA_ENSEMBLE] <= r[Arm.ENSEMBLE],
        "Ens <= CE": r[Arm.ENSEMBLE] <= r[Arm.CE],
    }
    text = (f"RMSE CE {r[Arm.CE]:.4f}, DA {r[Arm.DA]:.4f}, Ens {r[Arm.ENSEMBLE]:.4f}, "
            f"DA+Ens {r[Arm.DA_ENSEMBLE]:.4f}")
    failed = [k for k, v in checks.items() if not v]
    if failed:
        text += " (violated: " + ", ".join(failed) + ")"
    return not failed, text


@pytest.mark.xfail(
    strict=False,
    reason="max-overlay images lose blur-halo mass, so DA pulls in-interval classifier "
    "answers toward synthetic counts; DA+Ensemble trails Ensemble by ~0.0004 RMSE",
)
def test_criterion_10_exp2_ordering(exp2_result):
    result, elapsed = exp2_result
    ok, text = _ordering(result)
    record_criterion(10, "exp2", ok, f"{text}, {elapsed:.0f} s")
    assert ok


def test_criterion_10_exp3_ordering(exp3_result, exp2_result):
    result, elapsed = exp3_result
    ok, text = _ordering(result)
    total = elapsed + exp2_result[1]
    record_criterion(10, "exp3", ok and total < 600, f"{text}, {elapsed:.0f} s (exp2+exp3 {total:.0f} s)")
    assert ok
    assert total < 600


def test_criterion_11_exp4_trend(experiment_dataset):
    result = run_scenario(ScenarioConfig("exp4"), experiment_dataset)
    ens, ce = result.mean_rmse(Arm.ENSEMBLE), result.mean_rmse(Arm.CE)
    record_criterion(11, "", ens <= ce, f"RMSE Ens {ens:.3f} <= CE {ce:.3f} over {len(result.rounds)} seeds")
    assert len(result.rounds) == 3
    assert ens <= ce


def test_criterion_12_determinism(exp2_result, experiment_dataset):
    first = result_to_dict(exp2_result[0])
    second = result_to_dict(run_scenario(ScenarioConfig("exp2"), experiment_dataset))
    assert first["timestamp"] and second["timestamp"]
    first.pop("timestamp")
    second.pop("timestamp")
    same = json.dumps(first, sort_keys=True) == json.dumps(second, sort_keys=True)
    record_criterion(12, "", same, "exp2 reports identical modulo timestamp" if same else "reports differ")
    assert same
