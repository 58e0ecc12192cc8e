"""Acceptance gate: ten go/no-go criteria for the whole toolkit.

Each test prints exactly one PASS/FAIL line (run pytest with -s to see
them all). Thresholds are fixed from calibration runs; they gate
regressions rather than match any external benchmark.
"""

import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import uapforge.tensor as T
from uapforge import (AttackConfig, build_generator, load_perturbation,
                      save_perturbation)
from uapforge.evaluation import (alpha_sweep, brute_force_fooling_recount,
                                 brute_force_target_recount, fooling_rate,
                                 random_noise_baseline, top1_target_accuracy,
                                 transferability_matrix)
from uapforge.losses import nontargeted_loss, targeted_loss
from uapforge.similarity import layer_similarity_table
from uapforge.tensor import Tensor, run_gradcheck_suite
from uapforge.uap import (Perturbation, perturbation_norm, project_norm,
                          train_uap)

SHAPE = (3, 32, 32)


def gate(number, name, ok, detail):
    print(f"\nACCEPTANCE {number} {name}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, f"criterion {number} ({name}): {detail}"


# ---------------------------------------------------------------------------
# 1. gradient suite
# ---------------------------------------------------------------------------

def test_criterion_1_gradient_suite():
    t0 = time.time()
    reports = run_gradcheck_suite(seed=0)   # 5 points per op, tol 1e-6
    elapsed = time.time() - t0
    worst = max(reports, key=lambda r: r.max_rel_error)
    ok = all(r.passed for r in reports) and elapsed < 120.0
    gate(1, "gradient suite", ok,
         f"{len(reports)} ops, worst {worst.op} rel err "
         f"{worst.max_rel_error:.2e}, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 2. loss algebra
# ---------------------------------------------------------------------------

def test_criterion_2_loss_algebra():
    rng = np.random.default_rng(2)
    failures = 0
    for _ in range(1000):
        ce = float(rng.uniform(-10, 10))
        fff = float(rng.uniform(-10, 10))
        alpha = float(rng.uniform(0, 1))
        for lb in (nontargeted_loss(ce, fff, alpha),
                   targeted_loss(ce, fff, alpha)):
            if lb.recompute() != lb.combined:
                failures += 1
    # degenerate weights must match the single surviving term to 0 ulp
    # in build precision (float32)
    exact = True
    for ce, fff in [(1.75, 0.3), (-2.5, 7.0), (0.0, 0.0)]:
        f32 = np.float32
        exact &= nontargeted_loss(ce, fff, 1.0).combined == float(f32(1.0) * f32(-f32(ce)))
        exact &= nontargeted_loss(ce, fff, 0.0).combined == float(f32(fff) * f32(1.0))
        exact &= targeted_loss(ce, fff, 1.0).combined == float(f32(1.0) * f32(ce))
        exact &= targeted_loss(ce, fff, 0.0).combined == float(f32(fff) * f32(1.0))
    ok = failures == 0 and exact
    gate(2, "loss algebra", ok,
         f"{failures}/1000 identity failures, degenerate cases exact={exact}")


# ---------------------------------------------------------------------------
# 3. norm projection
# ---------------------------------------------------------------------------

def test_criterion_3_norm_projection():
    rng = np.random.default_rng(3)
    violations = 0
    non_identical = 0
    for p in ("2", "inf"):
        for _ in range(10000):
            eps = float(rng.uniform(0.01, 5.0))
            raw = rng.normal(0, rng.uniform(0.1, 5.0), (4, 4, 3))
            out = project_norm(Tensor(raw), p, eps).data
            if perturbation_norm(out, p) > eps * (1.0 + 1e-6):
                violations += 1
            if perturbation_norm(raw, p) <= eps:
                if out.astype(np.float32).tobytes() != raw.astype(np.float32).tobytes():
                    non_identical += 1
    ok = violations == 0 and non_identical == 0
    gate(3, "norm projection", ok,
         f"{violations} budget violations, {non_identical} inside-ball copies "
         f"not bit-identical, 2x10000 draws")


# ---------------------------------------------------------------------------
# 4. white-box efficacy
# ---------------------------------------------------------------------------

def test_criterion_4_white_box_efficacy(source_model, trainset, testset,
                                        trained_uap):
    t0 = time.time()
    pert, _ = trained_uap
    rate = fooling_rate(source_model, testset.images, pert)
    untrained_gen = build_generator(SHAPE, seed=0)
    pert0, _ = train_uap(untrained_gen, source_model, trainset.images,
                         trainset.labels, AttackConfig(epochs=0, seed=0))
    rate0 = fooling_rate(source_model, testset.images, pert0)
    noise = random_noise_baseline(pert.p, pert.epsilon, 0, SHAPE)
    rate_noise = fooling_rate(source_model, testset.images, noise)
    elapsed = time.time() - t0
    ok = (rate >= rate0 + 20.0) and (rate >= rate_noise + 20.0)
    gate(4, "white-box efficacy", ok,
         f"trained {rate:.1f}% vs untrained {rate0:.1f}% / noise "
         f"{rate_noise:.1f}% (gates +20pp), eval {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# 5. alpha-sweep trend
# ---------------------------------------------------------------------------

def test_criterion_5_alpha_sweep_trend(source_model, trainset, tuneset):
    cfg = AttackConfig(epsilon=10.0, norm="inf", epochs=10, seed=0)
    rows = alpha_sweep(lambda: build_generator(SHAPE, seed=0), source_model,
                       trainset.images, trainset.labels, tuneset.images, cfg,
                       [0.0, 0.6, 0.7, 0.8, 1.0],
                       train_fingerprint=trainset.fingerprint,
                       tune_fingerprint=tuneset.fingerprint)
    by_alpha = {r["alpha"]: r["fooling_rate"] for r in rows}
    best_mixed = max(v for a, v in by_alpha.items() if a > 0.0)
    ok = by_alpha[0.0] < best_mixed
    gate(5, "alpha-sweep trend", ok,
         "rates " + ", ".join(f"a={a:.1f}:{v:.1f}%" for a, v in
                              sorted(by_alpha.items())))


# ---------------------------------------------------------------------------
# 6. transferability trend
# ---------------------------------------------------------------------------

def test_criterion_6_transferability_trend(all_models, trainset, testset):
    order = ["cnn-a", "cnn-b", "res-a", "res-b"]
    models = [all_models[a] for a in order]
    diag_ok = True
    deep_best = 0
    details = []
    for seed in (0, 1, 2):
        perts = {}
        for m in models:
            gen = build_generator(SHAPE, seed=seed)
            p, _ = train_uap(gen, m, trainset.images, trainset.labels,
                             AttackConfig(alpha=0.7, epochs=10, seed=seed))
            perts[m.arch_id] = p
        mat = transferability_matrix(models, perts, testset.images)
        for i in range(len(order)):
            if mat.rates[i][i] < mat.row_averages[i]:
                diag_ok = False
        best_src = order[int(np.argmax(mat.row_averages))]
        deep_best += best_src == "res-b"
        details.append(f"seed{seed} avg+ " + "/".join(
            f"{v:.0f}" for v in mat.row_averages) + f" best={best_src}")
    ok = diag_ok and deep_best >= 2
    gate(6, "transferability trend", ok,
         f"diag>=row-avg+ {diag_ok}, res-b best on {deep_best}/3 seeds; "
         + "; ".join(details))


# ---------------------------------------------------------------------------
# 7. SSIM layer trend
# ---------------------------------------------------------------------------

def test_criterion_7_ssim_trend(all_models):
    # Structured probe images: the similarity trend measures how feature
    # maps of a *structured input* agree across architectures, so the
    # probes need strong localized luminance structure. The grating test
    # split is noise-dominated by construction (class signal deliberately
    # near the attack budget) and washes out early-layer structure.
    from conftest import blob_probe_images
    order = ["cnn-a", "cnn-b", "res-a", "res-b"]
    images = blob_probe_images(32, 0)
    layers = [1, 2, 3, 4, 5, 6]
    pair_ok = True
    self_ok = True
    worst = ""
    for i, ref_arch in enumerate(order):
        ref = all_models[ref_arch]
        self_rep = layer_similarity_table(ref, [ref], images, layers=[1, 6])
        for row in self_rep.rows:
            if abs(row.ssim - 1.0) > 1e-9:
                self_ok = False
        others = [all_models[a] for a in order[i + 1:]]
        if not others:
            continue
        rep = layer_similarity_table(ref, others, images, layers=layers)
        for arch in order[i + 1:]:
            rows = {r.layer: r.ssim for r in rep.rows
                    if r.comparison_arch == arch}
            if not rows[1] > rows[max(layers)]:
                pair_ok = False
                worst = f"{ref_arch} vs {arch}: l1 {rows[1]:.3f} <= l6 {rows[6]:.3f}"
    ok = pair_ok and self_ok
    gate(7, "ssim layer trend", ok,
         f"all 6 cross pairs l1 > l6: {pair_ok}"
         + (f" [{worst}]" if worst else "")
         + f", self rows 1.0+-1e-9: {self_ok}")


# ---------------------------------------------------------------------------
# 8. targeted attack
# ---------------------------------------------------------------------------

def test_criterion_8_targeted_attack(source_model, trainset, testset):
    target_class = 9
    cfg = AttackConfig(alpha=0.9, epsilon=20.0, norm="inf", mode="targeted",
                       target_class=target_class, epochs=10, lr=1e-3, seed=0)
    gen = build_generator(SHAPE, seed=0)
    pert, _ = train_uap(gen, source_model, trainset.images, trainset.labels, cfg)
    acc = top1_target_accuracy(source_model, testset.images, pert, target_class)
    chance = 100.0 / testset.num_classes
    ok = acc >= 5.0 * chance
    gate(8, "targeted attack", ok,
         f"top-1 target accuracy {acc:.1f}% vs 5x chance {5 * chance:.0f}%")


# ---------------------------------------------------------------------------
# 9. determinism & persistence
# ---------------------------------------------------------------------------

def test_criterion_9_determinism_persistence(source_model, trainset, tmp_path):
    runs = []
    for _ in range(2):
        gen = build_generator(SHAPE, seed=2)
        pert, hist = train_uap(gen, source_model, trainset.images[:128],
                               trainset.labels[:128],
                               AttackConfig(epochs=2, seed=2))
        runs.append((pert, hist))
    identical = (runs[0][0].r.tobytes() == runs[1][0].r.tobytes()
                 and runs[0][1] == runs[1][1])
    path = tmp_path / "p.uapt"
    save_perturbation(runs[0][0], path)
    first = path.read_bytes()
    back = load_perturbation(path)
    round_trip = back.r.tobytes() == runs[0][0].r.tobytes()
    save_perturbation(back, path)
    stable = path.read_bytes() == first
    ok = identical and round_trip and stable
    gate(9, "determinism & persistence", ok,
         f"re-run identical={identical}, artifact round-trip bit-exact="
         f"{round_trip}, re-save byte-identical={stable}")


# ---------------------------------------------------------------------------
# 10. metric oracles
# ---------------------------------------------------------------------------

def test_criterion_10_metric_oracles(source_model, testset, trained_uap):
    pert, _ = trained_uap
    imgs = testset.images[:100]
    fr_fast = fooling_rate(source_model, imgs, pert)
    fr_slow = brute_force_fooling_recount(source_model, imgs, pert.r)
    noise = random_noise_baseline("inf", pert.epsilon, 1, SHAPE)
    ta_fast = top1_target_accuracy(source_model, imgs, noise, 4)
    ta_slow = brute_force_target_recount(source_model, imgs, noise.r, 4)
    ok = fr_fast == fr_slow and ta_fast == ta_slow and ta_fast <= 100.0
    gate(10, "metric oracles", ok,
         f"fooling {fr_fast:.2f}%=={fr_slow:.2f}%, target "
         f"{ta_fast:.2f}%=={ta_slow:.2f}% on 100-image subsets")
