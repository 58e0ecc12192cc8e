"""Metrics and reports: fooling rate, target accuracy, transfer matrix,
alpha sweep, baselines, and deterministic emission."""

import json

import numpy as np
import pytest

from uapforge.evaluation import (FoolingReport, TransferabilityMatrix,
                                 alpha_sweep, brute_force_fooling_recount,
                                 brute_force_target_recount, config_hash,
                                 emit_report, fooling_rate,
                                 random_noise_baseline, top1_target_accuracy,
                                 transferability_matrix)
from uapforge.uap import AttackConfig, Perturbation, epsilon_internal
from uapforge.tensor import ContractViolation

SHAPE = (3, 32, 32)


def noise_pert(seed=0, eps255=10.0):
    return random_noise_baseline("inf", epsilon_internal(eps255, "inf", SHAPE),
                                 seed, SHAPE)


# ---------------------------------------------------------------------------
# fooling rate / target accuracy
# ---------------------------------------------------------------------------

def test_fooling_rate_zero_for_zero_perturbation(small_model, testset):
    r = np.zeros(SHAPE, dtype=np.float32)
    assert fooling_rate(small_model, testset.images[:40], r) == 0.0


def test_fooling_rate_empty_dataset_rejected(small_model):
    with pytest.raises(ContractViolation):
        fooling_rate(small_model, np.zeros((0,) + SHAPE, dtype=np.float32),
                     np.zeros(SHAPE, dtype=np.float32))


def test_fooling_report_fields(small_model, testset):
    pert = noise_pert()
    report = fooling_rate(small_model, testset.images[:50], pert,
                          labels=testset.labels[:50])
    assert isinstance(report, FoolingReport)
    assert report.n_images == 50
    assert 0.0 <= report.fooling_rate <= 100.0
    assert report.perturbation_metadata["baseline"] is True


def test_fooling_rate_matches_brute_force(small_model, testset):
    pert = noise_pert(3)
    imgs = testset.images[:60]
    fast = fooling_rate(small_model, imgs, pert)
    slow = brute_force_fooling_recount(small_model, imgs, pert.r)
    assert fast == slow


def test_top1_target_accuracy_matches_brute_force(small_model, testset):
    pert = noise_pert(4)
    imgs = testset.images[:60]
    fast = top1_target_accuracy(small_model, imgs, pert, 5)
    slow = brute_force_target_recount(small_model, imgs, pert.r, 5)
    assert fast == slow
    assert 0.0 <= fast <= 100.0


def test_top1_target_class_range_checked(small_model, testset):
    with pytest.raises(ContractViolation):
        top1_target_accuracy(small_model, testset.images[:4], noise_pert(), 11)


# ---------------------------------------------------------------------------
# random-noise baseline
# ---------------------------------------------------------------------------

def test_noise_baseline_deterministic_and_bounded():
    a = noise_pert(7)
    b = noise_pert(7)
    c = noise_pert(8)
    assert np.array_equal(a.r, b.r)
    assert not np.array_equal(a.r, c.r)
    assert np.abs(a.r).max() <= a.epsilon * (1 + 1e-6)


def test_noise_baseline_rejects_bad_epsilon():
    with pytest.raises(ContractViolation):
        random_noise_baseline("inf", 0.0, 0, SHAPE)


# ---------------------------------------------------------------------------
# transfer matrix
# ---------------------------------------------------------------------------

def test_transfer_matrix_shape_and_row_averages(small_model, testset):
    eps = epsilon_internal(10.0, "inf", SHAPE)
    perts = {"cnn-a": random_noise_baseline("inf", eps, 0, SHAPE)}
    mat = transferability_matrix([small_model], perts, testset.images[:30])
    assert mat.archs == ["cnn-a"]
    assert len(mat.rates) == 1 and len(mat.rates[0]) == 1
    assert mat.row_averages == [0.0]   # no off-diagonal entries


def test_transfer_matrix_requires_matching_budgets(small_model, trainset,
                                                   testset):
    from tests.conftest import train_frozen
    other = train_frozen("cnn-b", trainset, epochs=1)
    eps = epsilon_internal(10.0, "inf", SHAPE)
    perts = {"cnn-a": random_noise_baseline("inf", eps, 0, SHAPE),
             "cnn-b": random_noise_baseline("inf", 2 * eps, 0, SHAPE)}
    with pytest.raises(ContractViolation):
        transferability_matrix([small_model, other], perts, testset.images[:10])


def test_transfer_matrix_missing_source_rejected(small_model, testset):
    with pytest.raises(ContractViolation):
        transferability_matrix([small_model], {}, testset.images[:10])


# ---------------------------------------------------------------------------
# alpha sweep
# ---------------------------------------------------------------------------

def test_alpha_sweep_rejects_overlapping_splits(small_model, trainset):
    from uapforge import build_generator
    cfg = AttackConfig(epochs=0)
    with pytest.raises(ContractViolation):
        alpha_sweep(lambda: build_generator(SHAPE, seed=0), small_model,
                    trainset.images[:32], trainset.labels[:32],
                    trainset.images[:8], cfg, [0.7])


def test_alpha_sweep_marks_single_best(small_model, trainset, tuneset):
    from uapforge import build_generator
    cfg = AttackConfig(epochs=1, seed=0)
    rows = alpha_sweep(lambda: build_generator(SHAPE, seed=0), small_model,
                       trainset.images[:64], trainset.labels[:64],
                       tuneset.images[:32], cfg, [0.0, 0.7])
    assert [r["alpha"] for r in rows] == [0.0, 0.7]
    assert sum(r["best"] for r in rows) == 1


# ---------------------------------------------------------------------------
# report emission
# ---------------------------------------------------------------------------

def sample_report():
    return FoolingReport(target_arch="cnn-a", perturbation_metadata={"seed": 0},
                         n_images=100, fooling_rate=40.0, clean_accuracy=90.25,
                         adversarial_accuracy=55.5, baseline_fooling_rate=4.5)


def test_emit_json_is_deterministic(tmp_path):
    p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
    emit_report(sample_report(), p1, "json")
    emit_report(sample_report(), p2, "json")
    assert p1.read_bytes() == p2.read_bytes()
    doc = json.loads(p1.read_text())
    assert doc["fooling_rate"] == "40.00"
    assert doc["clean_accuracy"] == "90.25"


def test_emit_csv_schema(tmp_path):
    path = tmp_path / "r.csv"
    emit_report(sample_report(), path, "csv")
    lines = path.read_text().splitlines()
    assert lines[0].startswith("target_arch,n_images,fooling_rate")
    assert lines[1].split(",")[2] == "40.00"


def test_emit_transfer_matrix_csv(tmp_path):
    mat = TransferabilityMatrix(archs=["a", "b"],
                                rates=[[90.0, 30.0], [25.0, 85.0]],
                                row_averages=[30.0, 25.0])
    path = tmp_path / "m.csv"
    emit_report(mat, path, "csv")
    lines = path.read_text().splitlines()
    assert lines[0] == "source_arch,a,b,avg_plus"
    assert lines[1] == "a,90.00,30.00,30.00"


def test_emit_rejects_unknown_format(tmp_path):
    with pytest.raises(ContractViolation):
        emit_report(sample_report(), tmp_path / "x.bin", "xml")


def test_report_validation_bounds():
    bad = sample_report()
    bad.fooling_rate = 140.0
    with pytest.raises(ContractViolation):
        bad.validate()


def test_config_hash_stable_and_order_independent():
    a = config_hash({"x": 1, "y": 2})
    b = config_hash({"y": 2, "x": 1})
    assert a == b and len(a) == 8
    assert a != config_hash({"x": 1, "y": 3})
