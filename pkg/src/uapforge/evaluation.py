"""Attack metrics: fooling rate, top-1 target accuracy, transferability
matrix, alpha sweep, random-noise baseline, and deterministic report
emission.

The fooling rate counts clean-prediction disagreement, T(x_adv) != T(x),
not ground-truth error.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .models import predict
from .tensor import ContractViolation
from .uap import (Perturbation, epsilon_internal, load_uap_and_attack,
                  perturbation_norm, project_norm, train_uap)
from .tensor import Tensor


@dataclass
class FoolingReport:
    target_arch: str
    perturbation_metadata: dict
    n_images: int
    fooling_rate: float
    clean_accuracy: float
    adversarial_accuracy: float
    baseline_fooling_rate: float | None = None

    def validate(self):
        for v in (self.fooling_rate, self.clean_accuracy, self.adversarial_accuracy):
            if not 0.0 <= v <= 100.0:
                raise ContractViolation(f"rate {v} outside [0, 100]")
        if self.n_images <= 0:
            raise ContractViolation("n_images must be positive")
        return self


@dataclass
class TransferabilityMatrix:
    archs: list
    rates: list                      # rows: source, cols: target, percentages
    row_averages: list = field(default_factory=list)  # off-diagonal means

    def diagonal(self):
        return [self.rates[i][i] for i in range(len(self.archs))]


def _adv_images(images, r):
    return np.clip(images + r[None], 0.0, 1.0).astype(images.dtype)


def fooling_rate(target, images, perturbation, labels=None, batch_size=256):
    """Percentage of images whose prediction changes under the
    perturbation; optionally also returns a full FoolingReport when
    ground-truth labels are supplied."""
    if len(images) == 0:
        raise ContractViolation("fooling_rate: empty dataset")
    r = perturbation.r if isinstance(perturbation, Perturbation) else np.asarray(perturbation)
    clean = predict(target, images, batch_size)
    adv = predict(target, _adv_images(images, r), batch_size)
    n = len(images)
    rate = 100.0 * int((clean != adv).sum()) / n
    if labels is None:
        return rate
    meta = perturbation.metadata if isinstance(perturbation, Perturbation) else {}
    return FoolingReport(
        target_arch=target.arch_id,
        perturbation_metadata=dict(meta),
        n_images=n,
        fooling_rate=rate,
        clean_accuracy=100.0 * int((clean == labels).sum()) / n,
        adversarial_accuracy=100.0 * int((adv == labels).sum()) / n,
    ).validate()


def top1_target_accuracy(target, images, perturbation, target_class, batch_size=256):
    """Fraction of perturbed images classified as the chosen class, as %."""
    if not 1 <= target_class <= target.num_classes:
        raise ContractViolation(
            f"target class {target_class} out of range 1..{target.num_classes}")
    adv = load_uap_and_attack(perturbation, target, images, batch_size)
    return 100.0 * int((adv == target_class).sum()) / len(images)


def random_noise_baseline(p, epsilon, seed, shape):
    """Uniform sign-symmetric noise projected onto the norm ball; the
    control condition against trained perturbations."""
    if epsilon <= 0:
        raise ContractViolation("random_noise_baseline: epsilon must be positive")
    rng = np.random.default_rng([0xBA5E, seed])
    raw = rng.uniform(-1.0, 1.0, shape).astype(np.float32)
    projected = project_norm(Tensor(raw), p, epsilon).data
    return Perturbation(r=projected.astype(np.float32), p=p, epsilon=epsilon,
                        metadata={"baseline": True, "seed": seed}).validate()


def transferability_matrix(models, perturbations, images, batch_size=256):
    """Fooling-rate matrix source x target plus per-row off-diagonal
    averages (the Avg+ column)."""
    archs = [m.arch_id for m in models]
    missing = [a for a in archs if a not in perturbations]
    if missing:
        raise ContractViolation(
            f"transferability_matrix: no perturbation for sources {missing}")
    ref = next(iter(perturbations.values()))
    for a in archs:
        pt = perturbations[a]
        if (pt.p, round(pt.epsilon, 12)) != (ref.p, round(ref.epsilon, 12)):
            raise ContractViolation(
                "transferability_matrix: perturbations must share epsilon and p")
    rates = []
    for src in archs:
        row = [fooling_rate(tgt_model, images, perturbations[src], batch_size=batch_size)
               for tgt_model in models]
        rates.append(row)
    row_avgs = []
    for i, row in enumerate(rates):
        off = [v for j, v in enumerate(row) if j != i]
        row_avgs.append(float(np.mean(off)) if off else 0.0)
    return TransferabilityMatrix(archs=archs, rates=rates, row_averages=row_avgs)


def alpha_sweep(build_generator_fn, source, train_images, train_labels,
                tune_images, config, alphas, train_fingerprint="",
                tune_fingerprint=""):
    """One UAP training run per alpha on identical seeds, evaluated on a
    held-out tuning split; returns rows (alpha, fooling rate) with the
    best row marked."""
    if train_fingerprint and train_fingerprint == tune_fingerprint:
        raise ContractViolation("alpha_sweep: training and tuning splits overlap")
    train_hashes = {hashlib.sha1(im.tobytes()).digest() for im in train_images}
    if any(hashlib.sha1(im.tobytes()).digest() in train_hashes for im in tune_images):
        raise ContractViolation("alpha_sweep: training and tuning splits overlap")
    rows = []
    for alpha in alphas:
        if not 0.0 <= alpha <= 1.0:
            raise ContractViolation(f"alpha must lie in [0,1], got {alpha}")
        cfg = type(config)(**{**config.__dict__, "alpha": alpha})
        gen = build_generator_fn()
        pert, _hist = train_uap(gen, source, train_images, train_labels, cfg,
                                dataset_fingerprint=train_fingerprint)
        rows.append({"alpha": alpha,
                     "fooling_rate": fooling_rate(source, tune_images, pert)})
    best = max(range(len(rows)), key=lambda i: rows[i]["fooling_rate"])
    for i, row in enumerate(rows):
        row["best"] = i == best
    return rows


def brute_force_fooling_recount(target, images, r):
    """Independent oracle: per-image prediction loop, no batching."""
    changed = 0
    for i in range(len(images)):
        c = predict(target, images[i:i + 1], batch_size=1)[0]
        a = predict(target, _adv_images(images[i:i + 1], r), batch_size=1)[0]
        changed += int(c != a)
    return 100.0 * changed / len(images)


def brute_force_target_recount(target, images, r, target_class):
    hits = 0
    for i in range(len(images)):
        a = predict(target, _adv_images(images[i:i + 1], r), batch_size=1)[0]
        hits += int(a == target_class)
    return 100.0 * hits / len(images)


# ---------------------------------------------------------------------------
# Deterministic report emission
# ---------------------------------------------------------------------------

def _fmt_pct(v):
    return f"{v:.2f}"


def _fmt_loss(v):
    return f"{v:.6f}"


def report_to_dict(report):
    if isinstance(report, FoolingReport):
        d = {
            "target_arch": report.target_arch,
            "n_images": report.n_images,
            "fooling_rate": _fmt_pct(report.fooling_rate),
            "clean_accuracy": _fmt_pct(report.clean_accuracy),
            "adversarial_accuracy": _fmt_pct(report.adversarial_accuracy),
            "perturbation_metadata": report.perturbation_metadata,
        }
        if report.baseline_fooling_rate is not None:
            d["baseline_fooling_rate"] = _fmt_pct(report.baseline_fooling_rate)
        return d
    if isinstance(report, TransferabilityMatrix):
        return {
            "archs": report.archs,
            "rates": [[_fmt_pct(v) for v in row] for row in report.rates],
            "row_averages": [_fmt_pct(v) for v in report.row_averages],
        }
    raise ContractViolation(f"unsupported report type {type(report).__name__}")


def report_to_csv_rows(report):
    """(header, rows) with the documented column schema per report type."""
    if isinstance(report, FoolingReport):
        header = ["target_arch", "n_images", "fooling_rate", "clean_accuracy",
                  "adversarial_accuracy", "baseline_fooling_rate"]
        base = "" if report.baseline_fooling_rate is None else _fmt_pct(
            report.baseline_fooling_rate)
        return header, [[report.target_arch, str(report.n_images),
                         _fmt_pct(report.fooling_rate),
                         _fmt_pct(report.clean_accuracy),
                         _fmt_pct(report.adversarial_accuracy), base]]
    if isinstance(report, TransferabilityMatrix):
        header = ["source_arch", *report.archs, "avg_plus"]
        rows = []
        for i, src in enumerate(report.archs):
            rows.append([src, *[_fmt_pct(v) for v in report.rates[i]],
                         _fmt_pct(report.row_averages[i])])
        return header, rows
    from .similarity import SimilarityReport
    if isinstance(report, SimilarityReport):
        header = ["reference_arch", "comparison_arch", "layer", "ssim", "n_images"]
        rows = [[report.reference_arch, r.comparison_arch, str(r.layer),
                 f"{r.ssim:.6f}", str(r.n_images)] for r in report.rows]
        return header, rows
    raise ContractViolation(f"unsupported report type {type(report).__name__}")


def emit_report(report, path, fmt="json"):
    """Write a report with stable key order and fixed decimal formatting,
    so identical reports produce byte-identical files."""
    if fmt == "json":
        payload = json.dumps(report_to_dict(report), indent=2, sort_keys=True)
        data = (payload + "\n").encode("utf-8")
    elif fmt == "csv":
        header, rows = report_to_csv_rows(report)
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
        data = buf.getvalue().encode("utf-8")
    else:
        raise ContractViolation(f"emit_report: format must be csv or json, got {fmt!r}")
    with open(path, "wb") as fh:
        fh.write(data)
    return path


def config_hash(config_dict):
    """Short stable hash used in emitted file names."""
    payload = json.dumps(config_dict, sort_keys=True).encode()
    return hashlib.sha256(payload).hexdigest()[:8]
