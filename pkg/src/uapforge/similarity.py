"""Layer-wise mean feature maps and their SSIM similarity across models.

Feature maps from different architectures differ in resolution and
range, so each channel-mean map is min-max normalized to [0,1]
(dynamic range L = 1) and the pair is resampled to the coarser grid
before the windowed SSIM comparison.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ContractViolation, Tensor


@dataclass
class SsimParams:
    window: int = 11
    sigma: float = 1.5
    dynamic_range: float = 1.0
    k1: float = 0.01
    k2: float = 0.03


@dataclass
class MeanFeatureMap:
    values: np.ndarray  # (H_l, W_l)
    arch_id: str = ""
    layer: int = 0
    input_fingerprint: str = ""


@dataclass
class SimilarityRow:
    comparison_arch: str
    layer: int
    ssim: float
    n_images: int
    degenerate_fraction: float = 0.0
    global_window: bool = False


@dataclass
class SimilarityReport:
    reference_arch: str
    rows: list = field(default_factory=list)
    evaluation_fingerprint: str = ""
    metadata: dict = field(default_factory=dict)


def mean_feature_map(activations, arch_id="", layer=0, input_fingerprint=""):
    """Channel-wise mean of a single sample's rank-3 activations."""
    acts = activations.data if isinstance(activations, Tensor) else np.asarray(activations)
    if acts.ndim != 3:
        raise ContractViolation(
            f"mean_feature_map: expected rank-3 activations, got shape {acts.shape}")
    return MeanFeatureMap(values=acts.mean(axis=0), arch_id=arch_id,
                          layer=layer, input_fingerprint=input_fingerprint)


def _gaussian_window(size, sigma):
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


def _windowed_stats(a, b, kernel):
    kh, kw = kernel.shape
    wa = np.lib.stride_tricks.sliding_window_view(a, (kh, kw))
    wb = np.lib.stride_tricks.sliding_window_view(b, (kh, kw))
    mu_a = np.einsum("ijkl,kl->ij", wa, kernel, optimize=True)
    mu_b = np.einsum("ijkl,kl->ij", wb, kernel, optimize=True)
    ex_aa = np.einsum("ijkl,kl->ij", wa * wa, kernel, optimize=True)
    ex_bb = np.einsum("ijkl,kl->ij", wb * wb, kernel, optimize=True)
    ex_ab = np.einsum("ijkl,kl->ij", wa * wb, kernel, optimize=True)
    return mu_a, mu_b, ex_aa - mu_a ** 2, ex_bb - mu_b ** 2, ex_ab - mu_a * mu_b


def ssim(a, b, params=SsimParams()):
    """Mean local SSIM over a Gaussian window; maps smaller than the
    window fall back to one global window."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractViolation(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    if a.ndim != 2:
        raise ContractViolation(f"ssim: maps must be 2-D, got shape {a.shape}")
    c1 = (params.k1 * params.dynamic_range) ** 2
    c2 = (params.k2 * params.dynamic_range) ** 2
    if min(a.shape) < params.window:
        mu_a, mu_b = a.mean(), b.mean()
        va, vb = a.var(), b.var()
        cov = ((a - mu_a) * (b - mu_b)).mean()
        val = ((2 * mu_a * mu_b + c1) * (2 * cov + c2) /
               ((mu_a ** 2 + mu_b ** 2 + c1) * (va + vb + c2)))
        return float(val)
    kernel = _gaussian_window(params.window, params.sigma)
    mu_a, mu_b, va, vb, cov = _windowed_stats(a, b, kernel)
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (va + vb + c2)
    return float((num / den).mean())


def resample_map(values, target_h, target_w):
    """Average-pool for integer-factor downsampling, bilinear otherwise."""
    values = np.asarray(values, dtype=np.float64)
    h, w = values.shape
    if target_h < 1 or target_w < 1:
        raise ContractViolation("resample_map: target dims must be >= 1")
    if (h, w) == (target_h, target_w):
        return values.copy()
    if h % target_h == 0 and w % target_w == 0 and target_h <= h and target_w <= w:
        fh, fw = h // target_h, w // target_w
        return values.reshape(target_h, fh, target_w, fw).mean(axis=(1, 3))
    # bilinear with half-pixel-centered sampling
    ys = (np.arange(target_h) + 0.5) * h / target_h - 0.5
    xs = (np.arange(target_w) + 0.5) * w / target_w - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    top = values[np.ix_(y0, x0)] * (1 - wx) + values[np.ix_(y0, x1)] * wx
    bot = values[np.ix_(y1, x0)] * (1 - wx) + values[np.ix_(y1, x1)] * wx
    return top * (1 - wy[:, 0])[:, None] + bot * wy[:, 0][:, None]


def _normalize01(m):
    lo, hi = m.min(), m.max()
    if hi - lo == 0:
        return np.zeros_like(m), True
    return (m - lo) / (hi - lo), False


def _batched_mean_maps(model, images, layers, batch_size=64):
    """Per-image channel-mean maps for each requested layer."""
    maps = {l: [] for l in layers}
    with T.no_grad():
        for i in range(0, len(images), batch_size):
            _, taps = model.forward(Tensor(images[i:i + batch_size]), taps=layers)
            for l in layers:
                maps[l].append(taps[l].data.mean(axis=1))
    return {l: np.concatenate(v) for l, v in maps.items()}


def layer_similarity_table(reference, comparisons, images, layers=range(1, 7),
                           evaluation_fingerprint="", params=SsimParams()):
    """Mean per-image SSIM between the reference model's mean feature
    maps and each comparison model's, per layer."""
    layers = [l for l in layers]
    for model in [reference, *comparisons]:
        missing = set(layers) - set(model.tap_points)
        if missing:
            raise ContractViolation(
                f"{model.arch_id}: tap points {sorted(missing)} not available")
    ref_maps = _batched_mean_maps(reference, images, layers)
    report = SimilarityReport(
        reference_arch=reference.arch_id,
        evaluation_fingerprint=evaluation_fingerprint,
        metadata={
            "aggregation": "per-image SSIM, averaged",
            "normalization": "per-map min-max to [0,1], L=1",
            "paper_reference_context": {
                # ImageNet-scale values for orientation only; not
                # reproduced at desk scale.
                "vgg19_vs_vgg16_layer1": 0.94,
                "resnet152_vs_vgg16_layer1": 0.57,
                "resnet152_vs_vgg16_layer6": 0.01,
            },
        })
    n = len(images)
    for model in comparisons:
        cmp_maps = _batched_mean_maps(model, images, layers)
        for l in layers:
            vals = []
            degenerate = 0
            used_global = False
            for i in range(n):
                a, da = _normalize01(ref_maps[l][i])
                b, db = _normalize01(cmp_maps[l][i])
                if da or db:
                    degenerate += 1
                th = min(a.shape[0], b.shape[0])
                tw = min(a.shape[1], b.shape[1])
                a = resample_map(a, th, tw)
                b = resample_map(b, th, tw)
                if min(th, tw) < params.window:
                    used_global = True
                vals.append(ssim(a, b, params))
            report.rows.append(SimilarityRow(
                comparison_arch=model.arch_id, layer=l,
                ssim=float(np.mean(vals)), n_images=n,
                degenerate_fraction=degenerate / n,
                global_window=used_global))
    return report
