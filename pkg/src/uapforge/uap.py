"""Training pipeline for universal adversarial perturbations.

One run: draw a fixed uniform input z, push it through the generator,
project the raw output onto the norm ball, add to training images,
clip to [0,1], feed the frozen source classifier, and minimize the
combined fooling loss with Adam over the generator parameters only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .losses import (DegenerateActivation, cross_entropy, fff_from_activations,
                     nontargeted_loss, one_hot, targeted_loss)
from .tensor import ContractViolation, NumericFailure, Tensor, _wrap

IMAGENET_PIXELS = 224 * 224 * 3  # reference dimensionality for the L2 budget


@dataclass
class GeneratorInput:
    z: np.ndarray   # [0,1]^(C,H,W)
    seed: int


@dataclass
class Perturbation:
    r: np.ndarray   # (C,H,W), float32
    p: str          # "2" | "inf"
    epsilon: float  # internal [0,1]-scale bound
    metadata: dict = field(default_factory=dict)

    def validate(self):
        nrm = perturbation_norm(self.r, self.p)
        if nrm > self.epsilon * (1.0 + 1e-6):
            raise ContractViolation(
                f"perturbation norm {nrm:.6g} exceeds bound {self.epsilon:.6g} (p={self.p})")
        if not np.all(np.isfinite(self.r)):
            raise NumericFailure("perturbation contains non-finite values")
        return self


@dataclass
class AttackConfig:
    alpha: float = 0.7
    epsilon: float = 10.0        # 0-255 pixel units; converted internally
    norm: str = "inf"            # "2" | "inf"
    mode: str = "nontargeted"    # "nontargeted" | "targeted"
    target_class: int | None = None
    epochs: int = 10
    batch_size: int = 64
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    seed: int = 0
    fff_input: str = "xadv"      # "xadv" | "r"

    def validate(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ContractViolation(f"alpha must lie in [0,1], got {self.alpha}")
        if self.epsilon <= 0:
            raise ContractViolation("epsilon must be positive")
        if self.norm not in ("2", "inf"):
            raise ContractViolation(f"norm must be '2' or 'inf', got {self.norm!r}")
        if self.mode not in ("nontargeted", "targeted"):
            raise ContractViolation(f"unknown attack mode {self.mode!r}")
        if self.mode == "targeted" and self.target_class is None:
            raise ContractViolation("targeted mode requires a target class")
        if self.fff_input not in ("xadv", "r"):
            raise ContractViolation(f"fff_input must be 'xadv' or 'r', got {self.fff_input!r}")
        return self


def epsilon_internal(epsilon_255, norm, image_shape):
    """Convert a 0-255-scale budget to internal [0,1] pixel units.

    For the L2 norm the budget additionally shrinks by the square root
    of the pixel-count ratio against the 224x224x3 reference, keeping
    the per-pixel RMS comparable across resolutions.
    """
    if norm == "inf":
        return epsilon_255 / 255.0
    pixels = int(np.prod(image_shape))
    return epsilon_255 / 255.0 * np.sqrt(pixels / IMAGENET_PIXELS)


def perturbation_norm(r, p):
    flat = np.asarray(r, dtype=np.float64).ravel()
    return float(np.abs(flat).max()) if p == "inf" else float(np.linalg.norm(flat))


def sample_z(seed, shape):
    """Uniform [0,1] generator input, drawn once per run from the seed."""
    rng = np.random.default_rng([0x7A5E, seed])
    z = rng.uniform(0.0, 1.0, shape).astype(T._default_dtype())
    return GeneratorInput(z=z, seed=seed)


def project_norm(raw, p, epsilon):
    """Scale ``raw`` by min(1, epsilon / ||raw||_p); differentiable.

    Inside the ball (or exactly zero) the input is returned unchanged.
    The L-inf adjoint uses the first-argmax subgradient of the max-abs
    norm.
    """
    if p not in ("2", "inf"):
        raise ContractViolation(f"project_norm: p must be '2' or 'inf', got {p!r}")
    if epsilon <= 0:
        raise ContractViolation("project_norm: epsilon must be positive")
    x = raw.data
    flat = x.ravel()
    if p == "2":
        nrm = float(np.sqrt((flat * flat).sum()))
    else:
        nrm = float(np.abs(flat).max()) if flat.size else 0.0
    if nrm <= epsilon or nrm == 0.0:
        return _wrap(x.copy(), "project_norm", (raw,), lambda g: (g,))
    s = epsilon / nrm
    out = x * x.dtype.type(s)
    if p == "2":
        def bw(g):
            dot = float((x * g).sum())
            return (s * g - (s / (nrm * nrm)) * dot * x,)
    else:
        j = int(np.abs(flat).argmax())
        sgn = np.sign(flat[j])

        def bw(g):
            gi = s * g
            dot = float((x * g).sum())
            gflat = gi.ravel()
            gflat[j] -= (s / nrm) * dot * sgn
            return (gi,)

    return _wrap(out, "project_norm", (raw,), bw)


def apply_perturbation(x, r):
    """x_adv = clamp(x + r, 0, 1); r broadcasts over the batch."""
    return T.clamp(T.add(x, r), 0.0, 1.0)


def generate_perturbation(generator, z, config):
    """Run the generator on the fixed z and project onto the norm ball."""
    eps = epsilon_internal(config.epsilon, config.norm, z.shape)
    out, _ = generator.forward(Tensor(z[None]))
    return project_norm(out, config.norm, eps), eps


def _fooling_rate_against(model, images, r, batch_size=256):
    from .models import predict
    clean = predict(model, images, batch_size)
    adv = predict(model, np.clip(images + r[None], 0.0, 1.0).astype(images.dtype),
                  batch_size)
    return 100.0 * float((clean != adv).mean())


def train_uap(generator, source, images, labels, config, dataset_fingerprint=""):
    """Optimize the generator against a frozen source model.

    Returns (Perturbation, history), where history holds per-epoch mean
    loss components and the training-set fooling rate.
    """
    config.validate()
    if not source.frozen:
        raise ContractViolation("train_uap: source model must be frozen")
    m = source.num_classes
    if config.mode == "targeted" and not 1 <= config.target_class <= m:
        raise ContractViolation(
            f"target class {config.target_class} out of range 1..{m}")
    params = generator.param_list()
    state = T.AdamState.for_params(params, lr=config.lr,
                                   beta1=config.beta1, beta2=config.beta2)
    gin = sample_z(config.seed, generator.input_shape)
    rng = np.random.default_rng([0x0A17, config.seed])
    n = len(images)
    history = []

    def current_perturbation():
        with T.no_grad():
            r_t, eps = generate_perturbation(generator, gin.z, config)
        return r_t.data[0].astype(np.float32), eps

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        sums = {"ce": 0.0, "fff_1": 0.0, "combined": 0.0}
        for i in range(0, n, config.batch_size):
            idx = order[i:i + config.batch_size]
            xb = Tensor(images[idx])
            r_t, _eps = generate_perturbation(generator, gin.z, config)
            xadv = apply_perturbation(xb, r_t)
            logits, taps = source.forward(xadv, taps=(1,))
            probs = T.softmax(logits)
            if config.fff_input == "xadv":
                fff = fff_from_activations(taps[1])
            else:
                _, rtaps = source.forward(r_t, taps=(1,))
                fff = fff_from_activations(rtaps[1])
            if config.mode == "nontargeted":
                ce = cross_entropy(probs, one_hot(labels[idx], m))
                breakdown = nontargeted_loss(ce, fff, config.alpha)
            else:
                tgt = np.full(len(idx), config.target_class)
                ce = cross_entropy(probs, one_hot(tgt, m))
                breakdown = targeted_loss(ce, fff, config.alpha,
                                          config.target_class, m)
            loss = breakdown.tensor
            if not np.isfinite(loss.data):
                raise NumericFailure("train_uap: non-finite loss")
            T.zero_grads(params)
            T.backward(loss, params=params)
            T.adam_step(params, state)
            w = len(idx) / n
            sums["ce"] += breakdown.ce * w
            sums["fff_1"] += breakdown.fff_1 * w
            sums["combined"] += breakdown.combined * w
        r_now, _ = current_perturbation()
        history.append({"epoch": epoch, **sums,
                        "train_fooling_rate": _fooling_rate_against(source, images, r_now)})

    r_final, eps = current_perturbation()
    pert = Perturbation(
        r=r_final, p=config.norm, epsilon=eps,
        metadata={
            "source_arch": source.arch_id,
            "alpha": config.alpha,
            "seed": config.seed,
            "mode": config.mode,
            "target_class": config.target_class,
            "epsilon_255": config.epsilon,
            "epochs": config.epochs,
            "fff_input": config.fff_input,
            "dataset_fingerprint": dataset_fingerprint,
            "baseline": False,
        })
    return pert.validate(), history


def load_uap_and_attack(perturbation, target, images, batch_size=256):
    """Predictions of the frozen target on clip(x + r, 0, 1)."""
    from .models import predict
    perturbation.validate()
    if perturbation.r.shape != target.input_shape:
        raise ContractViolation(
            f"perturbation shape {perturbation.r.shape} vs model input "
            f"{target.input_shape}")
    adv = np.clip(images + perturbation.r[None], 0.0, 1.0).astype(images.dtype)
    return predict(target, adv, batch_size)
