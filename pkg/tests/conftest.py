"""Shared fixtures: a synthetic class-texture dataset written in the real
on-disk formats, plus session-scoped trained models and perturbations.

Each synthetic class is a fixed oriented color grating (frequency,
orientation, and RGB direction drawn once from a fixed generator) with a
random phase and amplitude per sample plus pixel noise. Amplitudes are
kept comparable to the attack budget so norm-bounded perturbations can
plausibly override class evidence, which is the regime the attack metrics
are designed to measure.
"""

import numpy as np
import pytest

from uapforge import (AttackConfig, build_classifier, build_generator,
                      load_dataset, train_classifier, train_uap)
from uapforge.data import encode_cifar10, encode_idx_images, encode_idx_labels

N_CLASSES = 10
IMAGE_SHAPE = (3, 32, 32)


def texture_images(n_per_class, seed, shape=IMAGE_SHAPE, amp_lo=0.02,
                   amp_hi=0.08, noise=0.06, n_classes=N_CLASSES):
    """Synthetic class-grating images as float32 in [0,1] with 1-based labels."""
    c, h, w = shape
    rng = np.random.default_rng(seed)
    crng = np.random.default_rng(123)   # class definitions: fixed across splits
    freqs = crng.uniform(2.0, 6.0, n_classes)
    thetas = crng.uniform(0.0, np.pi, n_classes)
    colors = crng.normal(0.0, 1.0, (n_classes, c))
    colors /= np.linalg.norm(colors, axis=1)[:, None]
    yy, xx = np.mgrid[0:h, 0:w] / float(max(h, w))
    images, labels = [], []
    for k in range(n_classes):
        kx = freqs[k] * np.cos(thetas[k])
        ky = freqs[k] * np.sin(thetas[k])
        phase = rng.uniform(0.0, 2.0 * np.pi, n_per_class)
        amp = rng.uniform(amp_lo, amp_hi, n_per_class)
        grating = amp[:, None, None] * np.sin(
            2.0 * np.pi * (kx * xx + ky * yy)[None] + phase[:, None, None])
        img = (0.5 + colors[k][None, :, None, None] * grating[:, None]
               + rng.normal(0.0, noise, (n_per_class, c, h, w)))
        images.append(np.clip(img, 0.0, 1.0))
        labels.append(np.full(n_per_class, k + 1, dtype=np.int64))
    x = np.concatenate(images).astype(np.float32)
    y = np.concatenate(labels)
    order = rng.permutation(len(x))
    return x[order], y[order]


def _to_u8(images):
    return np.round(images * 255.0).astype(np.uint8)


def blob_probe_images(n, seed, shape=IMAGE_SHAPE):
    """Structured probe images for the feature-similarity analysis: a few
    soft color blobs on a gray background. Unlike the grating dataset,
    whose per-pixel noise dominates its low-amplitude class signal, these
    have strong localized luminance structure, so early feature maps are
    input-driven rather than noise-driven."""
    c, h, w = shape
    rng = np.random.default_rng([0xB10B, seed])
    yy, xx = np.mgrid[0:h, 0:w]
    imgs = np.full((n, c, h, w), 0.5, np.float32)
    for i in range(n):
        for _ in range(3):
            cy, cx = rng.uniform(4, h - 4, 2)
            s = rng.uniform(2.0, 5.0)
            g = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
            col = rng.uniform(-0.4, 0.4, c)
            imgs[i] += (col[:, None, None] * g[None]).astype(np.float32)
    imgs += rng.normal(0, 0.02, imgs.shape).astype(np.float32)
    return np.clip(imgs, 0.0, 1.0)


@pytest.fixture(scope="session")
def cifar_root(tmp_path_factory):
    """Synthetic dataset on disk in CIFAR-10 binary format.

    data_batch_1.bin holds 1,250 images; the loader carves the tail 20%
    as the tune split, leaving 1,000 training images. test_batch.bin
    holds 500 images drawn with a different seed.
    """
    root = tmp_path_factory.mktemp("cifar_synth")
    xtr, ytr = texture_images(125, seed=1)
    xte, yte = texture_images(50, seed=2)
    (root / "data_batch_1.bin").write_bytes(encode_cifar10(_to_u8(xtr), ytr))
    (root / "test_batch.bin").write_bytes(encode_cifar10(_to_u8(xte), yte))
    return str(root)


@pytest.fixture(scope="session")
def mnist_root(tmp_path_factory):
    """Small synthetic grayscale dataset on disk in MNIST IDX format."""
    root = tmp_path_factory.mktemp("mnist_synth")
    xtr, ytr = texture_images(20, seed=3, shape=(1, 28, 28))
    xte, yte = texture_images(10, seed=4, shape=(1, 28, 28))
    (root / "train-images-idx3-ubyte").write_bytes(encode_idx_images(_to_u8(xtr)))
    (root / "train-labels-idx1-ubyte").write_bytes(encode_idx_labels(ytr))
    (root / "t10k-images-idx3-ubyte").write_bytes(encode_idx_images(_to_u8(xte)))
    (root / "t10k-labels-idx1-ubyte").write_bytes(encode_idx_labels(yte))
    return str(root)


@pytest.fixture(scope="session")
def trainset(cifar_root):
    return load_dataset(cifar_root, "cifar10-binary", "train")


@pytest.fixture(scope="session")
def tuneset(cifar_root):
    return load_dataset(cifar_root, "cifar10-binary", "tune")


@pytest.fixture(scope="session")
def testset(cifar_root):
    return load_dataset(cifar_root, "cifar10-binary", "test")


# The deep recipes need a larger step size to reach accuracy comparable
# to the shallow ones within the fixed 20-epoch budget.
_TRAIN_LR = {"cnn-b": 2e-3, "res-b": 2e-3}


def train_frozen(arch, trainset, epochs=20, seed=0):
    model = build_classifier(arch, trainset.image_shape, trainset.num_classes,
                             seed=seed)
    train_classifier(model, trainset.images, trainset.labels,
                     epochs=epochs, lr=_TRAIN_LR.get(arch, 1e-3), seed=seed)
    model.freeze()
    return model


@pytest.fixture(scope="session")
def source_model(trainset):
    """Frozen cnn-a classifier, the default white-box source and target."""
    return train_frozen("cnn-a", trainset)


@pytest.fixture(scope="session")
def trained_uap(source_model, trainset):
    """Nontargeted perturbation trained with default attack settings."""
    gen = build_generator(trainset.image_shape, seed=0)
    cfg = AttackConfig(alpha=0.7, epsilon=10.0, norm="inf", epochs=10, seed=0)
    pert, history = train_uap(gen, source_model, trainset.images,
                              trainset.labels, cfg,
                              dataset_fingerprint=trainset.fingerprint)
    return pert, history


@pytest.fixture(scope="session")
def all_models(source_model, trainset):
    """All four classifier architectures, trained and frozen."""
    models = {"cnn-a": source_model}
    for arch in ("cnn-b", "res-a", "res-b"):
        models[arch] = train_frozen(arch, trainset)
    return models


@pytest.fixture(scope="session")
def small_model(trainset):
    """Lightly trained cnn-a for fast structural tests (not attack gates)."""
    return train_frozen("cnn-a", trainset, epochs=2)
