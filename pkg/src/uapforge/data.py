"""Dataset ingestion, run configuration, and bit-exact persistence.

Supported dataset formats are MNIST IDX (magic 0x00000803 / 0x00000801,
big-endian dims) and CIFAR-10 binary (3073-byte records). Checkpoints
and perturbations live in a single container format: magic "UAPT",
version 1, a tensor directory, float32 little-endian payloads, and a
trailing length-prefixed JSON metadata block.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import warnings
import zlib
from dataclasses import dataclass, field

import numpy as np

from .tensor import ContractViolation

DATA_DIR_ENV = "UAPFORGE_DATA_DIR"

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
CIFAR_RECORD = 3073


class DataError(ValueError):
    """Malformed or inconsistent on-disk data."""


# ---------------------------------------------------------------------------
# Dataset decoding
# ---------------------------------------------------------------------------

def decode_idx_images(raw):
    if len(raw) < 16:
        raise DataError("IDX image file truncated before header")
    magic, count, h, w = struct.unpack(">IIII", raw[:16])
    if magic != IDX_IMAGE_MAGIC:
        raise DataError(f"bad IDX image magic 0x{magic:08x}")
    expected = 16 + count * h * w
    if len(raw) != expected:
        raise DataError(f"IDX image file has {len(raw)} bytes, expected {expected}")
    pixels = np.frombuffer(raw, dtype=np.uint8, offset=16)
    return (pixels.reshape(count, 1, h, w).astype(np.float32) / 255.0)


def decode_idx_labels(raw, num_classes):
    if len(raw) < 8:
        raise DataError("IDX label file truncated before header")
    magic, count = struct.unpack(">II", raw[:8])
    if magic != IDX_LABEL_MAGIC:
        raise DataError(f"bad IDX label magic 0x{magic:08x}")
    if len(raw) != 8 + count:
        raise DataError(f"IDX label file has {len(raw)} bytes, expected {8 + count}")
    labels = np.frombuffer(raw, dtype=np.uint8, offset=8).astype(np.int64) + 1
    if labels.size and labels.max() > num_classes:
        raise DataError(f"label {labels.max() - 1} out of range for {num_classes} classes")
    return labels


def encode_idx_images(images_u8):
    n, _, h, w = images_u8.shape
    return struct.pack(">IIII", IDX_IMAGE_MAGIC, n, h, w) + images_u8.tobytes()


def encode_idx_labels(labels):
    return (struct.pack(">II", IDX_LABEL_MAGIC, len(labels)) +
            (np.asarray(labels, dtype=np.int64) - 1).astype(np.uint8).tobytes())


def decode_cifar10(raw, num_classes=10):
    if len(raw) == 0 or len(raw) % CIFAR_RECORD != 0:
        raise DataError(
            f"CIFAR-10 binary size {len(raw)} not a multiple of {CIFAR_RECORD}")
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64) + 1
    if labels.max() > num_classes:
        raise DataError(f"label {labels.max() - 1} out of range for {num_classes} classes")
    images = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return images, labels


def encode_cifar10(images_u8, labels):
    n = len(labels)
    out = np.empty((n, CIFAR_RECORD), dtype=np.uint8)
    out[:, 0] = np.asarray(labels, dtype=np.int64) - 1
    out[:, 1:] = images_u8.reshape(n, -1)
    return out.tobytes()


@dataclass
class DatasetHandle:
    name: str
    split: str                   # "train" | "tune" | "test"
    images: np.ndarray           # (N, C, H, W) float32 in [0,1]
    labels: np.ndarray           # (N,) int64 in 1..num_classes
    num_classes: int
    fingerprint: str = ""

    def __post_init__(self):
        if self.split not in ("train", "tune", "test"):
            raise DataError(f"unknown split {self.split!r}")
        if len(self.images) != len(self.labels):
            raise DataError("images and labels disagree in length")
        if len(self.labels) and (self.labels.min() < 1 or self.labels.max() > self.num_classes):
            raise DataError(f"labels outside 1..{self.num_classes}")
        if len(self.images) and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise DataError("pixels outside [0,1]")
        if not self.fingerprint:
            self.fingerprint = dataset_fingerprint(self.images, self.labels)

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])

    def __len__(self):
        return len(self.images)

    def __iter__(self):
        for i in range(len(self.images)):
            yield self.images[i], int(self.labels[i])


def dataset_fingerprint(images, labels):
    """Content hash over decoded pixels and labels, stable across machines."""
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(images, dtype="<f4").tobytes())
    h.update(np.ascontiguousarray(labels, dtype="<i8").tobytes())
    return h.hexdigest()


def _resolve_root(path):
    if path:
        return path
    env = os.environ.get(DATA_DIR_ENV)
    if not env:
        raise DataError(
            f"no dataset root given and {DATA_DIR_ENV} is not set")
    return env


def _read(path):
    if not os.path.exists(path):
        raise DataError(f"dataset file not found: {path}")
    with open(path, "rb") as fh:
        return fh.read()


def load_dataset(path, fmt, split, name=None, num_classes=10, tune_fraction=0.2):
    """Load one split of a dataset directory.

    MNIST IDX roots contain train-images-idx3-ubyte / train-labels-idx1-ubyte
    and t10k-* files; CIFAR-10 binary roots contain data_batch_*.bin and
    test_batch.bin. The tune split is carved deterministically from the
    tail of the train files, so train/tune/test are disjoint.
    """
    root = _resolve_root(path)
    if not os.path.isdir(root):
        raise DataError(f"dataset root is not a directory: {root}")
    if fmt == "mnist-idx":
        name = name or "mnist"
        if split == "test":
            images = decode_idx_images(_read(os.path.join(root, "t10k-images-idx3-ubyte")))
            labels = decode_idx_labels(_read(os.path.join(root, "t10k-labels-idx1-ubyte")),
                                       num_classes)
        else:
            images = decode_idx_images(_read(os.path.join(root, "train-images-idx3-ubyte")))
            labels = decode_idx_labels(_read(os.path.join(root, "train-labels-idx1-ubyte")),
                                       num_classes)
            images, labels = _carve(images, labels, split, tune_fraction)
    elif fmt == "cifar10-binary":
        name = name or "cifar10"
        if split == "test":
            images, labels = decode_cifar10(_read(os.path.join(root, "test_batch.bin")),
                                            num_classes)
        else:
            batches = sorted(f for f in os.listdir(root)
                             if f.startswith("data_batch") and f.endswith(".bin"))
            if not batches:
                raise DataError(f"no data_batch_*.bin files under {root}")
            parts = [decode_cifar10(_read(os.path.join(root, f)), num_classes)
                     for f in batches]
            images = np.concatenate([p[0] for p in parts])
            labels = np.concatenate([p[1] for p in parts])
            images, labels = _carve(images, labels, split, tune_fraction)
    else:
        raise DataError(f"unknown dataset format {fmt!r}")
    return DatasetHandle(name=name, split=split, images=images, labels=labels,
                         num_classes=num_classes)


def _carve(images, labels, split, tune_fraction):
    n_tune = int(round(len(images) * tune_fraction))
    if split == "train":
        return images[:len(images) - n_tune], labels[:len(labels) - n_tune]
    return images[len(images) - n_tune:], labels[len(labels) - n_tune:]


def balanced_subsample(handle, per_class, seed):
    """Per-class-balanced subsample, mirroring the n-images-per-class
    training protocol."""
    rng = np.random.default_rng([0x5AB5, seed])
    keep = []
    for c in range(1, handle.num_classes + 1):
        idx = np.flatnonzero(handle.labels == c)
        if len(idx) < per_class:
            raise DataError(
                f"class {c} has only {len(idx)} samples, need {per_class}")
        keep.append(rng.choice(idx, size=per_class, replace=False))
    keep = np.sort(np.concatenate(keep))
    return DatasetHandle(name=handle.name, split=handle.split,
                         images=handle.images[keep], labels=handle.labels[keep],
                         num_classes=handle.num_classes)


# ---------------------------------------------------------------------------
# Artifact container
# ---------------------------------------------------------------------------

MAGIC = b"UAPT"
VERSION = 1


@dataclass
class ArtifactContainer:
    tensors: dict = field(default_factory=dict)   # name -> float32 ndarray
    metadata: dict = field(default_factory=dict)


def save_artifact(container, path):
    """Serialize: magic, version, tensor directory (name, dims, offset,
    crc32), float32 LE payloads, length-prefixed JSON metadata."""
    names = sorted(container.tensors)
    payloads = []
    for name in names:
        arr = np.asarray(container.tensors[name])
        if arr.dtype != np.float32:
            warnings.warn(f"tensor {name!r} down-converted to float32 for storage")
        payloads.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    directory = bytearray()
    offset = 0
    for name, payload in zip(names, payloads):
        shape = np.asarray(container.tensors[name]).shape
        nb = name.encode("utf-8")
        directory += struct.pack("<H", len(nb)) + nb
        directory += struct.pack("<B", len(shape))
        for d in shape:
            directory += struct.pack("<I", d)
        directory += struct.pack("<QI", offset, zlib.crc32(payload))
        offset += len(payload)
    meta = json.dumps(container.metadata, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(names)))
        fh.write(struct.pack("<I", len(directory)))
        fh.write(directory)
        fh.write(struct.pack("<Q", offset))
        for payload in payloads:
            fh.write(payload)
        fh.write(struct.pack("<I", len(meta)))
        fh.write(meta)
    return path


def load_artifact(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    view = memoryview(raw)
    if raw[:4] != MAGIC:
        raise DataError(f"bad artifact magic {raw[:4]!r}")
    version, = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise DataError(f"unsupported artifact version {version}")
    n_tensors, = struct.unpack_from("<I", raw, 8)
    dir_len, = struct.unpack_from("<I", raw, 12)
    pos = 16
    dir_end = pos + dir_len
    entries = []
    for _ in range(n_tensors):
        if pos + 2 > dir_end:
            raise DataError("artifact directory truncated")
        nlen, = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = bytes(view[pos:pos + nlen]).decode("utf-8")
        pos += nlen
        rank, = struct.unpack_from("<B", raw, pos)
        pos += 1
        shape = struct.unpack_from(f"<{rank}I", raw, pos) if rank else ()
        pos += 4 * rank
        offset, crc = struct.unpack_from("<QI", raw, pos)
        pos += 12
        entries.append((name, shape, offset, crc))
    if pos != dir_end:
        raise DataError("artifact directory length mismatch")
    payload_len, = struct.unpack_from("<Q", raw, pos)
    pos += 8
    payload_start = pos
    if payload_start + payload_len + 4 > len(raw):
        raise DataError("artifact payload truncated")
    tensors = {}
    for name, shape, offset, crc in entries:
        count = int(np.prod(shape)) if shape else 1
        start = payload_start + offset
        end = start + 4 * count
        if offset + 4 * count > payload_len:
            raise DataError(f"tensor {name!r} payload out of bounds")
        payload = bytes(view[start:end])
        if zlib.crc32(payload) != crc:
            raise DataError(f"tensor {name!r} payload checksum mismatch")
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    pos = payload_start + payload_len
    meta_len, = struct.unpack_from("<I", raw, pos)
    pos += 4
    if pos + meta_len != len(raw):
        raise DataError("artifact metadata length mismatch")
    metadata = json.loads(bytes(view[pos:pos + meta_len]).decode("utf-8"))
    return ArtifactContainer(tensors=tensors, metadata=metadata)


def save_model(model, path, extra_metadata=None):
    from .models import named_batch_norms
    tensors = {k: v.data for k, v in model.params().items()}
    for prefix, bn in named_batch_norms(model):
        tensors[f"{prefix}.running_mean"] = bn.running_mean.astype(np.float32)
        tensors[f"{prefix}.running_var"] = bn.running_var.astype(np.float32)
    meta = {"kind": "model", "arch_id": model.arch_id,
            "input_shape": list(model.input_shape),
            "num_classes": model.num_classes}
    meta.update(extra_metadata or {})
    return save_artifact(ArtifactContainer(tensors=tensors, metadata=meta), path)


def load_model(path):
    from .models import build_classifier, build_generator, named_batch_norms
    container = load_artifact(path)
    meta = container.metadata
    if meta.get("kind") != "model":
        raise DataError(f"artifact at {path} is not a model checkpoint")
    shape = tuple(meta["input_shape"])
    if meta["arch_id"] == "gen-r4":
        model = build_generator(shape)
    else:
        model = build_classifier(meta["arch_id"], shape, meta["num_classes"])
    for k, p in model.params().items():
        if k not in container.tensors:
            raise DataError(f"checkpoint missing tensor {k!r}")
        arr = container.tensors[k]
        if arr.shape != p.data.shape:
            raise DataError(f"checkpoint tensor {k!r} has shape {arr.shape}, "
                            f"expected {p.data.shape}")
        p.data = arr.astype(p.data.dtype)
    for prefix, bn in named_batch_norms(model):
        for stat in ("running_mean", "running_var"):
            key = f"{prefix}.{stat}"
            if key not in container.tensors:
                raise DataError(f"checkpoint missing tensor {key!r}")
            setattr(bn, stat, container.tensors[key].astype(np.float64))
    return model, meta


def save_perturbation(pert, path):
    pert.validate()
    meta = {"kind": "perturbation", "p": pert.p, "epsilon": pert.epsilon}
    meta.update(pert.metadata)
    return save_artifact(
        ArtifactContainer(tensors={"r": pert.r.astype(np.float32)}, metadata=meta),
        path)


def load_perturbation(path):
    from .uap import Perturbation
    container = load_artifact(path)
    meta = dict(container.metadata)
    if meta.pop("kind", None) != "perturbation":
        raise DataError(f"artifact at {path} is not a perturbation")
    p = meta.pop("p")
    eps = meta.pop("epsilon")
    return Perturbation(r=container.tensors["r"], p=p, epsilon=eps,
                        metadata=meta).validate()


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------

class ConfigError(ValueError):
    """Configuration fails schema validation; message names the path."""


_SCHEMA = {
    "dataset": {
        "name": (str, None),
        "format": (str, "cifar10-binary"),
        "root": (str, None),
        "num_classes": (int, 10),
        "train_limit": (int, None),
        "per_class": (int, None),
        "tune_fraction": (float, 0.2),
    },
    "classifier": {
        "arch": (str, "cnn-a"),
        "checkpoint": (str, None),
        "epochs": (int, 5),
        "batch_size": (int, 64),
        "lr": (float, 1e-3),
        "seed": (int, 0),
    },
    "generator": {
        "arch": (str, "gen-r4"),
        "seed": (int, 0),
    },
    "attack": {
        "alpha": (float, 0.7),       # Table-2 style default
        "epsilon": (float, 10.0),    # 0-255 pixel units
        "norm": (str, "inf"),
        "mode": (str, "nontargeted"),
        "target_class": (int, None),
        "epochs": (int, 10),
        "batch_size": (int, 64),
        "lr": (float, 2e-4),
        "beta1": (float, 0.5),
        "beta2": (float, 0.999),
        "seed": (int, 0),
        "fff_input": (str, "xadv"),
    },
    "eval": {
        "perturbation": (str, None),
        "target_checkpoint": (str, None),
        "batch_size": (int, 256),
        "baseline": (str, None),     # "random" enables the noise control
        "max_images": (int, None),
    },
    "transfer": {
        "entries": (list, None),     # [{arch, checkpoint, perturbation}]
    },
    "similarity": {
        "reference": (str, None),
        "models": (list, None),      # [{arch, checkpoint}]
        "layers": (list, None),
        "max_images": (int, 64),
    },
    "sweep": {
        "alphas": (list, None),
    },
}


@dataclass
class RunConfig:
    sections: dict

    def __getitem__(self, key):
        return self.sections[key]

    def get(self, section, key):
        return self.sections.get(section, {}).get(key)

    def to_dict(self):
        return json.loads(json.dumps(self.sections))


def _coerce(value, typ, path):
    if value is None:
        return None
    if typ is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if not isinstance(value, typ) or isinstance(value, bool) and typ is not bool:
        raise ConfigError(f"{path}: expected {typ.__name__}, got {type(value).__name__}")
    return value


def validate_config(doc):
    """Apply the schema: unknown keys rejected, defaults filled in,
    cross-field constraints checked."""
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    sections = {}
    for section, value in doc.items():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown config section {section!r}")
        if not isinstance(value, dict):
            raise ConfigError(f"{section}: expected an object")
        for key in value:
            if key not in _SCHEMA[section]:
                raise ConfigError(f"{section}.{key}: unknown key")
    for section, fields in _SCHEMA.items():
        given = doc.get(section, {})
        out = {}
        for key, (typ, default) in fields.items():
            out[key] = _coerce(given.get(key, default), typ, f"{section}.{key}")
        sections[section] = out
    atk = sections["attack"]
    if not 0.0 <= atk["alpha"] <= 1.0:
        raise ConfigError("attack.alpha: α must lie in [0,1]")
    if atk["epsilon"] <= 0:
        raise ConfigError("attack.epsilon: must be positive")
    if atk["norm"] not in ("2", "inf"):
        raise ConfigError("attack.norm: must be '2' or 'inf'")
    if atk["mode"] not in ("nontargeted", "targeted"):
        raise ConfigError("attack.mode: must be 'nontargeted' or 'targeted'")
    if atk["mode"] == "targeted" and atk["target_class"] is None:
        raise ConfigError("attack.target_class: required in targeted mode")
    if atk["fff_input"] not in ("xadv", "r"):
        raise ConfigError("attack.fff_input: must be 'xadv' or 'r'")
    if sections["dataset"]["format"] not in ("mnist-idx", "cifar10-binary"):
        raise ConfigError("dataset.format: must be 'mnist-idx' or 'cifar10-binary'")
    return RunConfig(sections=sections)


def parse_config(path):
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return validate_config(doc)


def attack_config_from(run_config):
    from .uap import AttackConfig
    atk = run_config["attack"]
    return AttackConfig(
        alpha=atk["alpha"], epsilon=atk["epsilon"], norm=atk["norm"],
        mode=atk["mode"], target_class=atk["target_class"],
        epochs=atk["epochs"], batch_size=atk["batch_size"], lr=atk["lr"],
        beta1=atk["beta1"], beta2=atk["beta2"], seed=atk["seed"],
        fff_input=atk["fff_input"]).validate()
