"""Desk-scale classifier analogs and the perturbation generator.

Four classifier recipes span the plain/residual x shallow/deep grid
(cnn-a, cnn-b, res-a, res-b) and one image-to-image generator (gen-r4)
maps a uniform-noise input to a raw perturbation. Activation tap points
are numbered from 1 at the first post-activation output so losses and
the similarity analysis can read intermediate feature maps.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ContractViolation, FrozenModelError, NumericFailure, Tensor


def _arch_seed(arch_id):
    # stable across processes, unlike hash()
    return int.from_bytes(hashlib.sha256(arch_id.encode()).digest()[:4], "little")


def _kaiming_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, shape)


class Layer:
    """Base layer: owns named parameter tensors and a forward pass.

    ``tap`` is an optional callable invoked with every post-activation
    tensor, in network order.
    """

    def params(self):
        return {}

    def forward(self, x, tap=None):
        raise NotImplementedError

    def set_training(self, training):
        pass


class Conv2d(Layer):
    def __init__(self, rng, cin, cout, kernel=3, stride=1, padding=1):
        self.stride = stride
        self.padding = padding
        fan_in = cin * kernel * kernel
        self.w = Tensor(_kaiming_uniform(rng, (cout, cin, kernel, kernel), fan_in),
                        requires_grad=True)
        self.b = Tensor(np.zeros(cout), requires_grad=True)

    def params(self):
        return {"w": self.w, "b": self.b}

    def forward(self, x, tap=None):
        return T.conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding)


class ConvTranspose2d(Layer):
    def __init__(self, rng, cin, cout, kernel=4, stride=2, padding=1):
        self.stride = stride
        self.padding = padding
        fan_in = cin * kernel * kernel
        self.w = Tensor(_kaiming_uniform(rng, (cin, cout, kernel, kernel), fan_in),
                        requires_grad=True)
        self.b = Tensor(np.zeros(cout), requires_grad=True)

    def params(self):
        return {"w": self.w, "b": self.b}

    def forward(self, x, tap=None):
        return T.conv_transpose2d(x, self.w, self.b,
                                  stride=self.stride, padding=self.padding)


class Linear(Layer):
    def __init__(self, rng, fin, fout):
        self.w = Tensor(_kaiming_uniform(rng, (fin, fout), fin), requires_grad=True)
        self.b = Tensor(np.zeros(fout), requires_grad=True)

    def params(self):
        return {"w": self.w, "b": self.b}

    def forward(self, x, tap=None):
        return T.linear(x, self.w, self.b)


class ReLU(Layer):
    def forward(self, x, tap=None):
        out = T.relu(x)
        if tap is not None:
            tap(out)
        return out


class MaxPool2d(Layer):
    def __init__(self, kernel=2):
        self.kernel = kernel

    def forward(self, x, tap=None):
        return T.max_pool2d(x, self.kernel)


class GlobalAvgPool(Layer):
    def forward(self, x, tap=None):
        return T.global_avg_pool(x)


class BatchNorm2d(Layer):
    """Batch statistics while training, frozen running stats at inference."""

    def __init__(self, channels, momentum=0.1):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=np.float64)
        self.running_var = np.ones(channels, dtype=np.float64)
        self.momentum = momentum
        self.training = True

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def set_training(self, training):
        self.training = training

    def forward(self, x, tap=None):
        if self.training:
            out = T.batch_norm(x, self.gamma, self.beta)
            mu = x.data.mean(axis=(0, 2, 3))
            var = x.data.var(axis=(0, 2, 3))
            self.running_mean = (1 - self.momentum) * self.running_mean + self.momentum * mu
            self.running_var = (1 - self.momentum) * self.running_var + self.momentum * var
            return out
        return T.batch_norm(x, self.gamma, self.beta,
                            running_mean=self.running_mean,
                            running_var=self.running_var)


class ResidualBlock(Layer):
    """conv-relu-conv plus skip, relu after the sum. A 1x1 projection
    conv aligns the skip when channels or stride change."""

    def __init__(self, rng, cin, cout, stride=1, norm=False):
        self.conv1 = Conv2d(rng, cin, cout, 3, stride, 1)
        self.conv2 = Conv2d(rng, cout, cout, 3, 1, 1)
        self.norm1 = BatchNorm2d(cout) if norm else None
        self.norm2 = BatchNorm2d(cout) if norm else None
        self.proj = (Conv2d(rng, cin, cout, 1, stride, 0)
                     if stride != 1 or cin != cout else None)

    def params(self):
        out = {}
        for name, sub in (("conv1", self.conv1), ("conv2", self.conv2),
                          ("norm1", self.norm1), ("norm2", self.norm2),
                          ("proj", self.proj)):
            if sub is not None:
                for k, v in sub.params().items():
                    out[f"{name}.{k}"] = v
        return out

    def set_training(self, training):
        for sub in (self.norm1, self.norm2):
            if sub is not None:
                sub.set_training(training)

    def forward(self, x, tap=None):
        h = self.conv1.forward(x)
        if self.norm1 is not None:
            h = self.norm1.forward(h)
        h = T.relu(h)
        if tap is not None:
            tap(h)
        h = self.conv2.forward(h)
        if self.norm2 is not None:
            h = self.norm2.forward(h)
        skip = self.proj.forward(x) if self.proj is not None else x
        out = T.relu(T.add(h, skip))
        if tap is not None:
            tap(out)
        return out


class Flatten(Layer):
    def forward(self, x, tap=None):
        return T.reshape(x, (x.shape[0], -1))


class InputCenter(Layer):
    """Fixed affine stem mapping [0,1] pixels to [-1,1]; no parameters."""

    def forward(self, x, tap=None):
        return T.scale(T.add(x, Tensor(np.asarray(-0.5, dtype=x.data.dtype))), 2.0)


@dataclass
class ArchCatalogEntry:
    arch_id: str
    family: str          # "vgg-like" | "resnet-like" | "generator"
    depth_class: str     # "shallow" | "deep" | "-"
    recipe: dict


ARCH_CATALOG = {
    # 4 conv blocks of two 3x3 convs each; pools after the first three.
    "cnn-a": ArchCatalogEntry("cnn-a", "vgg-like", "shallow", {
        "blocks": [(8, True), (16, True), (32, True), (32, False)]}),
    # 6 conv blocks; pools after blocks 2, 4, 6.
    "cnn-b": ArchCatalogEntry("cnn-b", "vgg-like", "deep", {
        "blocks": [(8, False), (8, True), (16, False), (16, True),
                   (32, False), (32, True)]}),
    # stem conv + 4 residual blocks; two stride-2 stages so the final
    # grid matches the downsampling schedule of the other recipes.
    "res-a": ArchCatalogEntry("res-a", "resnet-like", "shallow", {
        "stem": 16, "blocks": [(16, 1), (16, 2), (32, 2), (32, 1)]}),
    # stem conv + 10 residual blocks.
    "res-b": ArchCatalogEntry("res-b", "resnet-like", "deep", {
        "stem": 16, "blocks": [(16, 1), (16, 1), (16, 1), (16, 1),
                               (32, 2), (32, 1), (32, 1),
                               (48, 2), (48, 1), (48, 1)]}),
    # 2 stride-2 downsampling convs, 4 residual blocks, 2 stride-2
    # transposed convs, linear 3x3 output conv.
    "gen-r4": ArchCatalogEntry("gen-r4", "generator", "-", {
        "widths": (8, 16), "res_blocks": 4}),
}

CLASSIFIER_ARCHS = ("cnn-a", "cnn-b", "res-a", "res-b")
GENERATOR_ARCH = "gen-r4"


class ModelHandle:
    """An ordered layer list with named parameters and activation taps."""

    def __init__(self, arch_id, layers, input_shape, num_classes=None):
        self.arch_id = arch_id
        self.layers = layers
        self.input_shape = tuple(input_shape)
        self.num_classes = num_classes
        self.mode = "training"
        self._params = {}
        for i, layer in enumerate(layers):
            for k, v in layer.params().items():
                self._params[f"layer{i}.{k}"] = v
        self.tap_points = self._count_taps()

    def _count_taps(self):
        count = [0]
        x = Tensor(np.zeros((1,) + self.input_shape))
        for layer in self.layers:
            layer.set_training(False)  # dry run must not touch running stats
        with T.no_grad():
            for layer in self.layers:
                x = layer.forward(x, tap=lambda t: count.__setitem__(0, count[0] + 1))
        for layer in self.layers:
            layer.set_training(True)
        return list(range(1, count[0] + 1))

    def params(self):
        return dict(self._params)

    def param_list(self):
        return [self._params[k] for k in sorted(self._params)]

    def param_count(self):
        return sum(p.size for p in self._params.values())

    def checksum(self):
        h = hashlib.sha256()
        for k in sorted(self._params):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self._params[k].data, dtype="<f4").tobytes())
        return h.hexdigest()

    def set_mode(self, mode):
        if mode not in ("training", "inference"):
            raise ContractViolation(f"unknown model mode {mode!r}")
        self.mode = mode
        for layer in self.layers:
            layer.set_training(mode == "training")

    def freeze(self):
        """Switch to inference mode and make parameters immutable."""
        self.set_mode("inference")
        for p in self._params.values():
            p.requires_grad = False
            p.data.flags.writeable = False
        return self

    @property
    def frozen(self):
        return self.mode == "inference" and all(
            not p.data.flags.writeable for p in self._params.values())

    def forward(self, x, taps=None):
        """Run the network; returns (output, {tap index: activation})."""
        if not isinstance(x, Tensor):
            x = Tensor(x)
        if x.data.ndim != len(self.input_shape) + 1 or tuple(x.data.shape[1:]) != self.input_shape:
            raise ContractViolation(
                f"{self.arch_id}: expected batch of {self.input_shape}, got {x.data.shape}")
        wanted = set(taps) if taps else set()
        unknown = wanted - set(self.tap_points)
        if unknown:
            raise ContractViolation(
                f"{self.arch_id}: unknown tap points {sorted(unknown)}")
        collected = {}
        counter = [0]

        def tap(t):
            counter[0] += 1
            if counter[0] in wanted:
                collected[counter[0]] = t

        cb = tap if wanted else None
        for layer in self.layers:
            x = layer.forward(x, tap=cb)
        return x, collected

    def __call__(self, x):
        return self.forward(x)[0]


def named_batch_norms(model):
    """Every batch-norm module in the model with its checkpoint key prefix,
    including norms nested inside residual blocks."""
    for i, layer in enumerate(model.layers):
        if isinstance(layer, BatchNorm2d):
            yield f"layer{i}", layer
        elif isinstance(layer, ResidualBlock):
            for name, sub in (("norm1", layer.norm1), ("norm2", layer.norm2)):
                if sub is not None:
                    yield f"layer{i}.{name}", sub


def forward_with_taps(model, batch, taps):
    """Output plus the requested post-activation feature tensors."""
    return model.forward(batch, taps=taps)


def build_classifier(arch_id, input_shape, num_classes, seed=0):
    """Instantiate a catalog classifier with seeded initialization."""
    if arch_id not in CLASSIFIER_ARCHS:
        raise ContractViolation(f"unknown classifier architecture {arch_id!r}")
    if num_classes < 2:
        raise ContractViolation(f"num_classes must be >= 2, got {num_classes}")
    c, h, w = input_shape
    rng = np.random.default_rng([_arch_seed(arch_id), seed])
    entry = ARCH_CATALOG[arch_id]
    layers = [InputCenter()]
    if entry.family == "vgg-like":
        cin = c
        for width, pool in entry.recipe["blocks"]:
            layers += [Conv2d(rng, cin, width), BatchNorm2d(width), ReLU(),
                       Conv2d(rng, width, width), BatchNorm2d(width), ReLU()]
            if pool:
                layers.append(MaxPool2d(2))
            cin = width
        layers += [GlobalAvgPool(), Linear(rng, cin, num_classes)]
    else:
        stem = entry.recipe["stem"]
        layers += [Conv2d(rng, c, stem), BatchNorm2d(stem), ReLU()]
        cin = stem
        for width, stride in entry.recipe["blocks"]:
            layers.append(ResidualBlock(rng, cin, width, stride, norm=True))
            cin = width
        layers += [GlobalAvgPool(), Linear(rng, cin, num_classes)]
    return ModelHandle(arch_id, layers, input_shape, num_classes)


def build_generator(input_shape, seed=0, arch_id=GENERATOR_ARCH):
    """Instantiate the perturbation generator; output shape equals input
    shape and the final layer is linear so the norm projection governs
    magnitude."""
    if arch_id != GENERATOR_ARCH:
        raise ContractViolation(f"unknown generator architecture {arch_id!r}")
    c, h, w = input_shape
    if h % 4 != 0 or w % 4 != 0:
        raise ContractViolation(
            f"generator needs H and W divisible by 4, got {h}x{w}")
    rng = np.random.default_rng([0x6E67, seed])
    w1, w2 = ARCH_CATALOG[arch_id].recipe["widths"]
    nblocks = ARCH_CATALOG[arch_id].recipe["res_blocks"]
    layers = [
        InputCenter(),
        Conv2d(rng, c, w1, 3, 2, 1), BatchNorm2d(w1), ReLU(),
        Conv2d(rng, w1, w2, 3, 2, 1), BatchNorm2d(w2), ReLU(),
    ]
    for _ in range(nblocks):
        layers.append(ResidualBlock(rng, w2, w2, norm=True))
    layers += [
        ConvTranspose2d(rng, w2, w1, 4, 2, 1), BatchNorm2d(w1), ReLU(),
        ConvTranspose2d(rng, w1, w1, 4, 2, 1), BatchNorm2d(w1), ReLU(),
        Conv2d(rng, w1, c, 3, 1, 1),
    ]
    return ModelHandle(arch_id, layers, input_shape)


def expected_param_count(arch_id, input_shape, num_classes=None):
    """Closed-form parameter count from the layer recipe."""
    c = input_shape[0]
    entry = ARCH_CATALOG[arch_id]

    def conv(cin, cout, k):
        return cout * cin * k * k + cout

    total = 0
    if entry.family == "vgg-like":
        cin = c
        for width, _pool in entry.recipe["blocks"]:
            total += conv(cin, width, 3) + conv(width, width, 3) + 4 * width
            cin = width
        total += cin * num_classes + num_classes
    elif entry.family == "resnet-like":
        stem = entry.recipe["stem"]
        total += conv(c, stem, 3) + 2 * stem
        cin = stem
        for width, stride in entry.recipe["blocks"]:
            total += conv(cin, width, 3) + conv(width, width, 3) + 4 * width
            if stride != 1 or cin != width:
                total += conv(cin, width, 1)
            cin = width
        total += cin * num_classes + num_classes
    else:
        w1, w2 = entry.recipe["widths"]
        total += conv(c, w1, 3) + 2 * w1          # down conv + BN
        total += conv(w1, w2, 3) + 2 * w2
        for _ in range(entry.recipe["res_blocks"]):
            total += conv(w2, w2, 3) * 2 + 4 * w2  # two convs + two BNs
        total += conv(w2, w1, 4) + 2 * w1          # transposed convs + BN
        total += conv(w1, w1, 4) + 2 * w1
        total += conv(w1, c, 3)
    return total


@dataclass
class TrainReport:
    """Per-epoch curves for one classifier training run."""

    arch_id: str
    epochs: list = field(default_factory=list)       # consecutive from 1
    train_loss: list = field(default_factory=list)
    train_accuracy: list = field(default_factory=list)
    heldout_accuracy: list = field(default_factory=list)
    final_checksum: str = ""


def predict(model, images, batch_size=256):
    """Argmax class labels (1-based, ties to the lowest index)."""
    preds = []
    with T.no_grad():
        for i in range(0, len(images), batch_size):
            logits = model(Tensor(images[i:i + batch_size]))
            preds.append(logits.data.argmax(axis=1) + 1)
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def train_classifier(model, images, labels, *, epochs, batch_size=64, lr=1e-3,
                     seed=0, heldout=None):
    """Adam training on cross-entropy; returns a TrainReport."""
    from .losses import cross_entropy, one_hot

    m = model.num_classes
    if labels.min() < 1 or labels.max() > m:
        raise ContractViolation(
            f"labels must lie in 1..{m}, got range {labels.min()}..{labels.max()}")
    if model.frozen:
        raise FrozenModelError("train_classifier: model is frozen")
    params = model.param_list()
    state = T.AdamState.for_params(params, lr=lr)
    rng = np.random.default_rng(seed)
    report = TrainReport(arch_id=model.arch_id)
    n = len(images)
    for epoch in range(1, epochs + 1):
        order = rng.permutation(n)
        losses = []
        correct = 0
        for i in range(0, n, batch_size):
            idx = order[i:i + batch_size]
            xb = Tensor(images[idx])
            logits, _ = model.forward(xb)
            probs = T.softmax(logits)
            loss = cross_entropy(probs, one_hot(labels[idx], m))
            if not np.isfinite(loss.data):
                raise NumericFailure("train_classifier: non-finite loss")
            if lr != 0.0:
                T.zero_grads(params)
                T.backward(loss, params=params)
                T.adam_step(params, state)
            losses.append(float(loss.data) * len(idx))
            correct += int((logits.data.argmax(axis=1) + 1 == labels[idx]).sum())
        report.epochs.append(epoch)
        report.train_loss.append(sum(losses) / n)
        report.train_accuracy.append(100.0 * correct / n)
        if heldout is not None:
            hx, hy = heldout
            acc = 100.0 * float((predict(model, hx) == hy).mean())
            report.heldout_accuracy.append(acc)
    report.final_checksum = model.checksum()
    return report
