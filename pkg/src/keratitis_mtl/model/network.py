"""Reference multitask network: trunk -> [avg-pool] -> batch norm -> dropout -> head(s).

Trunks stand in for a pretrained backbone:

* ``linear``: dense D -> H followed by ReLU, for feature-vector payloads;
* ``conv``: one 3x3 convolution (C filters) + ReLU on (S, S, 3) images,
  followed by 3x3 average pooling with stride 2 and padding 1.

Head variants: ``ST`` (one task, width 1), ``Sex`` (width 1), ``Age``
(width 4, softmax), ``Mv1`` (three parallel width-1 heads) and ``Mv2`` (one
width-3 head). Sigmoid heads output probabilities per column.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from ..core.types import N_AGE_BINS, TASKS, DatasetManifest
from . import layers
from .losses import LossSpec, sigmoid_coefficients, sigmoid_objective, softmax_objective

VARIANTS = ("ST", "Mv1", "Mv2", "Sex", "Age")
TRUNKS = ("linear", "conv")


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "Mv2"
    task: str | None = None  # ST only
    trunk: str = "linear"
    input_dim: int = 16  # linear trunk
    image_size: int = 32  # conv trunk
    hidden: int = 32  # H for linear, filters C for conv
    dropout_p: float = 0.3
    use_batchnorm: bool = True

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.trunk not in TRUNKS:
            raise ValueError(f"trunk must be one of {TRUNKS}")
        if self.variant == "ST" and self.task not in TASKS:
            raise ValueError("ST variant needs task in " + str(TASKS))
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must be in [0, 1)")

    @property
    def output_width(self) -> int:
        return {"ST": 1, "Sex": 1, "Age": N_AGE_BINS, "Mv1": 3, "Mv2": 3}[self.variant]

    @property
    def output_names(self) -> tuple[str, ...]:
        if self.variant in ("Mv1", "Mv2"):
            return TASKS
        if self.variant == "ST":
            return (self.task,)
        if self.variant == "Sex":
            return ("sex",)
        return tuple(f"age_{i}" for i in range(N_AGE_BINS))

    @property
    def feature_width(self) -> int:
        if self.trunk == "linear":
            return self.hidden
        pooled = (self.image_size + 2 - 3) // 2 + 1
        return pooled * pooled * self.hidden

    @property
    def payload_mode(self) -> str:
        return "features" if self.trunk == "linear" else "image"


@dataclass
class Network:
    config: ModelConfig
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "Network":
        return Network(self.config, {k: v.copy() for k, v in self.params.items()},
                       {k: v.copy() for k, v in self.buffers.items()})

    def trunk_keys(self) -> list[str]:
        return [k for k in self.params if k.startswith("trunk.")]


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_network(config: ModelConfig, seed: int = 0) -> Network:
    """Uniform fan-in initialisation from a seeded generator."""
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    if config.trunk == "linear":
        params["trunk.W"] = _uniform(rng, config.input_dim, (config.input_dim, config.hidden))
        params["trunk.b"] = _uniform(rng, config.input_dim, (config.hidden,))
    else:
        fan_in = 9 * 3
        params["trunk.W"] = _uniform(rng, fan_in, (3, 3, 3, config.hidden))
        params["trunk.b"] = _uniform(rng, fan_in, (config.hidden,))
    f = config.feature_width
    buffers = {}
    if config.use_batchnorm:
        params["bn.gamma"] = np.ones(f)
        params["bn.beta"] = np.zeros(f)
        buffers["bn.running_mean"] = np.zeros(f)
        buffers["bn.running_var"] = np.ones(f)
    if config.variant == "Mv1":
        for t in TASKS:
            params[f"head.{t}.W"] = _uniform(rng, f, (f, 1))
            params[f"head.{t}.b"] = _uniform(rng, f, (1,))
    else:
        params["head.W"] = _uniform(rng, f, (f, config.output_width))
        params["head.b"] = _uniform(rng, f, (config.output_width,))
    return Network(config, params, buffers)


def stack_v1_to_v2(net: Network) -> Network:
    """Mv2 network whose 3-neuron head is the three Mv1 heads side by side."""
    if net.config.variant != "Mv1":
        raise ValueError("expected an Mv1 network")
    params = {k: v.copy() for k, v in net.params.items() if not k.startswith("head.")}
    params["head.W"] = np.concatenate([net.params[f"head.{t}.W"] for t in TASKS], axis=1)
    params["head.b"] = np.concatenate([net.params[f"head.{t}.b"] for t in TASKS])
    cfg = clone_config(net.config, variant="Mv2")
    return Network(cfg, params, {k: v.copy() for k, v in net.buffers.items()})


def _check_input(config: ModelConfig, x: np.ndarray) -> None:
    if config.trunk == "linear":
        if x.ndim != 2 or x.shape[1] != config.input_dim:
            raise ValueError(f"linear trunk expects (N, {config.input_dim}) input, got {x.shape}")
    else:
        s = config.image_size
        if x.shape[1:] != (s, s, 3):
            raise ValueError(f"conv trunk expects (N, {s}, {s}, 3) input, got {x.shape}")


def dropout_mask(rng: np.random.Generator, shape, p: float) -> np.ndarray:
    """Inverted-dropout mask: 0 with probability p, 1/(1-p) otherwise."""
    if p == 0:
        return np.ones(shape)
    return (rng.random(shape) >= p) / (1.0 - p)


def _forward(net: Network, x, training, mask):
    cfg, P = net.config, net.params
    x = np.asarray(x, dtype=np.float64)
    _check_input(cfg, x)
    cache = {}
    if cfg.trunk == "linear":
        z, cache["dense"] = layers.dense_forward(x, P["trunk.W"], P["trunk.b"])
        h, cache["relu"] = layers.relu_forward(z)
    else:
        z, cache["conv"] = layers.conv3x3_forward(x, P["trunk.W"], P["trunk.b"])
        a, cache["relu"] = layers.relu_forward(z)
        pooled, cache["pool"] = layers.avgpool_forward(a)
        cache["pooled_shape"] = pooled.shape
        h = pooled.reshape(len(x), -1)
    new_buffers = dict(net.buffers)
    if cfg.use_batchnorm:
        h, cache["bn"], rm, rv = layers.batchnorm_forward(
            h, P["bn.gamma"], P["bn.beta"], net.buffers["bn.running_mean"],
            net.buffers["bn.running_var"], training)
        new_buffers = {"bn.running_mean": rm, "bn.running_var": rv}
    if training and cfg.dropout_p > 0:
        if mask is None:
            raise ValueError("training-mode forward with dropout needs a mask")
        h = h * mask
        cache["mask"] = mask
    cache["features"] = h
    if cfg.variant == "Mv1":
        logits = np.concatenate([h @ P[f"head.{t}.W"] + P[f"head.{t}.b"] for t in TASKS], axis=1)
    else:
        logits = h @ P["head.W"] + P["head.b"]
    return logits, cache, new_buffers


def _backward(net: Network, dlogits, cache, frozen_trunk=False, need_input=False):
    cfg, P = net.config, net.params
    grads: dict[str, np.ndarray] = {}
    h = cache["features"]
    if cfg.variant == "Mv1":
        dh = np.zeros_like(h)
        for i, t in enumerate(TASKS):
            d = dlogits[:, i:i + 1]
            grads[f"head.{t}.W"] = h.T @ d
            grads[f"head.{t}.b"] = d.sum(axis=0)
            dh += d @ P[f"head.{t}.W"].T
    else:
        grads["head.W"] = h.T @ dlogits
        grads["head.b"] = dlogits.sum(axis=0)
        dh = dlogits @ P["head.W"].T
    if "mask" in cache:
        dh = dh * cache["mask"]
    if cfg.use_batchnorm:
        dh, grads["bn.gamma"], grads["bn.beta"] = layers.batchnorm_backward(dh, cache["bn"])
    if frozen_trunk and not need_input:
        for k in net.trunk_keys():
            grads[k] = np.zeros_like(P[k])
        return grads, None
    dx = None
    if cfg.trunk == "linear":
        dz = layers.relu_backward(dh, cache["relu"])
        dx, gw, gb = layers.dense_backward(dz, cache["dense"], P["trunk.W"])
    else:
        dpool = dh.reshape(cache["pooled_shape"])
        da = layers.avgpool_backward(dpool, cache["pool"])
        dz = layers.relu_backward(da, cache["relu"])
        dx, gw, gb = layers.conv3x3_backward(dz, cache["conv"], P["trunk.W"])
    if frozen_trunk:
        gw, gb = np.zeros_like(gw), np.zeros_like(gb)
    grads["trunk.W"], grads["trunk.b"] = gw, gb
    return grads, dx


def forward(net: Network, x, training: bool = False, mask: np.ndarray | None = None) -> np.ndarray:
    """Head probabilities: sigmoid columns, or a softmax row for the age head."""
    logits, _, _ = _forward(net, x, training, mask)
    if net.config.variant == "Age":
        return layers.softmax(logits)
    return layers.sigmoid(logits)


def _objective(net: Network, logits, targets, spec: LossSpec):
    cfg = net.config
    if cfg.variant == "Age":
        cw = spec.class_weights if spec.class_weights is not None else np.ones(N_AGE_BINS)
        return softmax_objective(logits, np.asarray(targets, dtype=int), cw)
    y = np.asarray(targets, dtype=np.float64).reshape(logits.shape)
    alpha, beta = sigmoid_coefficients(spec, cfg.output_width)
    return sigmoid_objective(logits, y, alpha, beta)


def loss_value(net: Network, x, targets, spec: LossSpec, training: bool = False,
               mask: np.ndarray | None = None) -> float:
    logits, _, _ = _forward(net, x, training, mask)
    return _objective(net, logits, targets, spec)[0]


def loss_and_grad(net: Network, x, targets, spec: LossSpec, *, training: bool = True,
                  mask: np.ndarray | None = None, frozen_trunk: bool = False):
    """Loss, exact parameter gradients and the updated batch-norm buffers.

    Frozen trunk parameters get exactly-zero gradients. ``net`` is not modified.
    """
    logits, cache, new_buffers = _forward(net, x, training, mask)
    loss, dlogits, _ = _objective(net, logits, targets, spec)
    grads, _ = _backward(net, dlogits, cache, frozen_trunk=frozen_trunk)
    return loss, grads, new_buffers


def input_gradient(net: Network, x, output_index: int) -> np.ndarray:
    """d (sum of output probability ``output_index``) / d input, inference mode."""
    logits, cache, _ = _forward(net, x, False, None)
    if net.config.variant == "Age":
        p = layers.softmax(logits)
        k = output_index
        dlogits = -p * p[:, [k]]
        dlogits[:, k] += p[:, k]
    else:
        p = layers.sigmoid(logits)
        dlogits = np.zeros_like(p)
        dlogits[:, output_index] = p[:, output_index] * (1 - p[:, output_index])
    _, dx = _backward(net, dlogits, cache, need_input=True)
    return dx


def targets_for(config: ModelConfig, manifest: DatasetManifest) -> np.ndarray:
    if config.variant in ("Mv1", "Mv2"):
        return manifest.labels().astype(np.float64)
    if config.variant == "ST":
        t = TASKS.index(config.task)
        return manifest.labels()[:, [t]].astype(np.float64)
    if config.variant == "Sex":
        return np.array([[c.sex] for c in manifest.cases], dtype=np.float64).reshape(-1, 1)
    return np.array([c.age_bin for c in manifest.cases], dtype=int)


def clone_config(config: ModelConfig, **changes) -> ModelConfig:
    return dataclasses.replace(config, **changes)
