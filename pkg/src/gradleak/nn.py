"""Model definitions with mask-parameterized dropout and client gradients.

A :class:`ModelSpec` is a flat list of layer descriptors.  The forward pass
builds autodiff nodes, so model gradients stay differentiable when
requested with ``create_graph=True``.  Dropout follows inverted-dropout
semantics: in train mode activations are multiplied elementwise by a
per-sample mask and rescaled by 1/(1-p); in eval mode the layer is the
identity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from gradleak import autodiff as ad
from gradleak.autodiff import Graph, Node, backward

GELU_C = math.sqrt(2.0 / math.pi)


@dataclass(frozen=True)
class Dense:
    in_dim: int
    out_dim: int
    bias: bool = True


@dataclass(frozen=True)
class Activation:
    kind: str  # "gelu" | "sigmoid"


@dataclass(frozen=True)
class Dropout:
    rate: float
    index: int  # 1-based position among the model's dropout layers


@dataclass(frozen=True)
class Conv:
    in_ch: int
    out_ch: int
    kernel: int
    stride: int
    pad: int


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class ModelSpec:
    name: str
    layers: tuple
    input_shape: tuple[int, ...]  # (C, H, W)
    num_classes: int

    def __post_init__(self):
        indices = []
        for layer in self.layers:
            if isinstance(layer, Dropout):
                if not 0.0 <= layer.rate < 1.0:
                    raise ValueError(f"dropout rate {layer.rate} outside [0, 1)")
                indices.append(layer.index)
        if indices != sorted(indices) or len(set(indices)) != len(indices):
            raise ValueError("dropout layer indices must be unique and ordered")
        last = self.layers[-1] if self.layers else None
        if not (isinstance(last, Dense) and last.out_dim == self.num_classes):
            raise ValueError("final layer must be dense with num_classes outputs")

    def dropout_layers(self) -> list[Dropout]:
        return [l for l in self.layers if isinstance(l, Dropout)]

    def dropout_widths(self) -> dict[int, int]:
        """Feature width seen by each dropout layer, keyed by its index."""
        widths = {}
        shape = self.input_shape
        for layer in self.layers:
            if isinstance(layer, Flatten):
                shape = (int(np.prod(shape)),)
            elif isinstance(layer, Dense):
                shape = (layer.out_dim,)
            elif isinstance(layer, Conv):
                _, h, w = shape
                oh = (h + 2 * layer.pad - layer.kernel) // layer.stride + 1
                ow = (w + 2 * layer.pad - layer.kernel) // layer.stride + 1
                shape = (layer.out_ch, oh, ow)
            elif isinstance(layer, Dropout):
                if len(shape) != 1:
                    raise ValueError("dropout requires flattened 2-D features")
                widths[layer.index] = shape[0]
        return widths

    def rate(self) -> float:
        rates = {l.rate for l in self.dropout_layers()}
        if len(rates) > 1:
            raise ValueError("mixed per-layer dropout rates are not supported")
        return rates.pop() if rates else 0.0


# ---------------------------------------------------------------------------
# parameters

@dataclass
class ParameterSet:
    """Ordered per-layer buffers with a fixed flat layout.

    Layer order, weights before biases, row-major buffers.  The layout
    table is shared with :class:`GradientVector` so gradient segments can
    be addressed by name.
    """

    names: tuple[str, ...]
    arrays: tuple[np.ndarray, ...]

    def layout(self) -> tuple[tuple[str, int, tuple[int, ...]], ...]:
        table = []
        offset = 0
        for name, arr in zip(self.names, self.arrays):
            table.append((name, offset, arr.shape))
            offset += arr.size
        return tuple(table)

    @property
    def size(self) -> int:
        return sum(a.size for a in self.arrays)

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.reshape(-1) for a in self.arrays])

    def unflatten(self, vec: np.ndarray) -> "ParameterSet":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.size,):
            raise ValueError(f"expected flat vector of length {self.size}")
        arrays = []
        for _, offset, shape in self.layout():
            n = int(np.prod(shape))
            arrays.append(vec[offset:offset + n].reshape(shape).copy())
        return ParameterSet(self.names, tuple(arrays))

    def copy(self) -> "ParameterSet":
        return ParameterSet(self.names, tuple(a.copy() for a in self.arrays))


@dataclass
class GradientVector:
    """Flat parameter gradient sharing the ParameterSet layout."""

    values: np.ndarray
    layout: tuple[tuple[str, int, tuple[int, ...]], ...]

    def segment(self, name: str) -> np.ndarray:
        for n, offset, shape in self.layout:
            if n == name:
                size = int(np.prod(shape))
                return self.values[offset:offset + size].reshape(shape)
        raise KeyError(name)


def parameter_names(spec: ModelSpec) -> tuple[str, ...]:
    names = []
    k = 0
    for layer in spec.layers:
        if isinstance(layer, Dense):
            names.append(f"dense{k}.weight")
            if layer.bias:
                names.append(f"dense{k}.bias")
            k += 1
        elif isinstance(layer, Conv):
            names.append(f"conv{k}.weight")
            names.append(f"conv{k}.bias")
            k += 1
    return tuple(names)


def init_params(spec: ModelSpec, rng: np.random.Generator) -> ParameterSet:
    """Random init: N(0, 1/sqrt(fan_in)) weights, zero biases."""
    arrays = []
    for layer in spec.layers:
        if isinstance(layer, Dense):
            scale = 1.0 / math.sqrt(layer.in_dim)
            arrays.append(rng.standard_normal((layer.in_dim, layer.out_dim)) * scale)
            if layer.bias:
                arrays.append(np.zeros(layer.out_dim))
        elif isinstance(layer, Conv):
            fan_in = layer.in_ch * layer.kernel * layer.kernel
            scale = 1.0 / math.sqrt(fan_in)
            arrays.append(rng.standard_normal((fan_in, layer.out_ch)) * scale)
            arrays.append(np.zeros(layer.out_ch))
    return ParameterSet(parameter_names(spec), tuple(arrays))


def output_bias_name(spec: ModelSpec) -> str:
    last = spec.layers[-1]
    if not last.bias:
        raise ValueError("output layer has no bias")
    dense_count = sum(1 for l in spec.layers if isinstance(l, (Dense, Conv)))
    return f"dense{dense_count - 1}.bias"


# ---------------------------------------------------------------------------
# forward pass

def param_leaves(graph: Graph, params: ParameterSet, requires_grad: bool = True
                 ) -> list[Node]:
    return [graph.leaf(a, requires_grad=requires_grad, copy=False)
            for a in params.arrays]


def _gelu(z: Node) -> Node:
    # tanh approximation; higher derivatives come from the graph for free
    inner = ad.mul(ad.add(z, ad.mul(ad.mul(z, ad.square(z)), 0.044715)), GELU_C)
    return ad.mul(ad.mul(z, ad.add(ad.tanh(inner), 1.0)), 0.5)


def _sigmoid(z: Node) -> Node:
    # 0.5*(1+tanh(z/2)) saturates gracefully at extreme inputs
    return ad.mul(ad.add(ad.tanh(ad.mul(z, 0.5)), 1.0), 0.5)


def _bias_add(h: Node, b: Node) -> Node:
    rows = h.shape[0]
    ones = h.graph.constant(np.ones((rows, 1)))
    return ad.add(h, ad.matmul(ones, ad.reshape(b, (1, b.shape[0]))))


def _pad_hw(x: Node, pad: int) -> Node:
    """Zero-pad the two trailing spatial axes of a (B, C, H, W) node."""
    if pad == 0:
        return x
    b, c, h, w = x.shape
    g = x.graph
    rows = g.constant(np.zeros((b, c, pad, w)))
    x = ad.concat([rows, x, rows], axis=2)
    cols = g.constant(np.zeros((b, c, h + 2 * pad, pad)))
    return ad.concat([cols, x, cols], axis=3)


def _im2col_indices(b, c, h, w, kernel, stride):
    """Flat gather indices turning (B,C,H,W) into (B*OH*OW, C*K*K)."""
    oh = (h - kernel) // stride + 1
    ow = (w - kernel) // stride + 1
    i0 = np.repeat(np.arange(kernel), kernel)
    j0 = np.tile(np.arange(kernel), kernel)
    base = (i0[:, None] * w + j0[:, None]).reshape(-1)          # (K*K,)
    chan = np.arange(c)[:, None] * (h * w) + base[None, :]      # (C, K*K)
    starts = (np.arange(oh)[:, None] * stride * w
              + np.arange(ow)[None, :] * stride).reshape(-1)    # (OH*OW,)
    per_image = starts[:, None] + chan.reshape(-1)[None, :]     # (OH*OW, C*K*K)
    batch = np.arange(b)[:, None, None] * (c * h * w)
    idx = (batch + per_image[None, :, :]).reshape(b * oh * ow, c * kernel * kernel)
    return idx, oh, ow


def _conv_forward(x: Node, layer: Conv, weight: Node, bias: Node) -> Node:
    b, c, h, w = x.shape
    if c != layer.in_ch:
        raise ValueError(f"conv expects {layer.in_ch} channels, got {c}")
    xp = _pad_hw(x, layer.pad)
    _, _, hp, wp = xp.shape
    idx, oh, ow = _im2col_indices(b, c, hp, wp, layer.kernel, layer.stride)
    patches = ad.take(xp, idx)
    out2d = _bias_add(ad.matmul(patches, weight), bias)
    out = ad.reshape(out2d, (b, oh, ow, layer.out_ch))
    return ad.transpose(out, (0, 3, 1, 2))


def forward(graph: Graph, spec: ModelSpec, params: Sequence[Node], x: Node,
            masks: Mapping[int, Node] | None = None, mode: str = "train") -> Node:
    """Run the model, returning logits of shape (B, num_classes).

    In train mode every dropout layer needs a mask node of shape (B, n_i)
    under ``masks[layer.index]``; eval mode ignores masks entirely.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    if x.shape[1:] != spec.input_shape:
        raise ValueError(f"input shape {x.shape[1:]} != spec {spec.input_shape}")
    batch = x.shape[0]
    h = x
    pi = 0
    for layer in spec.layers:
        if isinstance(layer, Flatten):
            h = ad.reshape(h, (batch, int(np.prod(h.shape[1:]))))
        elif isinstance(layer, Dense):
            weight = params[pi]
            pi += 1
            h = ad.matmul(h, weight)
            if layer.bias:
                h = _bias_add(h, params[pi])
                pi += 1
        elif isinstance(layer, Conv):
            h = _conv_forward(h, layer, params[pi], params[pi + 1])
            pi += 2
        elif isinstance(layer, Activation):
            h = _gelu(h) if layer.kind == "gelu" else _sigmoid(h)
        elif isinstance(layer, Dropout):
            if mode == "eval":
                continue
            if masks is None or layer.index not in masks:
                raise ValueError(f"train mode requires a mask for dropout "
                                 f"layer {layer.index}")
            m = masks[layer.index]
            if m.shape != h.shape:
                raise ValueError(f"mask shape {m.shape} != features {h.shape}")
            h = ad.mul(h, m)
            if layer.rate > 0.0:
                h = ad.mul(h, 1.0 / (1.0 - layer.rate))
        else:
            raise ValueError(f"unknown layer {layer!r}")
    return h


def _row_broadcast(col: Node, width: int) -> Node:
    ones = col.graph.constant(np.ones((1, width)))
    return ad.matmul(col, ones)


def log_softmax(logits: Node) -> Node:
    b, c = logits.shape
    g = logits.graph
    shift = g.constant(logits.values.max(axis=1, keepdims=True))
    z = ad.sub(logits, _row_broadcast(shift, c))
    ez = ad.exp(z)
    row_sum = ad.matmul(ez, g.constant(np.ones((c, 1))))
    return ad.sub(z, _row_broadcast(ad.log(row_sum), c))


def softmax(logits: Node) -> Node:
    return ad.exp(log_softmax(logits))


def cross_entropy(logits: Node, target: Node) -> Node:
    """Mean over the batch of -sum(target * log softmax(logits))."""
    if logits.shape != target.shape:
        raise ValueError(f"logits {logits.shape} vs targets {target.shape}")
    row_sums = target.values.sum(axis=1)
    if np.max(np.abs(row_sums - 1.0)) > 1e-9:
        raise ValueError("target rows must sum to 1 within 1e-9")
    b = logits.shape[0]
    total = ad.sum_all(ad.mul(target, log_softmax(logits)))
    return ad.mul(total, -1.0 / b)


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


# ---------------------------------------------------------------------------
# client-side gradient computation

def sample_client_masks(spec: ModelSpec, batch: int, rng: np.random.Generator):
    """Binary keep masks, probability 1-p per sample and per element."""
    from gradleak.masks import MaskSet

    layers = {}
    widths = spec.dropout_widths()
    for layer in spec.dropout_layers():
        n = widths[layer.index]
        if layer.rate == 0.0:
            layers[layer.index] = np.ones((batch, n))
        else:
            keep = rng.random((batch, n)) < (1.0 - layer.rate)
            layers[layer.index] = keep.astype(np.float64)
    return MaskSet(layers=layers, kind="binary", rate=spec.rate())


def client_gradient(spec: ModelSpec, params: ParameterSet, x: np.ndarray,
                    y: np.ndarray, rng: np.random.Generator):
    """One local training step: sampled masks, train-mode forward, flat grad.

    Returns the flattened loss gradient w.r.t. all parameters together with
    the sampled masks (kept for the well-informed attacker and for mask
    distance evaluation).
    """
    x = np.asarray(x, dtype=np.float64)
    batch = x.shape[0]
    mask_set = sample_client_masks(spec, batch, rng)
    graph = Graph()
    leaves = param_leaves(graph, params, requires_grad=True)
    xn = graph.constant(x)
    mask_nodes = {i: graph.constant(m) for i, m in mask_set.layers.items()}
    logits = forward(graph, spec, leaves, xn, mask_nodes, mode="train")
    target = graph.constant(one_hot(y, spec.num_classes))
    loss = cross_entropy(logits, target)
    grads = backward(loss, leaves, create_graph=False)
    flat = np.concatenate([grads[leaf].values.reshape(-1) for leaf in leaves])
    return GradientVector(flat, params.layout()), mask_set


# ---------------------------------------------------------------------------
# model builders

def build_mlp(input_dim: int = 784, hidden_width: int = 512, depth: int = 3,
              num_classes: int = 10, p: float = 0.25,
              input_shape: tuple[int, ...] | None = None) -> ModelSpec:
    """dense -> GeLU -> dropout stacks followed by a dense classifier."""
    if input_shape is None:
        side = math.isqrt(input_dim)
        input_shape = (1, side, side) if side * side == input_dim else (1, 1, input_dim)
    if int(np.prod(input_shape)) != input_dim:
        raise ValueError("input_shape does not match input_dim")
    layers: list = [Flatten()]
    prev = input_dim
    for d in range(depth):
        layers.append(Dense(prev, hidden_width))
        layers.append(Activation("gelu"))
        layers.append(Dropout(p, index=d + 1))
        prev = hidden_width
    layers.append(Dense(prev, num_classes))
    name = f"mlp-{input_dim}-{hidden_width}x{depth}-{num_classes}-p{p:g}"
    return ModelSpec(name, tuple(layers), tuple(input_shape), num_classes)


def build_lenet_lite(input_shape: tuple[int, int, int] = (1, 28, 28),
                     num_classes: int = 10, p: float = 0.25) -> ModelSpec:
    """Two strided 5x5 sigmoid conv layers, then dropout before the classifier."""
    c, h, w = input_shape
    width = 12
    layers: list = [
        Conv(c, width, kernel=5, stride=2, pad=2),
        Activation("sigmoid"),
        Conv(width, width, kernel=5, stride=2, pad=2),
        Activation("sigmoid"),
        Flatten(),
    ]
    oh, ow = h, w
    for _ in range(2):
        oh = (oh + 4 - 5) // 2 + 1
        ow = (ow + 4 - 5) // 2 + 1
    flat = width * oh * ow
    layers.append(Dropout(p, index=1))
    layers.append(Dense(flat, num_classes))
    name = f"lenet-{c}x{h}x{w}-{num_classes}-p{p:g}"
    return ModelSpec(name, tuple(layers), tuple(input_shape), num_classes)


# ---------------------------------------------------------------------------
# checkpoint format: one text header line, then little-endian f64 buffers

def save_checkpoint(path, spec: ModelSpec, seed: int, params: ParameterSet) -> None:
    header = f"gradleak-params {spec.name} seed={seed} count={params.size}\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(params.flatten().astype("<f8").tobytes())


def load_checkpoint(path, spec: ModelSpec) -> tuple[ParameterSet, int]:
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii").strip()
        payload = fh.read()
    fields = header.split()
    if len(fields) != 4 or fields[0] != "gradleak-params":
        raise ValueError(f"not a gradleak checkpoint: {header!r}")
    if fields[1] != spec.name:
        raise ValueError(f"checkpoint is for {fields[1]}, expected {spec.name}")
    seed = int(fields[2].removeprefix("seed="))
    count = int(fields[3].removeprefix("count="))
    vec = np.frombuffer(payload, dtype="<f8")
    if vec.size != count:
        raise ValueError("checkpoint payload truncated")
    template = init_params(spec, np.random.default_rng(0))
    return template.unflatten(vec), seed
