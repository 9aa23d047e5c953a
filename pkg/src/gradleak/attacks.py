"""Iterative gradient inversion attackers.

Four variants share one optimization loop and differ only in which dropout
masks enter the dummy forward pass:

* ``ig_eval``   identity masks (inference-mode model),
* ``ig_train``  freshly resampled random masks every iteration,
* ``wiig``      the client's true masks (well-informed attacker),
* ``dia``       fuzzy masks optimized jointly with the dummy data.

The dummy gradient is produced with ``create_graph=True`` so the matching
loss can be differentiated through it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from gradleak import autodiff as ad
from gradleak.autodiff import Graph, Node, backward
from gradleak.masks import (MaskInitScheme, MaskSet, clip_masks,
                            init_attacker_masks, mask_regularizer)
from gradleak.nn import (GradientVector, ModelSpec, ParameterSet, cross_entropy,
                         forward, one_hot, output_bias_name, param_leaves,
                         sample_client_masks, softmax)

VARIANTS = ("ig_train", "ig_eval", "wiig", "dia")
NORM_EPS = 1e-12


@dataclass(frozen=True)
class AttackConfig:
    variant: str = "ig_eval"
    tv_weight: float = 1e-5
    mask_weight: float = 0.0
    mask_init: MaskInitScheme = MaskInitScheme("bernoulli_keep")
    lr: float = 0.1
    lr_decay_factor: float = 0.1
    lr_plateau_window: int = 800
    loss_floor: float = 1e-5
    stall_window: int = 4000
    max_iters: int = 20000
    label_mode: str = "analytic"  # analytic | joint
    per_layer_cosine: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown attack variant {self.variant!r}")
        if self.label_mode not in ("analytic", "joint"):
            raise ValueError(f"unknown label mode {self.label_mode!r}")
        if self.mask_weight and self.variant != "dia":
            raise ValueError("mask_weight is only meaningful for the dia variant")
        if self.tv_weight < 0 or self.mask_weight < 0:
            raise ValueError("regularizer weights must be nonnegative")


@dataclass
class AttackResult:
    x: np.ndarray                 # reconstructed batch, normalized space
    y: np.ndarray                 # label indices (analytic) or soft vectors (joint)
    masks: MaskSet | None         # final fuzzy masks for dia, else None
    loss_trace: list[float]       # per-iteration gradient-distance values
    iterations_run: int
    stop_reason: str              # floor | stall | max | divergence
    metrics: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# loss building blocks

def cosine_distance(a: Node, b: Node) -> Node:
    """1 - <a,b> / (|a| |b|), with an epsilon guard inside each norm."""
    if a.shape != b.shape:
        raise ValueError(f"gradient lengths differ: {a.shape} vs {b.shape}")
    dot = ad.sum_all(ad.mul(a, b))
    na = ad.sqrt(ad.add(ad.sum_all(ad.square(a)), NORM_EPS))
    nb = ad.sqrt(ad.add(ad.sum_all(ad.square(b)), NORM_EPS))
    return ad.sub(1.0, ad.div(dot, ad.mul(na, nb)))


def total_variation(x: Node) -> Node:
    """Anisotropic L1 total variation of a (B, C, H, W) batch, mean over B."""
    if x.values.ndim != 4 or x.shape[2] < 2 or x.shape[3] < 2:
        raise ValueError("total variation needs a (B, C, H, W) batch with H, W >= 2")
    batch = x.shape[0]
    dx = ad.sub(x[:, :, :, 1:], x[:, :, :, :-1])
    dy = ad.sub(x[:, :, 1:, :], x[:, :, :-1, :])
    total = ad.add(ad.sum_all(ad.abs_(dx)), ad.sum_all(ad.abs_(dy)))
    return ad.mul(total, 1.0 / batch)


def reconstruct_labels(client_grad: GradientVector, spec: ModelSpec,
                       batch: int = 1) -> np.ndarray:
    """Labels from the output-layer bias gradient.

    For cross-entropy with softmax the bias gradient is softmax - onehot
    summed over the batch, so true classes show up as the most negative
    entries.  Exact for batch size 1; batches are assigned greedily one
    class per sample and assume disjoint classes.
    """
    bias_grad = client_grad.segment(output_bias_name(spec))
    order = np.argsort(bias_grad)
    negatives = [int(c) for c in order[:batch] if bias_grad[c] < 0.0]
    if len(negatives) < batch:
        raise ValueError("output bias gradient has too few negative entries; "
                         "not a softmax cross-entropy gradient?")
    return np.array(sorted(negatives), dtype=np.int64)


class Adam:
    """Standard bias-corrected Adam over a list of numpy variables."""

    def __init__(self, variables: Sequence[np.ndarray], lr: float,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.lr = float(lr)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(v) for v in variables]
        self.v = [np.zeros_like(v) for v in variables]

    def step(self, variables: Sequence[np.ndarray],
             grads: Sequence[np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for i, (var, g) in enumerate(zip(variables, grads)):
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * np.square(g)
            m_hat = self.m[i] / (1 - b1 ** self.t)
            v_hat = self.v[i] / (1 - b2 ** self.t)
            var -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def parameter_count(config: AttackConfig, spec: ModelSpec, batch: int) -> int:
    """Number of scalars the attacker optimizes."""
    count = batch * int(np.prod(spec.input_shape))
    if config.variant == "dia":
        count += batch * sum(spec.dropout_widths().values())
    if config.label_mode == "joint":
        count += batch * spec.num_classes
    return count


# ---------------------------------------------------------------------------
# the attack loop

def _gradient_distance(dummy_parts: Sequence[Node], client: GradientVector,
                       per_layer: bool) -> Node:
    graph = dummy_parts[0].graph
    if not per_layer:
        dummy = ad.concat([ad.reshape(p, (p.values.size,)) for p in dummy_parts])
        return cosine_distance(dummy, graph.leaf(client.values, copy=False))
    total = None
    for part, (_, offset, shape) in zip(dummy_parts, client.layout):
        size = int(np.prod(shape))
        ref = graph.leaf(client.values[offset:offset + size], copy=False)
        term = cosine_distance(ad.reshape(part, (size,)), ref)
        total = term if total is None else ad.add(total, term)
    return total


def run_attack(config: AttackConfig, spec: ModelSpec, params: ParameterSet,
               client_grad: GradientVector, client_masks: MaskSet | None = None,
               rng: np.random.Generator | None = None, batch: int = 1,
               pixel_bounds: tuple[np.ndarray, np.ndarray] | None = None
               ) -> AttackResult:
    """Optimize dummy data (and masks, for dia) against a client gradient.

    ``pixel_bounds`` gives per-channel (low, high) limits of valid pixels in
    the model's normalized input space; when present the dummy image is
    projected into that box after every step, mirroring the mask clipping.
    """
    if rng is None:
        rng = np.random.default_rng(config.seed)
    if config.variant == "wiig":
        if client_masks is None:
            raise ValueError("wiig requires the client masks")
        batch = client_masks.batch
    if config.variant == "dia" and not spec.dropout_layers():
        raise ValueError("dia requires a model with dropout layers")

    p = spec.rate()
    num_classes = spec.num_classes
    x_var = rng.standard_normal((batch, *spec.input_shape))
    y_var = None
    labels = None
    if config.label_mode == "joint":
        y_var = rng.standard_normal((batch, num_classes))
    else:
        labels = reconstruct_labels(client_grad, spec, batch)
        target_const = one_hot(labels, num_classes)

    attack_masks: MaskSet | None = None
    if config.variant == "dia":
        attack_masks = init_attacker_masks(config.mask_init, spec, batch, rng,
                                           client_grad=client_grad)

    variables = [x_var]
    if y_var is not None:
        variables.append(y_var)
    mask_keys: list[int] = []
    if attack_masks is not None:
        mask_keys = sorted(attack_masks.layers)
        variables.extend(attack_masks.layers[i] for i in mask_keys)
    optimizer = Adam(variables, lr=config.lr)

    loss_trace: list[float] = []
    best = np.inf
    since_best = 0
    since_plateau_event = 0
    stop_reason = "max"

    for _ in range(config.max_iters):
        graph = Graph()
        leaves = param_leaves(graph, params, requires_grad=True)
        xn = graph.leaf(x_var, requires_grad=True, copy=False)

        if config.variant == "ig_eval":
            mode, mask_nodes = "eval", None
        elif config.variant == "wiig":
            mode = "train"
            mask_nodes = {i: graph.constant(m)
                          for i, m in client_masks.layers.items()}
        elif config.variant == "ig_train":
            mode = "train"
            fresh = sample_client_masks(spec, batch, rng)
            mask_nodes = {i: graph.constant(m) for i, m in fresh.layers.items()}
        else:  # dia
            mode = "train"
            mask_nodes = {i: graph.leaf(attack_masks.layers[i],
                                        requires_grad=True, copy=False)
                          for i in mask_keys}

        if y_var is not None:
            yn = graph.leaf(y_var, requires_grad=True, copy=False)
            target = softmax(yn)
        else:
            target = graph.constant(target_const)

        logits = forward(graph, spec, leaves, xn, mask_nodes, mode=mode)
        train_loss = cross_entropy(logits, target)
        theta_grads = backward(train_loss, leaves, create_graph=True)
        distance = _gradient_distance([theta_grads[l] for l in leaves],
                                      client_grad, config.per_layer_cosine)

        objective = distance
        if config.tv_weight > 0.0:
            objective = ad.add(objective, ad.mul(total_variation(xn),
                                                 config.tv_weight))
        if config.variant == "dia" and config.mask_weight > 0.0:
            reg = mask_regularizer(mask_nodes, p)
            objective = ad.add(objective, ad.mul(reg, config.mask_weight))

        d_value = distance.item()
        loss_trace.append(d_value)
        if not np.isfinite(d_value):
            stop_reason = "divergence"
            break
        if d_value < best:
            best = d_value
            since_best = 0
            since_plateau_event = 0
        else:
            since_best += 1
            since_plateau_event += 1
        if d_value < config.loss_floor:
            stop_reason = "floor"
            break
        if since_best >= config.stall_window:
            stop_reason = "stall"
            break

        wrt = [xn]
        if y_var is not None:
            wrt.append(yn)
        if config.variant == "dia":
            wrt.extend(mask_nodes[i] for i in mask_keys)
        grads = backward(objective, wrt, create_graph=False)
        grad_arrays = [grads[w].values for w in wrt]
        if any(not np.all(np.isfinite(ga)) for ga in grad_arrays):
            stop_reason = "divergence"
            break

        optimizer.step(variables, grad_arrays)
        # projection steps: Adam state stays unconstrained, values do not
        if pixel_bounds is not None:
            lo, hi = pixel_bounds
            np.clip(x_var, lo.reshape(1, -1, 1, 1), hi.reshape(1, -1, 1, 1),
                    out=x_var)
        if attack_masks is not None:
            for key in mask_keys:
                np.clip(attack_masks.layers[key], 0.0, 1.0,
                        out=attack_masks.layers[key])

        if since_plateau_event >= config.lr_plateau_window:
            optimizer.lr *= config.lr_decay_factor
            since_plateau_event = 0

    final_masks = None
    if attack_masks is not None:
        final_masks = clip_masks(MaskSet({i: attack_masks.layers[i]
                                          for i in mask_keys}, "fuzzy", p))
    if y_var is not None:
        y_out = _soft_labels(y_var)
    else:
        y_out = labels
    return AttackResult(x=x_var, y=y_out, masks=final_masks,
                        loss_trace=loss_trace, iterations_run=len(loss_trace),
                        stop_reason=stop_reason)


def _soft_labels(y_var: np.ndarray) -> np.ndarray:
    z = y_var - y_var.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)
