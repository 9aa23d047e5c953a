"""Dropout-mask algebra: sampling, attacker initialization, distances.

Client masks are binary keep/drop patterns; the attacker's masks are fuzzy
values in [0, 1] that get optimized jointly with the dummy data.  Norms in
the throughput formulas are read as elementwise sums, which makes
1 - |psi|/n the mask's empirical keep rate.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from gradleak import autodiff as ad
from gradleak.autodiff import Node
from gradleak.nn import GradientVector, ModelSpec, Dense, Dropout


@dataclass
class MaskSet:
    """Per-dropout-layer mask matrices of shape (B, n_i), keyed by layer index."""

    layers: dict[int, np.ndarray]
    kind: str  # "binary" | "fuzzy"
    rate: float

    def __post_init__(self):
        if self.kind not in ("binary", "fuzzy"):
            raise ValueError(f"unknown mask kind {self.kind!r}")
        self.layers = {int(i): np.asarray(m, dtype=np.float64)
                       for i, m in sorted(self.layers.items())}
        for i, m in self.layers.items():
            if m.ndim != 2:
                raise ValueError(f"mask for layer {i} must be 2-D (B, n)")
            if self.kind == "binary":
                if not np.all((m == 0.0) | (m == 1.0)):
                    raise ValueError(f"binary mask for layer {i} has non-0/1 entries")
            elif np.min(m) < 0.0 or np.max(m) > 1.0:
                raise ValueError(f"fuzzy mask for layer {i} outside [0, 1]")

    @property
    def batch(self) -> int:
        return next(iter(self.layers.values())).shape[0]

    def copy(self) -> "MaskSet":
        return MaskSet({i: m.copy() for i, m in self.layers.items()},
                       self.kind, self.rate)

    def all_ones(self) -> bool:
        return all(np.all(m == 1.0) for m in self.layers.values())


@dataclass(frozen=True)
class MaskInitScheme:
    """How the attacker seeds its fuzzy masks before optimization."""

    variant: str  # bernoulli_keep | normal_width | normal_fixed | analytic

    VARIANTS = ("bernoulli_keep", "normal_width", "normal_fixed", "analytic")

    def __post_init__(self):
        if self.variant not in self.VARIANTS:
            raise ValueError(f"unknown mask init scheme {self.variant!r}")


def ones_masks(spec: ModelSpec, batch: int) -> MaskSet:
    widths = spec.dropout_widths()
    return MaskSet({i: np.ones((batch, n)) for i, n in widths.items()},
                   "binary", spec.rate())


def init_attacker_masks(scheme: MaskInitScheme, spec: ModelSpec, batch: int,
                        rng: np.random.Generator,
                        client_grad: GradientVector | None = None) -> MaskSet:
    """Sample starting masks per scheme, clipped to [0, 1], fuzzy kind."""
    widths = spec.dropout_widths()
    if not widths:
        raise ValueError("model has no dropout layers")
    p = spec.rate()
    layers = {}
    for i, n in sorted(widths.items()):
        if scheme.variant == "bernoulli_keep":
            vals = (rng.random((batch, n)) < (1.0 - p)).astype(np.float64)
        elif scheme.variant == "normal_width":
            vals = rng.normal(1.0 - p, 1.0 / np.sqrt(n), size=(batch, n))
        elif scheme.variant == "normal_fixed":
            vals = rng.normal(0.5, 0.25, size=(batch, n))
        elif scheme.variant == "analytic":
            if client_grad is None:
                raise ValueError("analytic mask init needs the client gradient")
            if batch != 1:
                raise ValueError("analytic mask reconstruction requires batch size 1")
            vals = analytic_mask_reconstruction(client_grad, spec, i)[None, :]
        layers[i] = np.clip(vals, 0.0, 1.0)
    return MaskSet(layers, "fuzzy", p)


def mask_regularizer(mask_nodes: Mapping[int, Node], p: float) -> Node:
    """Differentiable sum over layers of |p - (1 - sum(psi)/(B*n))|."""
    total = None
    for i in sorted(mask_nodes):
        m = mask_nodes[i]
        size = float(np.prod(m.shape))
        throughput = ad.div(ad.sum_all(m), size)
        term = ad.abs_(ad.sub(p, ad.sub(1.0, throughput)))
        total = term if total is None else ad.add(total, term)
    if total is None:
        raise ValueError("no masks to regularize")
    return total


def trd(masks: MaskSet, p: float) -> float:
    """Throughput-rate distance, the regularizer formula as a plain number."""
    terms = [abs(p - (1.0 - float(np.sum(m)) / m.size))
             for m in masks.layers.values()]
    return float(np.sum(terms))


def mmd(masks_a: MaskSet, masks_b: MaskSet) -> float:
    """Mean mask distance, normalized per element."""
    if sorted(masks_a.layers) != sorted(masks_b.layers):
        raise ValueError("mask sets cover different dropout layers")
    terms = []
    for i, ma in masks_a.layers.items():
        mb = masks_b.layers[i]
        if ma.shape != mb.shape:
            raise ValueError(f"mask shapes differ at layer {i}: "
                             f"{ma.shape} vs {mb.shape}")
        terms.append(float(np.sum((ma - mb) ** 2)) / ma.size)
    return float(np.mean(terms))


def clip_masks(masks: MaskSet) -> MaskSet:
    clipped = {i: np.clip(m, 0.0, 1.0) for i, m in masks.layers.items()}
    return MaskSet(clipped, masks.kind, masks.rate)


def _following_dense_weight(spec: ModelSpec, layer_index: int) -> str:
    """Name of the first dense weight after the requested dropout layer."""
    seen = False
    k = 0
    for layer in spec.layers:
        if isinstance(layer, Dropout) and layer.index == layer_index:
            seen = True
        if isinstance(layer, (Dense,)):
            if seen:
                return f"dense{k}.weight"
            k += 1
        elif layer.__class__.__name__ == "Conv":
            if seen:
                raise ValueError("dropout layer is not followed by a dense layer")
            k += 1
    raise ValueError(f"no dense layer follows dropout layer {layer_index}")


def analytic_mask_reconstruction(grad: GradientVector, spec: ModelSpec,
                                 layer_index: int,
                                 threshold: float = 1e-12) -> np.ndarray:
    """Recover one binary mask row from the following dense weight gradient.

    Valid for batch size 1 and non-ReLU activations only: a dropped neuron
    zeroes its input row of the downstream weight gradient exactly.  A
    neuron whose gradient vanishes coincidentally yields a false 0.
    """
    name = _following_dense_weight(spec, layer_index)
    wgrad = grad.segment(name)  # (n_in, n_out); row k belongs to input k
    width = spec.dropout_widths()[layer_index]
    if wgrad.shape[0] != width:
        raise ValueError(f"gradient rows {wgrad.shape[0]} != mask width {width}")
    row_mass = np.abs(wgrad).sum(axis=1)
    return (row_mass > threshold).astype(np.float64)


def save_masks_csv(masks: MaskSet, directory, stem: str) -> list[str]:
    """One CSV per layer, one row per sample."""
    import os

    paths = []
    for i, m in masks.layers.items():
        path = os.path.join(directory, f"{stem}_layer{i}.csv")
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([f"unit{k}" for k in range(m.shape[1])])
            for row in m:
                writer.writerow([repr(float(v)) for v in row])
        paths.append(path)
    return paths
