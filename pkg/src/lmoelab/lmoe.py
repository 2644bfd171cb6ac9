"""Language-guided mixture-of-experts block.

Queries are projected into the language space, compared with the class
embeddings by cosine similarity, and the similarity vector (not the raw
query) is fed to the router. Each query runs through its top-k routed
experts, weighted by the softmax routing weights, plus an always-on shared
expert.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import numkernel as nk
from .numkernel import Parameter, Tensor

LANGUAGE_GUIDED = "language_guided"
FEATURE_ROUTED = "feature_routed"


@dataclass(frozen=True)
class LMoEConfig:
    n_experts: int = 4
    top_k: int = 2
    query_dim: int = 256
    lang_dim: int = 512
    h_routed: int = 512
    h_shared: int = 1024
    router_mode: str = LANGUAGE_GUIDED
    renormalize: bool = False
    router_init: float = 1e-2

    def __post_init__(self):
        if not 1 <= self.top_k <= self.n_experts:
            raise ValueError(f"top_k={self.top_k} must lie in [1, n_experts={self.n_experts}]")
        for name in ("query_dim", "lang_dim", "h_routed", "h_shared"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.router_mode not in (LANGUAGE_GUIDED, FEATURE_ROUTED):
            raise ValueError(f"unknown router mode {self.router_mode!r}")


class Expert:
    """Two-layer ReLU map in -> hidden -> in."""

    def __init__(self, dim: int, hidden: int, rng: np.random.Generator, name: str):
        self.w1 = Parameter(rng.standard_normal((dim, hidden)) * np.sqrt(2.0 / dim), f"{name}.w1")
        self.b1 = Parameter(np.zeros(hidden), f"{name}.b1")
        self.w2 = Parameter(rng.standard_normal((hidden, dim)) * np.sqrt(1.0 / hidden), f"{name}.w2")
        self.b2 = Parameter(np.zeros(dim), f"{name}.b2")

    def __call__(self, x: Tensor) -> Tensor:
        return nk.linear(nk.relu(nk.linear(x, self.w1, self.b1)), self.w2, self.b2)

    def parameters(self) -> list[Parameter]:
        return [self.w1, self.b1, self.w2, self.b2]


class LMoELayer:
    def __init__(self, config: LMoEConfig, n_classes: int, rng: np.random.Generator, name: str = "lmoe"):
        self.config = config
        self.n_classes = n_classes
        D, d = config.query_dim, config.lang_dim
        self.proj_w = Parameter(rng.standard_normal((D, d)) / np.sqrt(D), f"{name}.proj_w")
        self.proj_b = Parameter(np.zeros(d), f"{name}.proj_b")
        router_in = n_classes if config.router_mode == LANGUAGE_GUIDED else D
        r = config.router_init
        self.router_w = Parameter(rng.uniform(-r, r, (router_in, config.n_experts)), f"{name}.router_w")
        self.router_b = Parameter(np.zeros(config.n_experts), f"{name}.router_b")
        self.experts = [Expert(D, config.h_routed, rng, f"{name}.expert{i}") for i in range(config.n_experts)]
        self.shared = Expert(D, config.h_shared, rng, f"{name}.shared")

    def parameters(self) -> list[Parameter]:
        ps = [self.proj_w, self.proj_b, self.router_w, self.router_b]
        for e in self.experts:
            ps += e.parameters()
        return ps + self.shared.parameters()


@dataclass
class RoutingDecision:
    weights: Tensor  # k x M, row-stochastic
    indices: np.ndarray  # k x top_k, descending weight
    selected: Tensor  # k x top_k
    n_experts: int

    @property
    def top_k(self) -> int:
        return self.indices.shape[1]

    def mask(self) -> np.ndarray:
        m = np.zeros(self.weights.shape)
        np.put_along_axis(m, self.indices, 1.0, axis=1)
        return m


def project_queries(Q: Tensor, layer: LMoELayer) -> Tensor:
    Q = nk.as_tensor(Q)
    if Q.ndim != 2 or Q.shape[1] != layer.config.query_dim:
        raise nk.ShapeError(f"queries of shape {Q.shape} do not match query_dim={layer.config.query_dim}")
    return nk.linear(Q, layer.proj_w, layer.proj_b)


def route(router_input: Tensor, layer: LMoELayer) -> RoutingDecision:
    """Softmax routing weights and top-k selection.

    ``router_input`` is the k x n similarity matrix in language-guided mode,
    or the raw k x D queries in feature-routed mode.
    """
    x = nk.as_tensor(router_input)
    width = layer.router_w.shape[0]
    if x.ndim != 2 or x.shape[1] != width:
        raise nk.ShapeError(f"router expects width {width}, got input shape {x.shape}")
    if layer.config.router_mode == LANGUAGE_GUIDED and np.abs(x.data).max(initial=0) > 1 + 1e-9:
        warnings.warn("similarity input to the router exceeds [-1, 1]", RuntimeWarning)
    W = nk.row_softmax(nk.linear(x, layer.router_w, layer.router_b))
    idx, _ = nk.topk_rows(W, layer.config.top_k)
    rows = np.arange(W.shape[0])[:, None]
    return RoutingDecision(W, idx, nk.take(W, (rows, idx)), layer.config.n_experts)


@dataclass
class LMoEOutput:
    refined: Tensor  # k x D
    routing: RoutingDecision
    projected: Tensor  # k x d, the language-space queries
    similarity: Tensor  # k x n


def lmoe_forward(Q, P_language, layer: LMoELayer) -> LMoEOutput:
    Q = nk.as_tensor(Q)
    P = nk.as_tensor(P_language)
    if P.shape[0] != layer.n_classes:
        raise nk.ShapeError(f"language matrix has {P.shape[0]} rows, layer expects {layer.n_classes}")
    q_hat = project_queries(Q, layer)
    sim = nk.cosine_similarity(q_hat, P)
    decision = route(sim if layer.config.router_mode == LANGUAGE_GUIDED else Q, layer)

    gates = decision.selected
    if layer.config.renormalize:
        gates = _renormalize(decision.selected)
    k = Q.shape[0]
    out = layer.shared(Q)
    for i, expert in enumerate(layer.experts):
        rows, slot = np.nonzero(decision.indices == i)
        if rows.size == 0:
            continue
        y = expert(nk.take(Q, rows))
        g = nk.reshape(nk.take(gates, (rows, slot)), (rows.size, 1))
        out = nk.add(out, nk.scatter_rows(nk.mul(y, g), rows, k))
    return LMoEOutput(out, decision, q_hat, sim)


def _renormalize(selected: Tensor) -> Tensor:
    denom = nk.total(selected, axis=1)
    inv = _reciprocal(denom)
    return nk.mul(selected, nk.reshape(inv, (selected.shape[0], 1)))


@nk.differentiable("reciprocal")
def _reciprocal(x: Tensor) -> Tensor:
    out = 1.0 / x.data
    return nk._node(out, (x,), "reciprocal", lambda g: (-g * out * out,))


def balance_loss(decisions, n_experts: int | None = None) -> Tensor:
    """M * sum_i F_i * P_i over all queries of the given routing decisions.

    F_i is the fraction of queries whose top-k set contains expert i (a
    constant); P_i is the mean routing weight of expert i (differentiable).
    """
    if isinstance(decisions, RoutingDecision):
        decisions = [decisions]
    decisions = [d for d in decisions if d.weights.shape[0] > 0]
    if not decisions:
        raise ValueError("balance loss needs at least one routed query")
    M = n_experts or decisions[0].n_experts
    W = nk.concat_rows([d.weights for d in decisions]) if len(decisions) > 1 else decisions[0].weights
    B = W.shape[0]
    counts = np.zeros(M)
    for d in decisions:
        counts += np.bincount(d.indices.ravel(), minlength=M)
    F = counts / B
    P = nk.total(W, axis=0) * (1.0 / B)
    return nk.total(nk.mul(P, F)) * float(M)


def routing_matrix(decisions, labels, n_classes: int, n_experts: int | None = None) -> np.ndarray:
    """Counts (class, expert) of selections; row c sums to top_k x count(c)."""
    if isinstance(decisions, RoutingDecision):
        decisions = [decisions]
    indices = np.concatenate([d.indices for d in decisions], axis=0) if decisions else np.zeros((0, 1), int)
    labels = np.asarray(labels, dtype=int)
    if len(labels) != indices.shape[0]:
        raise ValueError(f"{len(labels)} labels for {indices.shape[0]} routed queries")
    M = n_experts or (decisions[0].n_experts if decisions else 0)
    out = np.zeros((n_classes, M), dtype=int)
    for c, sel in zip(labels, indices):
        out[c, sel] += 1
    return out


def routing_purity(counts: np.ndarray, top_k: int) -> np.ndarray:
    """Per-class share of queries whose selection includes the class's modal expert.

    Equal to max row entry / row sum when top_k = 1. Classes without queries
    get NaN.
    """
    counts = np.asarray(counts, dtype=np.float64)
    per_class = counts.sum(axis=1) / top_k
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(per_class > 0, counts.max(axis=1) / per_class, np.nan)
