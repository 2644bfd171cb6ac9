"""Toy query-refinement detector.

Each layer applies a residual affine+ReLU transform to the queries (the
stand-in for attention over image features), then an LMoE block or a plain
FFN, added back residually. Heads read the final refined queries: class
logits are cosines against the language rows, centers come from a linear map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import numkernel as nk
from ..lmoe import Expert, LMoEConfig, LMoELayer, RoutingDecision, lmoe_forward
from ..numkernel import Parameter, Tensor
from ..objectives import DistillParams
from .config import ExperimentConfig


class Layer:
    def __init__(self, cfg: ExperimentConfig, index: int, n_classes: int, rng: np.random.Generator):
        D, d = cfg.scene.obs_dim, cfg.scene.lang_dim
        m = cfg.model
        name = f"layer{index}"
        self.t_w = Parameter(rng.standard_normal((D, D)) * np.sqrt(1.0 / D), f"{name}.transform_w")
        self.t_b = Parameter(np.zeros(D), f"{name}.transform_b")
        self.lmoe: LMoELayer | None = None
        self.ffn: Expert | None = None
        if m.uses_lmoe(index):
            lcfg = LMoEConfig(
                n_experts=m.n_experts, top_k=m.top_k, query_dim=D, lang_dim=d,
                h_routed=m.h_routed, h_shared=m.h_shared, router_mode=m.router_mode,
                renormalize=m.renormalize, router_init=m.router_init,
            )
            self.lmoe = LMoELayer(lcfg, n_classes, rng, f"{name}.lmoe")
        else:
            self.ffn = Expert(D, m.ffn_hidden, rng, f"{name}.ffn")
            self.proj_w = Parameter(rng.standard_normal((D, d)) / np.sqrt(D), f"{name}.proj_w")
            self.proj_b = Parameter(np.zeros(d), f"{name}.proj_b")

    def parameters(self) -> list[Parameter]:
        ps = [self.t_w, self.t_b]
        if self.lmoe is not None:
            return ps + self.lmoe.parameters()
        return ps + self.ffn.parameters() + [self.proj_w, self.proj_b]


@dataclass
class Predictions:
    logits: Tensor  # k x n, logit_scale * cosine
    centers: Tensor  # k x 3, normalized by the world extent
    q_hat: list[Tensor]  # per layer, k x d
    routing: list[RoutingDecision | None]  # per layer
    refined: Tensor  # k x D final refined queries
    embedding: Tensor  # k x d language-space queries of the classification head


class Model:
    def __init__(self, cfg: ExperimentConfig, n_classes: int | None = None):
        self.cfg = cfg
        n = n_classes or cfg.scene.n_classes
        self.n_classes = n
        D, d = cfg.scene.obs_dim, cfg.scene.lang_dim
        rng = np.random.default_rng([cfg.train.model_seed, 11])
        self.layers = [Layer(cfg, i, n, rng) for i in range(cfg.model.n_layers)]
        self.head_w = Parameter(rng.standard_normal((D, d)) / np.sqrt(D), "head.cls_w")
        self.head_b = Parameter(np.zeros(d), "head.cls_b")
        self.center_w = Parameter(rng.standard_normal((D, 3)) * 0.01, "head.center_w")
        self.center_b = Parameter(np.zeros(3), "head.center_b")
        self.distill = DistillParams(D, d, rng, cfg.losses.kd_temperature)

    def parameters(self) -> list[Parameter]:
        ps = []
        for layer in self.layers:
            ps += layer.parameters()
        return ps + [self.head_w, self.head_b, self.center_w, self.center_b] + self.distill.parameters()

    def parameter_count(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    def __call__(self, observations, P_language) -> Predictions:
        return forward_scene(self, observations, P_language)


def forward_scene(model: Model, observations, P_language) -> Predictions:
    """Run the layer stack on a k x D block of query observations.

    ``observations`` may be a Scene (its observation block is used) or an
    array; scenes of a batch are simply stacked row-wise by the caller.
    """
    obs = getattr(observations, "observations", observations)
    Q = nk.as_tensor(obs)
    P = nk.as_tensor(P_language)
    q_hats, routing = [], []
    for layer in model.layers:
        Q = nk.add(Q, nk.relu(nk.linear(Q, layer.t_w, layer.t_b)))
        if layer.lmoe is not None:
            out = lmoe_forward(Q, P, layer.lmoe)
            q_hats.append(out.projected)
            routing.append(out.routing)
            block = out.refined
        else:
            q_hats.append(nk.linear(Q, layer.proj_w, layer.proj_b))
            routing.append(None)
            block = layer.ffn(Q)
        Q = nk.add(Q, block)
    emb = nk.linear(Q, model.head_w, model.head_b)
    logits = nk.mul(nk.cosine_similarity(emb, P), model.cfg.losses.logit_scale)
    centers = nk.linear(Q, model.center_w, model.center_b)
    return Predictions(logits, centers, q_hats, routing, Q, emb)
