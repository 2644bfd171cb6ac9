"""Finite-difference gradient checks for every registered op and the loss composites.

Each case builder takes a Generator and returns ``(loss_fn, params)`` ready for
:func:`numkernel.check_gradient`. Inputs are drawn away from kinks (relu, abs)
and from the domain edges of log / reciprocal so that central differences are
meaningful.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import numkernel as nk
from .geometry import default_rig, flatten_extrinsics
from .lmoe import FEATURE_ROUTED, LANGUAGE_GUIDED, LMoEConfig, LMoELayer, _reciprocal, balance_loss, lmoe_forward
from .numkernel import Parameter
from .objectives import DistillParams, camera_align, contrastive_loss, kd_loss, student_similarity, teacher_similarity


def _p(rng, shape, name, low=None, high=None):
    if low is None:
        return Parameter(rng.standard_normal(shape), name)
    return Parameter(rng.uniform(low, high, shape), name)


def _away_from_zero(rng, shape, name):
    x = rng.uniform(0.1, 1.5, shape) * rng.choice([-1.0, 1.0], shape)
    return Parameter(x, name)


def _unary(op, make):
    def build(rng):
        a = make(rng)
        R_out = op(nk.Tensor(a.data))
        R = rng.standard_normal(R_out.shape)
        return (lambda: nk.total(nk.mul(op(a), R))), [a]

    return build


def _binary(op, shape_a, shape_b):
    def build(rng):
        a, b = _p(rng, shape_a, "a"), _p(rng, shape_b, "b")
        R = rng.standard_normal(op(nk.Tensor(a.data), nk.Tensor(b.data)).shape)
        return (lambda: nk.total(nk.mul(op(a, b), R))), [a, b]

    return build


def _take(rng):
    a = _p(rng, (5, 3), "a")
    idx = rng.integers(0, 5, 7)
    R = rng.standard_normal((7, 3))
    return (lambda: nk.total(nk.mul(nk.take(a, idx), R))), [a]


def _scatter(rng):
    a = _p(rng, (3, 4), "a")
    rows = rng.choice(6, 3, replace=False)
    R = rng.standard_normal((6, 4))
    return (lambda: nk.total(nk.mul(nk.scatter_rows(a, rows, 6), R))), [a]


def _concat(rng):
    a, b = _p(rng, (2, 3), "a"), _p(rng, (4, 3), "b")
    R = rng.standard_normal((6, 3))
    return (lambda: nk.total(nk.mul(nk.concat_rows([a, b]), R))), [a, b]


def _sum(rng):
    a = _p(rng, (4, 5), "a")
    R = rng.standard_normal(4)
    return (lambda: nk.add(nk.total(nk.mul(nk.total(a, axis=1), R)), nk.mul(nk.total(a), 0.3))), [a]


def _kl(rng):
    x, y = _p(rng, (4, 5), "p_logits"), _p(rng, (4, 5), "q_logits")
    R = rng.uniform(0.5, 1.5, 4)
    return (lambda: nk.total(nk.mul(nk.kl_divergence(nk.row_softmax(x), nk.row_softmax(y)), R))), [x, y]


def _focal(rng):
    x = _p(rng, (4, 5), "logits")
    y = (rng.random((4, 5)) < 0.4).astype(float)
    return (lambda: nk.total(nk.focal_term(nk.sigmoid(x), y, 0.25, 2.0))), [x]


OP_CASES = {
    "add": _binary(nk.add, (3, 4), (4,)),
    "sub": _binary(nk.sub, (3, 4), (3, 1)),
    "mul": _binary(nk.mul, (3, 4), (3, 4)),
    "matmul": _binary(nk.matmul, (3, 4), (4, 2)),
    "transpose": _unary(nk.transpose, lambda r: _p(r, (3, 4), "a")),
    "reshape": _unary(lambda a: nk.reshape(a, (2, 6)), lambda r: _p(r, (3, 4), "a")),
    "relu": _unary(nk.relu, lambda r: _away_from_zero(r, (4, 5), "a")),
    "abs": _unary(nk.absolute, lambda r: _away_from_zero(r, (4, 5), "a")),
    "exp": _unary(nk.exp, lambda r: _p(r, (4, 5), "a")),
    "log": _unary(nk.log, lambda r: _p(r, (4, 5), "a", 0.5, 2.0)),
    "sigmoid": _unary(nk.sigmoid, lambda r: _p(r, (4, 5), "a")),
    "sum": _sum,
    "take": _take,
    "scatter_rows": _scatter,
    "concat_rows": _concat,
    "row_softmax": _unary(nk.row_softmax, lambda r: _p(r, (4, 6), "a")),
    "l2_normalize_rows": _unary(nk.l2_normalize_rows, lambda r: _p(r, (4, 6), "a")),
    "cosine_similarity": _binary(nk.cosine_similarity, (4, 6), (3, 6)),
    "kl_divergence": _kl,
    "focal_term": _focal,
    "reciprocal": _unary(_reciprocal, lambda r: _p(r, (3, 4), "a", 0.5, 2.0)),
}


def _lmoe_case(router_mode: str, renormalize: bool = False):
    def build(rng):
        n, D, d, k = 4, 6, 5, 7
        cfg = LMoEConfig(
            n_experts=4, top_k=2, query_dim=D, lang_dim=d, h_routed=5, h_shared=6,
            router_mode=router_mode, renormalize=renormalize, router_init=0.5,
        )
        layer = LMoELayer(cfg, n, rng)
        Q = Parameter(rng.standard_normal((k, D)), "Q")
        P = nk.l2_normalize_rows(nk.Tensor(rng.standard_normal((n, d))))
        R = rng.standard_normal((k, D))

        def loss():
            out = lmoe_forward(Q, P, layer)
            return nk.add(nk.total(nk.mul(out.refined, R)), balance_loss(out.routing))

        return loss, [Q] + layer.parameters()

    return build


def _kd_case(rng):
    k, D, d, n = 5, 6, 4, 7
    params = DistillParams(D, d, rng)
    params.extr_w.data = rng.standard_normal(params.extr_w.shape) * 0.3
    Q = Parameter(rng.standard_normal((k, D)), "Q_bar")
    E = flatten_extrinsics(default_rig())
    P = rng.standard_normal((n, d))
    pairs = np.stack([rng.integers(0, 3, 9), rng.integers(0, k, 9), rng.integers(0, E.shape[0], 9)], axis=1)
    S_t = teacher_similarity(rng.standard_normal((9, d)), P)
    w = rng.uniform(0.5, 1.5, 9)
    w /= w.sum()

    def loss():
        Q_c = camera_align(Q, E, params)
        return kd_loss(student_similarity(Q_c, pairs, P), S_t, 1.0, w)[0]

    return loss, [Q] + params.parameters()


def _contrastive_case(rng):
    k, d, n = 6, 5, 4
    Q = Parameter(rng.standard_normal((k, d)), "Q_hat")
    P = rng.standard_normal((n, d))
    T = np.zeros((k, n))
    T[rng.choice(k, 3, replace=False), rng.integers(0, n, 3)] = 1.0
    return (lambda: contrastive_loss(Q, P, T, 0.25, 2.0)), [Q]


COMPOSITE_CASES = {
    "lmoe_forward+balance_loss": _lmoe_case(LANGUAGE_GUIDED),
    "lmoe_forward+balance_loss[feature_routed]": _lmoe_case(FEATURE_ROUTED),
    "lmoe_forward+balance_loss[renormalized]": _lmoe_case(LANGUAGE_GUIDED, renormalize=True),
    "camera_align->kd_loss": _kd_case,
    "contrastive_loss": _contrastive_case,
}


@dataclass
class SuiteResult:
    errors: dict[str, list[float]] = field(default_factory=dict)  # case -> max error per seed
    missing: list[str] = field(default_factory=list)  # registered ops without a case
    seconds: float = 0.0
    tol: float = 1e-4

    @property
    def passed(self) -> bool:
        return not self.missing and all(max(v) <= self.tol for v in self.errors.values())

    def failures(self) -> list[str]:
        return [k for k, v in self.errors.items() if max(v) > self.tol] + self.missing


def run_suite(seeds=range(10), eps: float = 1e-5, tol: float = 1e-4, composites: bool = True) -> SuiteResult:
    t0 = time.perf_counter()
    res = SuiteResult(tol=tol)
    res.missing = sorted(set(nk.DIFFERENTIABLE_OPS) - set(OP_CASES))
    cases = dict(OP_CASES)
    if composites:
        cases.update(COMPOSITE_CASES)
    for name, build in cases.items():
        errs = []
        for seed in seeds:
            loss_fn, params = build(np.random.default_rng([seed, 7]))
            errs.append(nk.check_gradient(loss_fn, params, eps=eps, tol=tol).max_error)
        res.errors[name] = errs
    res.seconds = time.perf_counter() - t0
    return res
