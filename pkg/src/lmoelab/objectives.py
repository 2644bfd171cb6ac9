"""Distillation, query-language alignment and total-loss assembly."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numkernel as nk
from .numkernel import Parameter, Tensor

TEACHER_REFERENCE = "teacher_reference"  # KL(teacher || student)
STUDENT_REFERENCE = "student_reference"  # KL(student || teacher)


class DistillParams:
    """The two linear maps of the camera alignment plus the softening temperature."""

    def __init__(self, query_dim: int, lang_dim: int, rng: np.random.Generator, temperature: float = 1.0):
        if temperature <= 0:
            raise ValueError("temperature must be positive")
        self.query_w = Parameter(rng.standard_normal((query_dim, lang_dim)) / np.sqrt(query_dim), "distill.query_w")
        self.query_b = Parameter(np.zeros(lang_dim), "distill.query_b")
        # start near the multiplicative identity so every camera sees the same query
        self.extr_w = Parameter(rng.standard_normal((16, lang_dim)) * 0.01, "distill.extr_w")
        self.extr_b = Parameter(np.ones(lang_dim), "distill.extr_b")
        self.temperature = temperature

    def parameters(self) -> list[Parameter]:
        return [self.query_w, self.query_b, self.extr_w, self.extr_b]


@dataclass
class LossBundle:
    contrast: Tensor
    kd: Tensor
    balance: Tensor
    w_contrast: float = 1.0
    w_kd: float = 0.5
    w_balance: float = 0.01

    def values(self) -> dict[str, float]:
        return {"contrast": self.contrast.item(), "kd": self.kd.item(), "balance": self.balance.item()}


def camera_align(Q_bar, E, params: DistillParams) -> Tensor:
    """C x k x d camera-conditioned queries: Linear(Q_bar)[q] * Linear(E)[c]."""
    Q_bar, E = nk.as_tensor(Q_bar), nk.as_tensor(E)
    if E.ndim != 2 or E.shape[1] != 16:
        raise nk.ShapeError(f"extrinsics must be C x 16, got {E.shape}")
    A = nk.linear(Q_bar, params.query_w, params.query_b)
    B = nk.linear(E, params.extr_w, params.extr_b)
    k, d = A.shape
    C = B.shape[0]
    return nk.mul(nk.reshape(A, (1, k, d)), nk.reshape(B, (C, 1, d)))


def student_similarity(Q_c: Tensor, pairs, P_language) -> Tensor:
    """Cosine of Q_c[c, q] against every language row, one row per (g, q, c) sample."""
    pairs = np.asarray(pairs, dtype=int).reshape(-1, 3)
    C, k, _ = Q_c.shape
    if pairs.size and (pairs[:, 1].max() >= k or pairs[:, 2].max() >= C or pairs.min() < 0):
        raise IndexError(f"sample indices out of range for Q_c of shape {Q_c.shape}")
    rows = nk.take(Q_c, (pairs[:, 2], pairs[:, 1]))
    return nk.cosine_similarity(rows, P_language)


def teacher_similarity(visual, P_language) -> Tensor:
    """Cosine of teacher embeddings against the language rows; a constant."""
    V = np.stack([getattr(v, "vector", v) for v in visual]) if not isinstance(visual, np.ndarray) else visual
    P = P_language.data if isinstance(P_language, Tensor) else np.asarray(P_language)
    Vn = V / np.linalg.norm(V, axis=1, keepdims=True)
    Pn = P / np.linalg.norm(P, axis=1, keepdims=True)
    return nk.Tensor(Vn @ Pn.T)


def kd_loss(
    S_student: Tensor | None,
    S_teacher: Tensor | None,
    temperature: float = 1.0,
    weights=None,
    direction: str = TEACHER_REFERENCE,
) -> tuple[Tensor, bool]:
    """Weighted mean KL between softened teacher and student similarity rows.

    ``weights`` default to 1/G per row. Returns the loss and a flag that is
    True when there were no samples (the loss is then an exact 0).
    """
    if S_student is None or S_student.shape[0] == 0:
        return nk.Tensor(0.0), True
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    G = S_student.shape[0]
    w = np.full(G, 1.0 / G) if weights is None else np.asarray(weights, dtype=np.float64)
    t_dist = nk.row_softmax(nk.Tensor(S_teacher.data / temperature))
    s_dist = nk.row_softmax(nk.mul(S_student, 1.0 / temperature))
    if direction == TEACHER_REFERENCE:
        kl = nk.kl_divergence(t_dist, s_dist)
    elif direction == STUDENT_REFERENCE:
        kl = nk.kl_divergence(s_dist, t_dist)
    else:
        raise ValueError(f"unknown KL direction {direction!r}")
    return nk.total(nk.mul(kl, w)), False


def contrastive_logits(Q_hat, P_language, logit_scale: float = 1.0) -> Tensor:
    sim = nk.cosine_similarity(Q_hat, P_language)
    return sim if logit_scale == 1.0 else nk.mul(sim, logit_scale)


def contrastive_loss(
    Q_hat, P_language, T, alpha: float = 0.25, gamma: float = 2.0, weights=None, logit_scale: float = 1.0
) -> Tensor:
    """Sigmoid focal loss of sim(Q_hat, P) against the class-target matrix T.

    Averaged over the k x n grid unless per-row ``weights`` (summing the grid
    mean over several scenes) are given. ``logit_scale`` multiplies the
    cosines before the sigmoid.
    """
    logits = contrastive_logits(Q_hat, P_language, logit_scale)
    T = np.asarray(T, dtype=np.float64)
    if T.shape != logits.shape:
        raise nk.ShapeError(f"target matrix {T.shape} does not match logits {logits.shape}")
    focal = nk.focal_term(nk.sigmoid(logits), T, alpha, gamma)
    if weights is None:
        return nk.mean(focal)
    return nk.total(nk.mul(focal, np.asarray(weights, dtype=np.float64).reshape(-1, 1)))


def total_loss(bundle: LossBundle, task: Tensor | None = None) -> Tensor:
    out = (
        nk.mul(bundle.contrast, bundle.w_contrast)
        + nk.mul(bundle.kd, bundle.w_kd)
        + nk.mul(bundle.balance, bundle.w_balance)
    )
    return out if task is None else nk.add(out, task)
