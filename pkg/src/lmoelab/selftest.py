"""Quick invariant checks behind ``lmoelab selftest`` (a few seconds in total)."""

from __future__ import annotations

import tempfile
from pathlib import Path

import numpy as np

from . import numkernel as nk
from .geometry import Camera, project_to_camera
from .gradsuite import run_suite
from .lmoe import RoutingDecision, balance_loss
from .matching import brute_force_assignment, hungarian
from .objectives import kd_loss
from .semantics import default_vocabulary, load_embeddings, save_embeddings, synth_language_embeddings


def _softmax():
    out = nk.row_softmax(nk.Tensor([[1.0, 2.0, 3.0]])).data[0]
    ok = np.allclose(out, [0.09003057, 0.24472847, 0.66524096], atol=1e-8)
    return ok, np.array2string(out, precision=5)


def _hungarian():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        k, G = rng.integers(1, 6, 2)
        c = rng.random((k, G))
        worst = max(worst, abs(hungarian(c).total_cost(c) - brute_force_assignment(c).total_cost(c)))
    return worst < 1e-12, f"max cost gap {worst:.1e} over 100 instances"


def _balance():
    M, k, B = 4, 2, 40
    W = nk.Tensor(np.full((B, M), 1.0 / M))
    idx = np.stack([np.arange(B) % M, (np.arange(B) + 1) % M], axis=1)
    val = balance_loss(RoutingDecision(W, idx, nk.take(W, (np.arange(B)[:, None], idx)), M)).item()
    return abs(val - k) < 1e-9, f"uniform routing gives {val!r}"


def _kd():
    rng = np.random.default_rng(1)
    S = rng.uniform(-1, 1, (6, 5))
    same = kd_loss(nk.Tensor(S), nk.Tensor(S))[0].item()
    other = kd_loss(nk.Tensor(S), nk.Tensor(rng.uniform(-1, 1, (6, 5))))[0].item()
    return abs(same) < 1e-12 and other >= -1e-9, f"kd(S,S) = {same:.1e}, kd(S,S') = {other:.4f}"


def _principal_point():
    K = np.array([[500.0, 0, 320], [0, 500, 240], [0, 0, 1]])
    cam = Camera(np.eye(4), K, 640, 480)
    uvd, valid = project_to_camera(np.array([[0.0, 0.0, 5.0]]), cam)
    ok = bool(valid[0]) and uvd[0, 0] == 320.0 and uvd[0, 1] == 240.0
    return ok, f"(u, v) = ({uvd[0, 0]}, {uvd[0, 1]})"


def _embedding_roundtrip():
    emb = synth_language_embeddings(default_vocabulary(), d=16, seed=3)
    with tempfile.TemporaryDirectory() as tmp:
        path = save_embeddings(emb, Path(tmp) / "emb.txt")
        back = load_embeddings(path, default_vocabulary())
    ok = np.array_equal(emb.matrix, back.matrix) and back.names == emb.names
    return ok, "bit-exact" if ok else "mismatch"


def _gradients():
    res = run_suite(seeds=range(2))
    return res.passed, f"{len(res.errors)} cases, max error {max(max(v) for v in res.errors.values()):.1e}"


CHECKS = {
    "row_softmax example": _softmax,
    "hungarian vs brute force": _hungarian,
    "balance loss at uniform routing": _balance,
    "kd_loss sanity": _kd,
    "principal point projection": _principal_point,
    "embedding file round trip": _embedding_roundtrip,
    "gradient checks (2 seeds)": _gradients,
}


def run_selftest() -> list[tuple[str, bool, str]]:
    out = []
    for name, fn in CHECKS.items():
        try:
            ok, detail = fn()
        except Exception as exc:  # a crash is a failed check, not a crashed selftest
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        out.append((name, bool(ok), detail))
    return out
