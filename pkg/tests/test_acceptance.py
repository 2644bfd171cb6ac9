"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 5 and 6 train 30 small models and take several minutes on one core.
"""

import csv
import itertools
import json
import time

import numpy as np
import pytest
from geometry_oracles import box_in_front, random_rigid, surface_points

from lmoelab import numkernel as nk
from lmoelab.geometry import Camera, crop_rect, project_to_camera
from lmoelab.gradsuite import COMPOSITE_CASES, run_suite
from lmoelab.harness import desk_config, emit_reports, run_experiment
from lmoelab.harness.experiment import ablation_run
from lmoelab.harness.train import LOSS_COLUMNS
from lmoelab.lmoe import FEATURE_ROUTED, RoutingDecision, balance_loss
from lmoelab.matching import brute_force_assignment, hungarian
from lmoelab.objectives import kd_loss
from lmoelab.scenegen import SceneConfig, corpus, load_corpus, sample_class, save_corpus, zipf_masses
from lmoelab.semantics import default_vocabulary, load_embeddings, save_embeddings, synth_language_embeddings

SEEDS = range(5)


@pytest.fixture
def verdict(capsys):
    """Print one PASS/FAIL line (bypassing capture), then fail the test if needed."""

    def report(number, name, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {number} ({name}): {detail}")
        assert ok, detail

    return report


def _seeded(cfg, seed):
    return cfg.replace(train={"model_seed": seed, "data_seed": seed})


def test_criterion_1_gradients(verdict):
    res = run_suite(seeds=range(10), eps=1e-5, tol=1e-4)
    worst = max(max(v) for v in res.errors.values())
    ok = (
        res.passed
        and set(COMPOSITE_CASES) <= set(res.errors)
        and set(nk.DIFFERENTIABLE_OPS) <= set(res.errors)
        and all(len(v) == 10 for v in res.errors.values())
        and res.seconds < 60
    )
    detail = (f"{len(res.errors)} cases x 10 seeds, max rel err {worst:.1e}, "
              f"failures {res.failures()}, {res.seconds:.1f}s")
    verdict(1, "gradient correctness", ok, detail)


def test_criterion_2_hungarian(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    mismatches = 0
    for i in range(500):
        k, G = rng.integers(1, 8, 2)
        c = rng.integers(0, 5, (k, G)).astype(float) if i % 4 == 0 else rng.random((k, G))
        if hungarian(c).total_cost(c) != brute_force_assignment(c).total_cost(c):
            mismatches += 1
    grid = 0
    for vals in itertools.product(range(4), repeat=4):
        c = np.array(vals, dtype=float).reshape(2, 2)
        grid += hungarian(c).total_cost(c) != brute_force_assignment(c).total_cost(c)
    secs = time.perf_counter() - t0
    ok = mismatches == 0 and grid == 0 and secs < 30
    verdict(2, "Hungarian optimality", ok, f"{mismatches}/500 random and {grid}/256 grid mismatches, {secs:.1f}s")


def _decision(W, idx):
    W = nk.Tensor(np.asarray(W, dtype=float))
    idx = np.asarray(idx)
    rows = np.arange(W.shape[0])[:, None]
    return RoutingDecision(W, idx, nk.take(W, (rows, idx)), W.shape[1])


def test_criterion_3_balance(verdict):
    M, B = 4, 40
    uni = np.full((B, M), 1 / M)
    idx = np.stack([np.arange(B) % M, (np.arange(B) + 1) % M], axis=1)
    at_uniform = balance_loss(_decision(uni, idx)).item()
    concentrated = [
        balance_loss(_decision(np.tile([1 - 3 * e, e, e, e], (B, 1)), np.zeros((B, 1), int))).item()
        for e in (1e-2, 1e-4, 1e-8)
    ]
    seq = []
    for t in np.linspace(0, 1, 21):
        W = (1 - t) * uni + t * np.eye(M)[np.zeros(B, int)]
        seq.append(balance_loss(_decision(W, nk.topk_rows(nk.Tensor(W), 1)[0])).item())
    ok = (
        abs(at_uniform - 2) <= 1e-9
        and abs(concentrated[-1] - M) < 1e-6
        and all(a < b for a, b in zip(concentrated, concentrated[1:]))
        and all(b >= a - 1e-12 for a, b in zip(seq, seq[1:]))
    )
    detail = (f"uniform top-2 {at_uniform!r}; concentrated {[round(c, 8) for c in concentrated]} -> M={M}; "
              f"sequence {seq[0]:.3f}..{seq[-1]:.3f} monotone")
    verdict(3, "balance-loss analytics", ok, detail)


def test_criterion_4_distributions(verdict):
    rng = np.random.default_rng(4)
    x = rng.standard_normal((1000, 18)) * rng.uniform(0.1, 30, (1000, 1))
    sm_err = np.abs(nk.row_softmax(nk.Tensor(x)).data.sum(axis=1) - 1).max()
    S = rng.uniform(-1, 1, (50, 18))
    self_kd = kd_loss(nk.Tensor(S), nk.Tensor(S))[0].item()
    lowest = min(
        kd_loss(nk.Tensor(rng.uniform(-1, 1, (1, 18))), nk.Tensor(rng.uniform(-1, 1, (1, 18))),
                float(rng.uniform(0.05, 5)))[0].item()
        for _ in range(1000)
    )
    a = rng.standard_normal((300, 16)) * rng.uniform(1e-6, 1e6, (300, 1))
    cos = nk.cosine_similarity(nk.Tensor(a), nk.Tensor(np.concatenate([a[:50], -a[50:100]]))).data
    ok = sm_err <= 1e-12 and self_kd == 0.0 and lowest >= -1e-9 and np.all(np.abs(cos) <= 1 + 1e-9)
    detail = (f"softmax row-sum err {sm_err:.1e}; kd(S,S) = {self_kd}; min kd over 1000 pairs {lowest:.2e}; "
              f"max |cos| - 1 = {np.abs(cos).max() - 1:.1e}")
    verdict(4, "distribution sanity", ok, detail)


@pytest.mark.slow
def test_criterion_5_routing_specialization(verdict):
    base = desk_config(two_group=True)
    guided, feature, times = [], [], {"language_guided": 0.0, "feature_routed": 0.0}
    for seed in SEEDS:
        for mode, out in (("language_guided", guided), ("feature_routed", feature)):
            cfg = _seeded(base, seed)
            if mode == "feature_routed":
                cfg = cfg.replace(model={"router_mode": FEATURE_ROUTED})
            t0 = time.perf_counter()
            out.append(run_experiment(cfg, keep_embeddings=False).metrics.mean_purity)
            times[mode] += time.perf_counter() - t0
    wins = sum(g > f for g, f in zip(guided, feature))
    ok = np.mean(guided) >= 0.8 and wins >= 4 and max(times.values()) < 300
    detail = (f"guided purity {np.round(guided, 3).tolist()} (mean {np.mean(guided):.3f}), "
              f"feature-routed {np.round(feature, 3).tolist()}, guided wins {wins}/5, "
              f"arm times {times['language_guided']:.0f}s / {times['feature_routed']:.0f}s")
    verdict(5, "routing specialization", ok, detail)


@pytest.mark.slow
def test_criterion_6_long_tail_direction(verdict):
    rows = [("moe",), ("moe", "guided_router"), ("moe", "guided_router", "distill")]
    t0 = time.perf_counter()
    tables = [ablation_run(_seeded(desk_config(), seed), rows) for seed in SEEDS]
    secs = time.perf_counter() - t0
    base = np.array([t[0]["overall"] for t in tables])
    vanilla = np.array([t[1]["overall"] for t in tables])
    guided = np.array([t[2]["overall"] for t in tables])
    few_off = np.array([t[2]["few"] for t in tables])
    few_on = np.array([t[3]["few"] for t in tables])
    router_delta = guided - vanilla
    kd_delta = few_on - few_off
    ok = router_delta.mean() > 0 and kd_delta.mean() > 0 and secs < 1800
    detail = (
        f"guided - vanilla overall {np.round(router_delta, 3).tolist()} (mean {router_delta.mean():+.4f}); "
        f"KD Few delta {np.round(kd_delta, 3).tolist()} (mean {kd_delta.mean():+.4f}); "
        f"[info] vanilla - baseline overall mean {(vanilla - base).mean():+.4f}; {secs:.0f}s"
    )
    verdict(6, "long-tail direction", ok, detail)


def test_criterion_7_geometry(verdict):
    rng = np.random.default_rng(7)
    K = np.array([[100.0, 0, 50], [0, 100.0, 50], [0, 0, 1]])
    uvd, valid = project_to_camera([[0.0, 0.0, 5.0]], Camera(np.eye(4), K, 100, 100))
    principal = bool(valid[0]) and uvd[0].tolist() == [50.0, 50.0, 5.0]

    # error scaled by max(1, |coordinate|): absolute inside the image, relative for
    # near-plane points that land tens of thousands of pixels away
    conj_err, in_image_err = 0.0, 0.0
    for _ in range(100):
        cam = Camera(random_rigid(rng), K, 100, 100)
        pts = rng.uniform(-30, 30, (20, 3))
        T = random_rigid(rng)
        a, va = project_to_camera(pts, cam)
        b, vb = project_to_camera(pts @ T[:3, :3].T + T[:3, 3], Camera(cam.extrinsic @ np.linalg.inv(T), K, 100, 100))
        if not np.array_equal(va, vb):
            conj_err = np.inf
            break
        a, b = a[va], b[va]
        conj_err = max(conj_err, float((np.abs(a - b) / np.maximum(1.0, np.abs(a))).max(initial=0.0)))
        seen = np.all((a[:, :2] >= 0) & (a[:, :2] <= 100), axis=1)
        in_image_err = max(in_image_err, float(np.abs(a[seen] - b[seen]).max(initial=0.0)))

    cam = Camera.from_pose((0.0, 0.0, 0.0), 0.0, 500.0, 500.0, 800, 450)
    escaped = 0
    for _ in range(100):
        box = box_in_front(rng)
        r = crop_rect(box, cam)
        p, v = project_to_camera(surface_points(box, 200, rng), cam)
        u, w = np.clip(p[:, 0], 0, cam.width), np.clip(p[:, 1], 0, cam.height)
        if r is None:
            escaped += (u.max() - u.min()) * (w.max() - w.min()) >= 1.0 + 1e-9
            continue
        inside = (r.u_min - 1e-9 <= u) & (u <= r.u_max + 1e-9) & (r.v_min - 1e-9 <= w) & (w <= r.v_max + 1e-9)
        escaped += int((~inside | ~v).sum())
    ok = principal and conj_err <= 1e-9 and escaped == 0
    detail = (f"principal point exact: {principal}; conjugation max scaled err {conj_err:.1e} "
              f"(in-image abs {in_image_err:.1e}); {escaped} of 20000 samples outside their crop")
    verdict(7, "projection geometry", ok, detail)


def test_criterion_8_determinism_and_formats(verdict, tmp_path):
    cfg = desk_config(train={"steps": 30, "train_scenes": 24, "eval_scenes": 24, "batch_size": 4})
    a = emit_reports(run_experiment(cfg), tmp_path / "a")
    b = emit_reports(run_experiment(cfg), tmp_path / "b")
    identical = [p.name for p in a] == [p.name for p in b] and all(p.read_bytes() == q.read_bytes() for p, q in zip(a, b))

    c = corpus(SceneConfig(), 20, base_seed=8)
    back = load_corpus(save_corpus(c, tmp_path / "c.scn"))
    corpus_ok = all(
        s.boxes == t.boxes and all(np.array_equal(getattr(s, f), getattr(t, f)) for f in ("modes", "teacher", "observations", "query_source"))
        for s, t in zip(c.scenes, back.scenes)
    ) and len(back.scenes) == 20
    emb = synth_language_embeddings(default_vocabulary(), d=64, seed=8)
    emb_back = load_embeddings(save_embeddings(emb, tmp_path / "e.txt"), default_vocabulary())
    emb_ok = np.array_equal(emb.matrix, emb_back.matrix)

    expected = {
        "loss_trace.csv": ["step", *LOSS_COLUMNS],
        "embeddings_final.csv": ["class_id"] + [f"q{j}" for j in range(cfg.scene.lang_dim)],
        **{f"routing_layer{i}.csv": ["class"] + [f"expert_{j}" for j in range(cfg.model.n_experts)] for i in range(cfg.model.n_layers)},
    }
    headers_ok = True
    for name, header in expected.items():
        with open(tmp_path / "a" / name, newline="") as fh:
            rows = list(csv.reader(fh))
        headers_ok &= rows[0] == header and all(len(r) == len(header) for r in rows[1:]) and len(rows) > 1
    json.loads((tmp_path / "a" / "metrics.json").read_text())
    ok = identical and corpus_ok and emb_ok and headers_ok
    detail = (f"reports bitwise identical: {identical}; corpus round trip: {corpus_ok}; "
              f"embedding round trip: {emb_ok}; CSV headers: {headers_ok}")
    verdict(8, "determinism and formats", ok, detail)


def test_criterion_9_zipf(verdict):
    draws = sample_class(1.0, 18, np.random.default_rng(9), size=1_000_000)
    freq = np.bincount(draws, minlength=18) / draws.size
    rel = np.abs(freq[:5] / zipf_masses(1.0, 18)[:5] - 1)
    ok = bool(np.all(rel <= 0.10))
    verdict(9, "Zipf shape", ok, f"top-5 relative errors {np.round(rel, 4).tolist()}")
