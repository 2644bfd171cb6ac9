"""Batch losses and the optimization loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .. import geometry
from .. import numkernel as nk
from ..lmoe import balance_loss
from ..matching import build_cost, hungarian, target_matrix
from ..numkernel import Tensor
from ..objectives import LossBundle, camera_align, contrastive_loss, kd_loss, student_similarity, teacher_similarity, total_loss
from ..scenegen import Scene
from .config import ExperimentConfig
from .model import Model, Predictions, forward_scene

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("total", "contrast", "kd", "balance", "task_cls", "center")


@dataclass
class SceneMatch:
    offset: int
    assignment: object
    targets: np.ndarray  # k x n


@dataclass
class StepResult:
    bundle: LossBundle
    task: Tensor
    total: Tensor
    values: dict[str, float] = field(default_factory=dict)
    matches: list[SceneMatch] = field(default_factory=list)
    kd_empty: bool = False


def scene_views(scene: Scene) -> list[list[int]]:
    """Camera indices in which each ground-truth box yields a crop (cached on the scene)."""
    views = scene.__dict__.get("_views")
    if views is None:
        views = [
            [c for c, cam in enumerate(scene.rig) if geometry.crop_rect(box, cam, c) is not None]
            for box in scene.boxes
        ]
        scene.__dict__["_views"] = views
    return views


def stack_observations(scenes) -> tuple[np.ndarray, np.ndarray]:
    offsets = np.cumsum([0] + [s.n_queries for s in scenes])
    return np.concatenate([s.observations for s in scenes], axis=0), offsets


def match_scenes(pred: Predictions, scenes, offsets, n_classes: int, cfg: ExperimentConfig) -> list[SceneMatch]:
    probs = 1.0 / (1.0 + np.exp(-pred.logits.data))
    centers = pred.centers.data
    out = []
    for s, lo, hi in zip(scenes, offsets[:-1], offsets[1:]):
        cost = build_cost(
            probs[lo:hi], centers[lo:hi], s.classes, s.centers / cfg.scene.world_extent,
            cfg.losses.lambda_cls, cfg.losses.lambda_center,
        )
        a = hungarian(cost)
        out.append(SceneMatch(int(lo), a, target_matrix(a, s.classes, hi - lo, n_classes)))
    return out


def batch_losses(model: Model, scenes, P_language, cfg: ExperimentConfig) -> StepResult:
    """Forward a batch of scenes, match, and assemble every loss term."""
    lc = cfg.losses
    P = nk.as_tensor(P_language)
    n = P.shape[0]
    obs, offsets = stack_observations(scenes)
    pred = forward_scene(model, obs, P)
    matches = match_scenes(pred, scenes, offsets, n, cfg)

    T = np.concatenate([m.targets for m in matches], axis=0)
    row_w = np.concatenate([np.full(s.n_queries, 1.0 / (s.n_queries * n * len(scenes))) for s in scenes])
    zero = nk.Tensor(0.0)

    if lc.w_contrast > 0:
        terms = [contrastive_loss(q, P, T, lc.focal_alpha, lc.focal_gamma, row_w, lc.logit_scale) for q in pred.q_hat]
        contrast = nk.mul(_sum(terms), 1.0 / len(terms))
    else:
        contrast = zero

    routed = [r for r in pred.routing if r is not None]
    balance = nk.mul(_sum([balance_loss(r) for r in routed]), 1.0 / len(routed)) if routed and lc.w_balance > 0 else zero

    kd, kd_empty = zero, True
    if lc.w_kd > 0:
        kd, kd_empty = _kd_term(model, pred, scenes, matches, P, cfg)

    task_cls = nk.total(nk.mul(nk.focal_term(nk.sigmoid(pred.logits), T, lc.focal_alpha, lc.focal_gamma), row_w[:, None]))
    q_idx = np.concatenate([m.offset + m.assignment.queries for m in matches]).astype(int)
    if q_idx.size:
        gt = np.concatenate([s.centers[m.assignment.gts] for s, m in zip(scenes, matches)]) / cfg.scene.world_extent
        center = nk.mul(nk.total(nk.absolute(nk.sub(nk.take(pred.centers, q_idx), gt))), 1.0 / q_idx.size)
    else:
        center = zero
    task = nk.add(nk.mul(task_cls, lc.w_task_cls), nk.mul(center, lc.w_center))

    bundle = LossBundle(contrast, kd, balance, lc.w_contrast, lc.w_kd, lc.w_balance)
    tot = total_loss(bundle, task)
    values = {
        "total": tot.item(),
        **bundle.values(),
        "task_cls": task_cls.item(),
        "center": center.item(),
    }
    return StepResult(bundle, task, tot, values, matches, kd_empty)


def _sum(terms):
    out = terms[0]
    for t in terms[1:]:
        out = nk.add(out, t)
    return out


def _kd_term(model: Model, pred: Predictions, scenes, matches, P, cfg: ExperimentConfig):
    E = geometry.flatten_extrinsics(scenes[0].rig)
    samples, teacher_rows, weights = [], [], []
    n_objects = 0
    for s, m in zip(scenes, matches):
        if not np.array_equal(geometry.flatten_extrinsics(s.rig), E):
            raise ValueError("all scenes of a batch must share one camera rig")
        views = scene_views(s)
        for q, g in m.assignment.pairs:
            if not views[g]:
                continue
            n_objects += 1
            for c in views[g]:
                samples.append((g, m.offset + q, c))
                teacher_rows.append(s.teacher[g])
                weights.append(1.0 / len(views[g]))
    if not samples:
        return nk.Tensor(0.0), True
    Q_c = camera_align(pred.refined, E, model.distill)
    S_s = student_similarity(Q_c, samples, P)
    S_t = teacher_similarity(np.array(teacher_rows), P)
    w = np.array(weights) / n_objects
    return kd_loss(S_s, S_t, cfg.losses.kd_temperature, w, cfg.losses.kd_direction)


def training_step(model: Model, scenes, P_language, cfg: ExperimentConfig, step: int) -> StepResult:
    """One optimizer update on a batch of scenes; ``step`` counts from 1."""
    if not scenes:
        raise ValueError("training batch is empty")
    params = model.parameters()
    nk.zero_grads(params)
    result = batch_losses(model, scenes, P_language, cfg)
    nk.backward(result.total)
    t = cfg.train
    nk.adam_step(params, t.lr, t.beta1, t.beta2, t.adam_eps, step)
    return result


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)


def train(model: Model, train_scenes, P_language, cfg: ExperimentConfig, callback=None) -> TrainLog:
    """Run ``cfg.train.steps`` updates with batches drawn from the fixed training corpus."""
    rng = np.random.default_rng([cfg.train.data_seed, 3])
    logbook = TrainLog()
    P = nk.as_tensor(P_language)
    n = len(train_scenes)
    order = rng.permutation(n)
    cursor = 0
    for step in range(1, cfg.train.steps + 1):
        batch = []
        for _ in range(cfg.train.batch_size):
            if cursor == n:
                order, cursor = rng.permutation(n), 0
            batch.append(train_scenes[order[cursor]])
            cursor += 1
        res = training_step(model, batch, P, cfg, step)
        if step % cfg.train.log_every == 0 or step == cfg.train.steps:
            logbook.rows.append({"step": step, **res.values})
        if callback is not None:
            callback(step, res)
        if step % 500 == 0:
            log.info("step %d total %.4f", step, res.values["total"])
    return logbook
