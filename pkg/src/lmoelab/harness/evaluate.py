"""Group-wise evaluation of matched ground-truth objects."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..lmoe import routing_purity
from ..matching import build_cost, hungarian
from ..semantics import FrequencyGroup
from .train import stack_observations


@dataclass
class EvalResult:
    overall_accuracy: float
    per_class_accuracy: list[float | None]
    per_class_count: list[int]
    group_accuracy: dict[str, float | None]
    group_count: dict[str, int]
    center_l1: float
    routing: list[np.ndarray | None]  # per layer, n x M counts
    purity: list[float | None]  # per layer, mean over classes with queries
    expert_fraction: list[list[float] | None]  # F_i per layer
    expert_probability: list[list[float] | None]  # P_i per layer
    embeddings: list[tuple[int, np.ndarray]] = field(default_factory=list)

    @property
    def mean_purity(self) -> float | None:
        vals = [p for p in self.purity if p is not None]
        return float(np.mean(vals)) if vals else None

    def to_dict(self) -> dict:
        return {
            "overall_accuracy": self.overall_accuracy,
            "per_class_accuracy": self.per_class_accuracy,
            "per_class_count": self.per_class_count,
            "group_accuracy": self.group_accuracy,
            "group_count": self.group_count,
            "center_l1": self.center_l1,
            "purity_per_layer": self.purity,
            "mean_purity": self.mean_purity,
            "expert_fraction": self.expert_fraction,
            "expert_probability": self.expert_probability,
        }


def evaluate(
    predictor,
    scenes,
    P_language,
    groups,
    *,
    world_extent: float = 30.0,
    lambda_cls: float = 2.0,
    lambda_center: float = 0.25,
    chunk: int = 64,
    keep_embeddings: bool = False,
) -> EvalResult:
    """Accuracy of the argmax class of each ground-truth object's matched query.

    ``predictor(observations, P_language)`` must return an object with
    ``logits``, ``centers``, ``routing`` and ``embedding`` attributes (see
    :class:`~lmoelab.harness.model.Predictions`). ``groups`` labels every
    class Many / Medium / Few.
    """
    P = getattr(P_language, "data", np.asarray(P_language))
    n = P.shape[0]
    correct = np.zeros(n, dtype=int)
    count = np.zeros(n, dtype=int)
    l1_sum, matched = 0.0, 0
    matched_sel: dict[int, list] = {}  # per layer: selections of matched queries
    matched_lab: dict[int, list] = {}
    all_w: dict[int, list] = {}  # per layer: routing weights of every query
    all_sel: dict[int, list] = {}
    n_layers = None
    embeddings = []

    for start in range(0, len(scenes), chunk):
        part = scenes[start : start + chunk]
        obs, offsets = stack_observations(part)
        pred = predictor(obs, P_language)
        logits = np.asarray(getattr(pred.logits, "data", pred.logits))
        centers = np.asarray(getattr(pred.centers, "data", pred.centers))
        emb = getattr(pred, "embedding", None)
        emb = None if emb is None else np.asarray(getattr(emb, "data", emb))
        routing = list(getattr(pred, "routing", []) or [])
        n_layers = len(routing)
        probs = 1.0 / (1.0 + np.exp(-logits))
        for s, lo, hi in zip(part, offsets[:-1], offsets[1:]):
            gt_cls, gt_c = s.classes, s.centers / world_extent
            if len(gt_cls) == 0:
                continue
            a = hungarian(build_cost(probs[lo:hi], centers[lo:hi], gt_cls, gt_c, lambda_cls, lambda_center))
            q = lo + a.queries
            g = a.gts
            labels = gt_cls[g]
            np.add.at(count, labels, 1)
            np.add.at(correct, labels, (logits[q].argmax(axis=1) == labels).astype(int))
            l1_sum += float(np.abs(centers[q] - gt_c[g]).sum()) * world_extent
            matched += len(q)
            if keep_embeddings and emb is not None:
                embeddings.extend((int(c), emb[i].copy()) for c, i in zip(labels, q))
            for li, dec in enumerate(routing):
                if dec is not None:
                    matched_sel.setdefault(li, []).append(dec.indices[q])
                    matched_lab.setdefault(li, []).append(labels)
        for li, dec in enumerate(routing):
            if dec is not None:
                all_w.setdefault(li, []).append(np.asarray(getattr(dec.weights, "data", dec.weights)))
                all_sel.setdefault(li, []).append(dec.indices)

    groups = [FrequencyGroup(g) for g in groups]
    per_class = [float(c / t) if t else None for c, t in zip(correct, count)]
    group_acc, group_cnt = {}, {}
    for grp in FrequencyGroup:
        members = [i for i, g in enumerate(groups) if g == grp]
        t = int(count[members].sum()) if members else 0
        group_cnt[grp.value] = t
        group_acc[grp.value] = float(correct[members].sum() / t) if t else None
    total = int(count.sum())

    routing_out, purity, frac, prob = [], [], [], []
    for li in range(n_layers or 0):
        if li not in all_w:
            routing_out.append(None)
            purity.append(None)
            frac.append(None)
            prob.append(None)
            continue
        sel = np.concatenate(all_sel[li], axis=0)
        W = np.concatenate(all_w[li], axis=0)
        M = W.shape[1]
        top_k = sel.shape[1]
        if li in matched_sel:
            idx = np.concatenate(matched_sel[li], axis=0)
            lab = np.concatenate(matched_lab[li])
        else:
            idx, lab = np.zeros((0, top_k), dtype=int), np.zeros(0, dtype=int)
        counts = np.zeros((n, M), dtype=int)
        for c, row in zip(lab, idx):
            counts[c, row] += 1
        routing_out.append(counts)
        pur = routing_purity(counts, top_k)
        purity.append(float(np.nanmean(pur)) if np.any(~np.isnan(pur)) else None)
        frac.append((np.bincount(sel.ravel(), minlength=M) / len(sel)).tolist())
        prob.append(W.mean(axis=0).tolist())

    return EvalResult(
        overall_accuracy=float(correct.sum() / total) if total else 0.0,
        per_class_accuracy=per_class,
        per_class_count=count.tolist(),
        group_accuracy=group_acc,
        group_count=group_cnt,
        center_l1=l1_sum / matched if matched else 0.0,
        routing=routing_out,
        purity=purity,
        expert_fraction=frac,
        expert_probability=prob,
        embeddings=embeddings,
    )
