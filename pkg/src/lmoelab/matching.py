"""Query to ground-truth bipartite matching and class-target construction."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment


@dataclass(frozen=True)
class CostMatrix:
    costs: np.ndarray  # k x G
    cls_term: np.ndarray
    center_term: np.ndarray

    @classmethod
    def from_array(cls, costs) -> "CostMatrix":
        c = np.asarray(costs, dtype=np.float64)
        if c.ndim != 2:
            raise ValueError(f"cost matrix must be 2-D, got shape {c.shape}")
        if not np.all(np.isfinite(c)):
            raise ValueError("cost matrix has non-finite entries")
        return cls(c, c, np.zeros_like(c))

    @property
    def shape(self) -> tuple[int, int]:
        return self.costs.shape


@dataclass(frozen=True)
class Assignment:
    pairs: tuple[tuple[int, int], ...]  # (query, gt), sorted by query

    @property
    def queries(self) -> np.ndarray:
        return np.array([q for q, _ in self.pairs], dtype=int)

    @property
    def gts(self) -> np.ndarray:
        return np.array([g for _, g in self.pairs], dtype=int)

    def total_cost(self, cost: CostMatrix | np.ndarray) -> float:
        c = cost.costs if isinstance(cost, CostMatrix) else np.asarray(cost)
        return float(sum(c[q, g] for q, g in self.pairs))

    def query_of_gt(self) -> dict[int, int]:
        return {g: q for q, g in self.pairs}


def build_cost(
    class_probs,
    pred_centers,
    gt_classes,
    gt_centers,
    lambda_cls: float = 2.0,
    lambda_center: float = 0.25,
) -> CostMatrix:
    """cost(q, g) = lambda_cls (1 - p[q, class_g]) + lambda_center |c_q - c_g|_1."""
    probs = np.asarray(class_probs, dtype=np.float64)
    pc = np.asarray(pred_centers, dtype=np.float64)
    gcls = np.asarray(gt_classes, dtype=int)
    gc = np.asarray(gt_centers, dtype=np.float64).reshape(-1, 3)
    if probs.ndim != 2 or pc.shape != (probs.shape[0], 3) or gc.shape[0] != gcls.shape[0]:
        raise ValueError(
            f"inconsistent shapes: probs {probs.shape}, centers {pc.shape}, "
            f"gt classes {gcls.shape}, gt centers {gc.shape}"
        )
    if np.any(probs < 0) or np.any(probs > 1):
        raise ValueError("class probabilities must lie in [0, 1]")
    cls_term = lambda_cls * (1.0 - probs[:, gcls])
    center_term = lambda_center * np.abs(pc[:, None, :] - gc[None, :, :]).sum(-1)
    return CostMatrix(cls_term + center_term, cls_term, center_term)


def hungarian(cost: CostMatrix | np.ndarray) -> Assignment:
    """Minimum-total-cost injective matching of min(k, G) pairs."""
    c = cost.costs if isinstance(cost, CostMatrix) else np.asarray(cost, dtype=np.float64)
    if c.size == 0:
        return Assignment(())
    if not np.all(np.isfinite(c)):
        raise ValueError("cost matrix has non-finite entries")
    rows, cols = linear_sum_assignment(c)
    return Assignment(tuple(sorted(zip(rows.tolist(), cols.tolist()))))


def brute_force_assignment(cost: CostMatrix | np.ndarray) -> Assignment:
    """Exhaustive minimum over all injections; test oracle for small matrices."""
    c = cost.costs if isinstance(cost, CostMatrix) else np.asarray(cost, dtype=np.float64)
    k, G = c.shape
    if min(k, G) > 8:
        raise ValueError(f"brute force limited to min(k, G) <= 8, got {c.shape}")
    if min(k, G) == 0:
        return Assignment(())
    best, best_pairs = np.inf, None
    if G <= k:
        for qs in itertools.permutations(range(k), G):
            total = sum(c[q, g] for g, q in enumerate(qs))
            if total < best:
                best, best_pairs = total, [(q, g) for g, q in enumerate(qs)]
    else:
        for gs in itertools.permutations(range(G), k):
            total = sum(c[q, g] for q, g in enumerate(gs))
            if total < best:
                best, best_pairs = total, list(enumerate(gs))
    return Assignment(tuple(sorted(best_pairs)))


def target_matrix(assignment: Assignment, gt_classes, k: int, n: int) -> np.ndarray:
    """k x n {0, 1} matrix: matched query rows one-hot at their gt class."""
    gcls = np.asarray(gt_classes, dtype=int)
    T = np.zeros((k, n))
    for q, g in assignment.pairs:
        if not (0 <= q < k and 0 <= g < len(gcls)):
            raise IndexError(f"pair ({q}, {g}) out of range for k={k}, G={len(gcls)}")
        c = gcls[g]
        if not 0 <= c < n:
            raise IndexError(f"class {c} out of range for n={n}")
        T[q, c] = 1.0
    return T
