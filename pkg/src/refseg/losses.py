"""Set matching between candidate predictions and ground-truth objects, the
supervised mask/referring losses, the kernel diversity regularizer, and the
total training objective.

Matching is decided per clip on soft masks (no thresholding) and is not
differentiated through; the losses then read the matched slices from the
computation graph. Summation orders are fixed so results are bit-reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tz
from .tensor import ShapeError, Tensor

DICE_EPS = 1.0  # shared smoothing; identical masks give exactly zero loss
FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0


@dataclass
class LossWeights:
    lambda_dice: float = 5.0
    lambda_ref: float = 5.0
    lambda_focal: float = 2.0
    lambda_div: float = 0.07
    negative_ref_weight: float = 0.1  # unreferred candidates downweighted 10x


@dataclass
class GroundTruth:
    """Per-clip supervision: N referred objects with binary mask sequences
    and per-frame visibility flags."""

    masks: np.ndarray  # (N, T, H, W) in {0,1}
    flags: np.ndarray  # (N, T) in {0,1}; 1 exactly where the object is visible

    @property
    def n(self) -> int:
        return self.masks.shape[0]


@dataclass
class MatchResult:
    """Injective assignment of ground-truth objects to candidates."""

    assignment: np.ndarray  # (N,) candidate index per ground-truth object
    total_cost: float


@dataclass
class LossBreakdown:
    mask: Tensor
    ref: Tensor
    diversity: Tensor
    total: Tensor


# -- per-frame mask losses ----------------------------------------------------


def dice_loss(p: Tensor, g) -> Tensor:
    """1 - (2*sum(p*g) + eps) / (sum(p) + sum(g) + eps) with eps = 1."""
    gt = tz._wrap(g)
    if p.shape != gt.shape:
        raise ShapeError(f"dice_loss shapes differ: {p.shape} vs {gt.shape}")
    inter = tz.tensor_sum(tz.mul(p, gt))
    denom = tz.add(tz.tensor_sum(p), tz.tensor_sum(gt))
    return tz.sub(1.0, tz.div(tz.add(tz.mul(inter, 2.0), DICE_EPS), tz.add(denom, DICE_EPS)))


def focal_loss(p: Tensor, g, alpha: float = FOCAL_ALPHA, gamma: float = FOCAL_GAMMA) -> Tensor:
    """Pixel-mean focal loss on probabilities against a binary target."""
    gt = tz._wrap(g)
    if p.shape != gt.shape:
        raise ShapeError(f"focal_loss shapes differ: {p.shape} vs {gt.shape}")
    pos = tz.mul(tz.mul(tz.power(tz.sub(1.0, p), gamma), tz.log(p)), -alpha)
    neg = tz.mul(tz.mul(tz.power(p, gamma), tz.log(tz.sub(1.0, p))), -(1.0 - alpha))
    terms = tz.add(tz.mul(gt, pos), tz.mul(tz.sub(1.0, gt), neg))
    return tz.mean(terms)


def _dice_terms(p: Tensor, g: Tensor) -> Tensor:
    """Vectorised dice loss over the last (pixel) axis; returns leading shape."""
    inter = tz.tensor_sum(tz.mul(p, g), axis=-1)
    denom = tz.add(tz.tensor_sum(p, axis=-1), tz.tensor_sum(g, axis=-1))
    return tz.sub(1.0, tz.div(tz.add(tz.mul(inter, 2.0), DICE_EPS), tz.add(denom, DICE_EPS)))


def _focal_terms(p: Tensor, g: Tensor, alpha: float, gamma: float) -> Tensor:
    pos = tz.mul(tz.mul(tz.power(tz.sub(1.0, p), gamma), tz.log(p)), -alpha)
    neg = tz.mul(tz.mul(tz.power(p, gamma), tz.log(tz.sub(1.0, p))), -(1.0 - alpha))
    return tz.mean(tz.add(tz.mul(g, pos), tz.mul(tz.sub(1.0, g), neg)), axis=-1)


# -- matching -----------------------------------------------------------------


def matching_cost(mask_probs: np.ndarray, ref_scores: np.ndarray, gt: GroundTruth,
                  weights: LossWeights) -> np.ndarray:
    """Pair-wise matching cost (N, K) from soft masks and referring scores.

    Cost = lambda_dice * (-mean_t dice_coeff) + lambda_ref * (-mean_t r*r~).
    """
    t, k = ref_scores.shape
    n = gt.n
    if n == 0:
        return np.zeros((0, k))
    p = mask_probs.reshape(t, k, -1)
    g = gt.masks.reshape(n, t, -1).astype(np.float64)
    inter = np.einsum("tkp,ntp->nkt", p, g)
    psum = p.sum(axis=-1)  # (T, K)
    gsum = g.sum(axis=-1)  # (N, T)
    coeff = (2.0 * inter + DICE_EPS) / (psum[None, :, :].transpose(0, 2, 1)
                                        + gsum[:, None, :] + DICE_EPS)
    c_dice = -coeff.mean(axis=-1)  # (N, K)
    c_ref = -(gt.flags[:, None, :] * ref_scores.T[None, :, :]).mean(axis=-1)
    return weights.lambda_dice * c_dice + weights.lambda_ref * c_ref


def _fold_total(cost: np.ndarray, assignment) -> float:
    total = 0.0
    for i, j in enumerate(assignment):
        total = total + float(cost[i, j])
    return total


def _augmenting_path_solve(cost: np.ndarray) -> np.ndarray:
    """Minimum-cost injective assignment by shortest augmenting paths with
    potentials; O(N^2 K). Returns the column chosen for each row."""
    n, k = cost.shape
    u = np.zeros(n + 1)
    v = np.zeros(k + 1)
    match = np.zeros(k + 1, dtype=np.int64)  # row matched to column j (1-based; 0 free)
    way = np.zeros(k + 1, dtype=np.int64)
    for i in range(1, n + 1):
        match[0] = i
        j0 = 0
        minv = np.full(k + 1, np.inf)
        used = np.zeros(k + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match[j0]
            delta = np.inf
            j1 = -1
            for j in range(1, k + 1):
                if used[j]:
                    continue
                cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(k + 1):
                if used[j]:
                    u[match[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0 != 0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1
    out = np.zeros(n, dtype=np.int64)
    for j in range(1, k + 1):
        if match[j] > 0:
            out[match[j] - 1] = j - 1
    return out


def hungarian(cost: np.ndarray) -> MatchResult:
    """Optimal injective assignment of N ground-truth rows to K candidates.

    Ties between equal-total assignments are broken toward the
    lexicographically smallest assignment vector: after solving once, each
    row in turn is pinned to the smallest column that still reaches exactly
    the optimal total (totals always folded in row order, so comparisons are
    bit-deterministic).
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ShapeError(f"cost must be 2-D, got {cost.shape}")
    n, k = cost.shape
    if n > k:
        raise ShapeError(f"need N <= K, got N={n}, K={k}")
    if not np.all(np.isfinite(cost)):
        raise ShapeError("matching costs must be finite")
    if n == 0:
        return MatchResult(np.zeros(0, dtype=np.int64), 0.0)

    best = _augmenting_path_solve(cost)
    best_total = _fold_total(cost, best)

    assign = np.array(best)
    for i in range(n):
        taken = set(assign[:i].tolist())
        for j in range(int(assign[i])):
            if j in taken:
                continue
            free_cols = [c for c in range(k) if c not in taken and c != j]
            if n - i - 1 > 0:
                sub = _augmenting_path_solve(cost[np.ix_(range(i + 1, n), free_cols)])
                tail = [free_cols[c] for c in sub]
            else:
                tail = []
            cand = np.array(list(assign[:i]) + [j] + tail, dtype=np.int64)
            if _fold_total(cost, cand) == best_total:
                assign = cand
                break
    return MatchResult(assign, best_total)


# -- supervised losses -------------------------------------------------------------


def mask_loss(mask_probs: Tensor, gt: GroundTruth, match: MatchResult,
              weights: LossWeights) -> Tensor:
    """Dice + focal over matched pairs, summed over objects and frames.

    Candidates without a matched ground truth contribute nothing.
    """
    if gt.n == 0:
        return Tensor(0.0)
    t = mask_probs.shape[0]
    flat = tz.reshape(mask_probs, (t, mask_probs.shape[1], -1))
    total = Tensor(0.0)
    for nidx, kidx in enumerate(match.assignment):
        p = tz.take(flat, int(kidx), axis=1)  # (T, HW)
        g = Tensor(gt.masks[nidx].reshape(t, -1).astype(np.float64))
        dice = tz.tensor_sum(_dice_terms(p, g))
        focal = tz.tensor_sum(_focal_terms(p, g, FOCAL_ALPHA, FOCAL_GAMMA))
        total = tz.add(total, tz.add(tz.mul(dice, weights.lambda_dice),
                                     tz.mul(focal, weights.lambda_focal)))
    return total


def ref_loss(ref_scores: Tensor, gt: GroundTruth, match: MatchResult,
             weights: LossWeights) -> Tensor:
    """Full binary cross entropy on referring scores, summed over frames.

    Matched candidates are supervised with the object's visibility flags at
    weight 1; every unmatched candidate is supervised toward 0 at the
    negative weight. Scaled by lambda_ref.
    """
    t, k = ref_scores.shape
    target = np.zeros((t, k))
    weight = np.full(k, weights.negative_ref_weight)
    for nidx, kidx in enumerate(match.assignment):
        target[:, kidx] = gt.flags[nidx]
        weight[kidx] = 1.0
    bce = tz.neg(tz.add(tz.mul(Tensor(target), tz.log(ref_scores)),
                        tz.mul(Tensor(1.0 - target), tz.log(tz.sub(1.0, ref_scores)))))
    return tz.mul(tz.tensor_sum(tz.mul(bce, Tensor(weight))), weights.lambda_ref)


def diversity_loss(z1: Tensor, z2: Tensor, z3: Tensor, w_div: Tensor) -> Tensor:
    """Push each frame's kernel Gram matrix (under the learned metric) toward
    identity; the metric itself carries an L1 penalty, added once per call."""
    k = z1.shape[1]
    eye = Tensor(np.eye(k))
    total = Tensor(0.0)
    for z in (z1, z2, z3):
        zw = tz.matmul(z, w_div)  # (T, K, C0)
        gram = tz.matmul(zw, tz.transpose(z, (0, 2, 1)))  # (T, K, K)
        diff = tz.sub(gram, eye)
        fro = tz.sqrt(tz.tensor_sum(tz.mul(diff, diff), axis=(1, 2)))  # (T,)
        total = tz.add(total, tz.tensor_sum(fro))
    return tz.add(total, tz.tensor_sum(tz.absolute(w_div)))


def total_loss(mask_probs: Tensor, ref_scores: Tensor,
               kernels: tuple[Tensor, Tensor, Tensor], w_div: Tensor,
               gt: GroundTruth, weights: LossWeights) -> tuple[LossBreakdown, MatchResult]:
    """Match, then combine: total = mask + ref + lambda_div * diversity."""
    if gt.n > ref_scores.shape[1]:
        raise ShapeError(f"more objects ({gt.n}) than candidates ({ref_scores.shape[1]})")
    cost = matching_cost(mask_probs.data, ref_scores.data, gt, weights)
    match = hungarian(cost)
    lm = mask_loss(mask_probs, gt, match, weights)
    lr = ref_loss(ref_scores, gt, match, weights)
    ld = diversity_loss(*kernels, w_div)
    total = tz.add(tz.add(lm, lr), tz.mul(ld, weights.lambda_div))
    return LossBreakdown(mask=lm, ref=lr, diversity=ld, total=total), match


def mean_pairwise_abs_cosine(z: np.ndarray) -> float:
    """Mean |cos| over distinct kernel-row pairs, averaged over frames.

    Diagnostic for kernel diversity; z is (T, K, C0).
    """
    t, k, _ = z.shape
    if k < 2:
        return 0.0
    acc = 0.0
    for ti in range(t):
        rows = z[ti]
        norms = np.linalg.norm(rows, axis=1)
        normed = rows / np.maximum(norms, 1e-12)[:, None]
        cos = normed @ normed.T
        iu = np.triu_indices(k, 1)
        acc += np.abs(cos[iu]).mean()
    return acc / t
