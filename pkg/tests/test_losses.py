import itertools
import math

import numpy as np
import pytest

from refseg import losses as L
from refseg import tensor as tz
from refseg.losses import GroundTruth, LossWeights, dice_loss, focal_loss, hungarian
from refseg.tensor import ShapeError, Tensor, grad_check


def rng(seed=0):
    return np.random.default_rng(seed)


# -- dice ---------------------------------------------------------------------

def test_dice_identical_binary_masks_zero():
    g = (rng(0).random((6, 6)) > 0.5).astype(float)
    assert dice_loss(Tensor(g), g).data == 0.0


def test_dice_disjoint_closed_form():
    p = np.zeros((4, 4))
    p[0, :4] = 1.0
    p[1, :4] = 1.0
    g = np.zeros((4, 4))
    g[2, :4] = 1.0
    g[3, :4] = 1.0
    out = dice_loss(Tensor(p), g).data
    np.testing.assert_allclose(out, 16.0 / 17.0, rtol=0, atol=1e-15)


def test_dice_half_overlap_closed_form():
    p = np.ones((4, 4))
    g = np.zeros((4, 4))
    g[:2] = 1.0
    out = dice_loss(Tensor(p), g).data
    np.testing.assert_allclose(out, 1.0 - 17.0 / 25.0, rtol=0, atol=1e-15)


def test_dice_range_property():
    g = rng(1)
    for _ in range(20):
        p = g.uniform(1e-6, 1 - 1e-6, size=(5, 5))
        m = (g.random((5, 5)) > 0.5).astype(float)
        d = dice_loss(Tensor(p), m).data
        assert 0.0 <= d < 1.0


def test_dice_shape_mismatch():
    with pytest.raises(ShapeError):
        dice_loss(Tensor(np.zeros((2, 2))), np.zeros((3, 3)))


# -- focal ---------------------------------------------------------------------

def test_focal_gamma_zero_is_scaled_bce():
    g = rng(2)
    p = g.uniform(0.01, 0.99, size=(8, 8))
    m = (g.random((8, 8)) > 0.5).astype(float)
    got = focal_loss(Tensor(p), m, alpha=0.5, gamma=0.0).data
    bce = -(m * np.log(p) + (1 - m) * np.log(1 - p)).mean()
    np.testing.assert_allclose(got, 0.5 * bce, rtol=0, atol=1e-12)


def test_focal_near_perfect_is_tiny():
    m = np.ones((4, 4))
    p = np.full((4, 4), 0.999)
    assert focal_loss(Tensor(p), m).data < 1e-5


def test_focal_single_pixel_closed_form():
    got = focal_loss(Tensor(np.array([[0.5]])), np.array([[1.0]])).data
    want = -0.25 * 0.25 * math.log(0.5)
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-15)


def test_focal_nonnegative_property():
    g = rng(3)
    for _ in range(20):
        p = g.uniform(1e-6, 1 - 1e-6, size=(5, 5))
        m = (g.random((5, 5)) > 0.5).astype(float)
        assert focal_loss(Tensor(p), m).data >= 0.0


# -- matching cost ----------------------------------------------------------------

def default_weights():
    return LossWeights()


def test_matching_cost_perfect_extreme():
    t, k, h = 2, 3, 4
    gt_mask = np.zeros((1, t, h, h))
    gt_mask[0, :, :2] = 1
    probs = np.full((t, k, h, h), 1e-9)
    probs[:, 1] = gt_mask[0]
    ref = np.zeros((t, k))
    ref[:, 1] = 1.0
    gt = GroundTruth(masks=gt_mask, flags=np.ones((1, t)))
    cost = L.matching_cost(probs, ref, gt, default_weights())
    np.testing.assert_allclose(cost[0, 1], -10.0, atol=1e-6)


def test_matching_cost_zero_scores_kill_ref_term():
    t, k, h = 2, 2, 4
    g = rng(4)
    probs = g.uniform(0.01, 0.99, size=(t, k, h, h))
    gt = GroundTruth(masks=(g.random((1, t, h, h)) > 0.5).astype(float),
                     flags=np.ones((1, t)))
    w = default_weights()
    c0 = L.matching_cost(probs, np.zeros((t, k)), gt, w)
    c1 = L.matching_cost(probs, np.zeros((t, k)), gt,
                         LossWeights(lambda_ref=0.0))
    np.testing.assert_allclose(c0, c1, atol=1e-15)


def oracle_matching_cost(probs, ref, gt, w):
    n, (t, k) = gt.n, ref.shape
    out = np.zeros((n, k))
    for ni in range(n):
        for ki in range(k):
            dsum, rsum = 0.0, 0.0
            for ti in range(t):
                p = probs[ti, ki].reshape(-1)
                g = gt.masks[ni, ti].reshape(-1)
                coeff = (2 * (p * g).sum() + 1.0) / (p.sum() + g.sum() + 1.0)
                dsum += coeff
                rsum += gt.flags[ni, ti] * ref[ti, ki]
            out[ni, ki] = w.lambda_dice * (-dsum / t) + w.lambda_ref * (-rsum / t)
    return out


def test_matching_cost_vs_definitional_oracle():
    g = rng(5)
    t, k, n, h = 3, 5, 2, 6
    probs = g.uniform(0.01, 0.99, size=(t, k, h, h))
    ref = g.uniform(0.01, 0.99, size=(t, k))
    gt = GroundTruth(masks=(g.random((n, t, h, h)) > 0.5).astype(float),
                     flags=(g.random((n, t)) > 0.3).astype(float))
    got = L.matching_cost(probs, ref, gt, default_weights())
    want = oracle_matching_cost(probs, ref, gt, default_weights())
    assert np.max(np.abs(got - want)) <= 1e-9


# -- hungarian ----------------------------------------------------------------------

def brute_force_assignment(cost):
    n, k = cost.shape
    best, best_total = None, math.inf
    for perm in itertools.permutations(range(k), n):
        total = 0.0
        for i in range(n):
            total = total + float(cost[i, perm[i]])
        if total < best_total:
            best, best_total = perm, total
    return np.array(best), best_total


def test_hungarian_trivial_cases():
    res = hungarian(np.array([[1.0, 2.0], [2.0, 1.0]]))
    np.testing.assert_array_equal(res.assignment, [0, 1])
    assert res.total_cost == 2.0
    res = hungarian(np.array([[2.0, 1.0], [1.0, 2.0]]))
    np.testing.assert_array_equal(res.assignment, [1, 0])
    assert res.total_cost == 2.0


def test_hungarian_lexicographic_ties():
    res = hungarian(np.zeros((2, 3)))
    np.testing.assert_array_equal(res.assignment, [0, 1])
    res = hungarian(np.array([[1.0, 1.0], [1.0, 1.0]]))
    np.testing.assert_array_equal(res.assignment, [0, 1])
    # forcing row 0 away from column 0 still leaves the smallest option
    res = hungarian(np.array([[5.0, 1.0, 1.0], [1.0, 5.0, 1.0]]))
    np.testing.assert_array_equal(res.assignment, [1, 0])


def test_hungarian_matches_brute_force_random():
    g = rng(6)
    for _ in range(200):
        k = int(g.integers(1, 9))
        n = int(g.integers(1, k + 1))
        cost = g.normal(size=(n, k))
        res = hungarian(cost)
        want_assign, want_total = brute_force_assignment(cost)
        assert res.total_cost == want_total
        np.testing.assert_array_equal(res.assignment, want_assign)


def test_hungarian_candidate_permutation_invariance():
    g = rng(7)
    cost = g.normal(size=(3, 6))
    perm = np.array([4, 2, 0, 5, 1, 3])
    res0 = hungarian(cost)
    res1 = hungarian(cost[:, perm])
    assert abs(res0.total_cost - res1.total_cost) <= 1e-12
    np.testing.assert_array_equal(perm[res1.assignment], res0.assignment)


def test_hungarian_rejects_bad_inputs():
    with pytest.raises(ShapeError):
        hungarian(np.zeros((3, 2)))
    with pytest.raises(ShapeError):
        hungarian(np.array([[np.inf, 0.0]]))


# -- supervised losses -----------------------------------------------------------------

def small_problem(seed, t=2, k=4, n=2, h=6):
    g = rng(seed)
    probs = g.uniform(0.05, 0.95, size=(t, k, h, h))
    ref = g.uniform(0.05, 0.95, size=(t, k))
    gt = GroundTruth(masks=(g.random((n, t, h, h)) > 0.5).astype(float),
                     flags=(g.random((n, t)) > 0.3).astype(float))
    return probs, ref, gt


def test_mask_loss_perfect_predictions_near_zero():
    t, h = 2, 4
    gt_mask = np.zeros((1, t, h, h))
    gt_mask[0, :, :2] = 1
    probs = np.where(gt_mask[0] > 0, 1 - 1e-9, 1e-9)[:, None, :, :]
    gt = GroundTruth(masks=gt_mask, flags=np.ones((1, t)))
    match = L.MatchResult(np.array([0]), 0.0)
    loss = L.mask_loss(Tensor(probs), gt, match, default_weights()).data
    assert loss < 1e-6


def test_mask_loss_empty_gt_is_zero():
    gt = GroundTruth(masks=np.zeros((0, 2, 4, 4)), flags=np.zeros((0, 2)))
    loss = L.mask_loss(Tensor(rng(8).uniform(0.1, 0.9, size=(2, 3, 4, 4))),
                       gt, L.MatchResult(np.zeros(0, dtype=int), 0.0), default_weights())
    assert loss.data == 0.0


def oracle_mask_loss(probs, gt, assignment, w):
    total = 0.0
    t = probs.shape[0]
    for ni, ki in enumerate(assignment):
        for ti in range(t):
            p = probs[ti, ki].reshape(-1)
            g = gt.masks[ni, ti].reshape(-1)
            dice = 1 - (2 * (p * g).sum() + 1) / (p.sum() + g.sum() + 1)
            focal = (-(g * 0.25 * (1 - p) ** 2 * np.log(p))
                     - ((1 - g) * 0.75 * p ** 2 * np.log(1 - p))).mean()
            total += w.lambda_dice * dice + w.lambda_focal * focal
    return total


def test_mask_loss_vs_definitional_oracle():
    probs, ref, gt = small_problem(9)
    w = default_weights()
    match = hungarian(L.matching_cost(probs, ref, gt, w))
    got = L.mask_loss(Tensor(probs), gt, match, w).data
    want = oracle_mask_loss(probs, gt, match.assignment, w)
    assert abs(got - want) <= 1e-9


def test_ref_loss_perfect_matched_near_zero():
    t, k = 3, 2
    ref = np.full((t, k), 1e-12)
    ref[:, 0] = 1 - 1e-9
    gt = GroundTruth(masks=np.ones((1, t, 2, 2)), flags=np.ones((1, t)))
    match = L.MatchResult(np.array([0]), 0.0)
    loss = L.ref_loss(Tensor(ref), gt, match, default_weights()).data
    assert loss < 1e-6


def test_ref_loss_unmatched_closed_form():
    t, k = 4, 1
    ref = np.full((t, k), 0.5)
    gt = GroundTruth(masks=np.zeros((0, t, 2, 2)), flags=np.zeros((0, t)))
    match = L.MatchResult(np.zeros(0, dtype=int), 0.0)
    w = default_weights()
    loss = L.ref_loss(Tensor(ref), gt, match, w).data
    want = 0.1 * w.lambda_ref * t * math.log(2.0)
    np.testing.assert_allclose(loss, want, rtol=0, atol=1e-12)


def oracle_ref_loss(ref, gt, assignment, w):
    t, k = ref.shape
    total = 0.0
    matched = {int(ki): ni for ni, ki in enumerate(assignment)}
    for ki in range(k):
        wt = 1.0 if ki in matched else w.negative_ref_weight
        for ti in range(t):
            y = gt.flags[matched[ki], ti] if ki in matched else 0.0
            total += wt * -(y * math.log(ref[ti, ki]) + (1 - y) * math.log(1 - ref[ti, ki]))
    return w.lambda_ref * total


def test_ref_loss_vs_definitional_oracle():
    probs, ref, gt = small_problem(10)
    w = default_weights()
    match = hungarian(L.matching_cost(probs, ref, gt, w))
    got = L.ref_loss(Tensor(ref), gt, match, w).data
    want = oracle_ref_loss(ref, gt, match.assignment, w)
    assert abs(got - want) <= 1e-9


def test_ref_loss_additive_over_candidates_and_frames():
    probs, ref, gt = small_problem(11, t=3, k=3, n=1)
    w = default_weights()
    match = hungarian(L.matching_cost(probs, ref, gt, w))
    total = L.ref_loss(Tensor(ref), gt, match, w).data
    acc = 0.0
    matched = {int(ki): ni for ni, ki in enumerate(match.assignment)}
    for ki in range(3):
        for ti in range(3):
            y = gt.flags[matched[ki], ti] if ki in matched else 0.0
            wt = 1.0 if ki in matched else w.negative_ref_weight
            acc += w.lambda_ref * wt * -(y * math.log(ref[ti, ki])
                                         + (1 - y) * math.log(1 - ref[ti, ki]))
    np.testing.assert_allclose(total, acc, atol=1e-12)


# -- diversity ---------------------------------------------------------------------------

def test_diversity_orthonormal_rows_gives_c0():
    c0, k, t = 8, 4, 2
    q, _ = np.linalg.qr(rng(12).normal(size=(c0, c0)))
    z = np.broadcast_to(q[:k], (t, k, c0)).copy()
    zt = Tensor(z)
    out = L.diversity_loss(zt, zt, zt, Tensor(np.eye(c0))).data
    np.testing.assert_allclose(out, float(c0), rtol=0, atol=1e-9)


def test_diversity_identical_unit_rows_closed_form():
    c0, k = 8, 5
    v = np.zeros(c0)
    v[0] = 1.0
    z = np.broadcast_to(v, (1, k, c0)).copy()
    zt = Tensor(z)
    zeros = Tensor(np.zeros((1, k, c0)))
    # single (t, j) term: zeros for the other two kernel sets keep their
    # gram terms at ||0 - I||_F = sqrt(K) each
    out = L.diversity_loss(zt, zeros, zeros, Tensor(np.eye(c0))).data
    want = math.sqrt(k * k - k) + 2 * math.sqrt(k) + c0
    np.testing.assert_allclose(out, want, rtol=0, atol=1e-12)


def oracle_diversity(zs, w):
    total = 0.0
    for z in zs:
        for ti in range(z.shape[0]):
            m = z[ti] @ w @ z[ti].T - np.eye(z.shape[1])
            total += math.sqrt((m * m).sum())
    return total + np.abs(w).sum()


def test_diversity_vs_definitional_oracle():
    g = rng(13)
    zs = [g.normal(size=(2, 4, 8)) for _ in range(3)]
    w = g.normal(size=(8, 8))
    got = L.diversity_loss(*[Tensor(z) for z in zs], Tensor(w)).data
    assert abs(got - oracle_diversity(zs, w)) <= 1e-9


def test_diversity_nonnegative_property():
    g = rng(14)
    for _ in range(10):
        zs = [Tensor(g.normal(size=(2, 3, 8))) for _ in range(3)]
        w = Tensor(g.normal(size=(8, 8)))
        assert L.diversity_loss(*zs, w).data >= 0.0


# -- total objective ------------------------------------------------------------------------

def test_total_loss_composition_at_zero_lambda_div():
    probs, ref, gt = small_problem(15)
    w = LossWeights(lambda_div=0.0)
    kernels = tuple(Tensor(rng(16).normal(size=(2, 4, 8))) for _ in range(3))
    breakdown, _ = L.total_loss(Tensor(probs), Tensor(ref), kernels,
                                Tensor(np.eye(8)), gt, w)
    assert breakdown.total.data == breakdown.mask.data + breakdown.ref.data


def test_total_loss_all_zero_components():
    t, k = 2, 3
    gt = GroundTruth(masks=np.zeros((0, t, 4, 4)), flags=np.zeros((0, t)))
    probs = Tensor(np.full((t, k, 4, 4), 0.5))
    ref = Tensor(np.full((t, k), 1e-12))
    kernels = tuple(Tensor(np.zeros((t, k, 8))) for _ in range(3))
    w = LossWeights(lambda_div=0.0, negative_ref_weight=0.0)
    breakdown, _ = L.total_loss(probs, ref, kernels, Tensor(np.zeros((8, 8))), gt, w)
    np.testing.assert_allclose(breakdown.total.data, 0.0, atol=1e-9)


def test_total_loss_wdiv_gradcheck_away_from_zeros():
    g = rng(17)
    probs, ref, gt = small_problem(18, t=2, k=3, n=1, h=4)
    kernels = tuple(Tensor(g.normal(size=(2, 3, 4))) for _ in range(3))
    w_div = Tensor(np.eye(4) + g.uniform(0.2, 0.5, size=(4, 4)) * np.sign(g.normal(size=(4, 4))))
    w = default_weights()

    def f(wd):
        breakdown, _ = L.total_loss(Tensor(probs), Tensor(ref), kernels, wd, gt, w)
        return breakdown.total

    rep = grad_check(f, [w_div], name="w_div")
    assert rep.max_rel_error <= 1e-4, rep.max_rel_error


def test_total_loss_rejects_too_many_objects():
    probs, ref, _ = small_problem(19, k=2)
    gt = GroundTruth(masks=np.zeros((3, 2, 6, 6)), flags=np.zeros((3, 2)))
    with pytest.raises(ShapeError):
        L.total_loss(Tensor(probs), Tensor(ref),
                     tuple(Tensor(np.zeros((2, 2, 8))) for _ in range(3)),
                     Tensor(np.eye(8)), gt, default_weights())


def test_mean_pairwise_abs_cosine():
    z = np.zeros((1, 2, 4))
    z[0, 0, 0] = 1.0
    z[0, 1, 1] = 1.0
    assert L.mean_pairwise_abs_cosine(z) == 0.0
    z[0, 1] = z[0, 0]
    np.testing.assert_allclose(L.mean_pairwise_abs_cosine(z), 1.0)
