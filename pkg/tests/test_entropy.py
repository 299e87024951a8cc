import math

import numpy as np
import pytest

from minent.entropy import (
    EPS,
    Clique,
    CliquePartition,
    clique_class_probs,
    clique_weights,
    discovery_loss,
    gaussian_kernel,
    global_entropy,
    hard_negatives,
    localization_loss,
    partition_cliques,
    row_softmax,
    select_clique,
    select_object,
    singleton_partition,
    soft_weights,
)
from minent.geometry import iou_matrix


# ---------------------------------------------------------------------------
# oracles
# ---------------------------------------------------------------------------

def components_oracle(boxes, objectness, tau, top_k):
    """Connected components of the IoU>tau graph on the top-k pool, via BFS.

    The greedy seed-and-absorb loop must produce exactly these components:
    absorbing "any proposal overlapping any member, to closure" is a
    traversal of the overlap graph.
    """
    order = np.argsort(-np.asarray(objectness), kind="stable")[: min(top_k, len(objectness))]
    pool = [int(i) for i in order]
    table = iou_matrix(np.asarray(boxes)[pool], np.asarray(boxes)[pool]) > tau
    seen = set()
    comps = []
    for start in range(len(pool)):
        if start in seen:
            continue
        queue, comp = [start], set()
        while queue:
            v = queue.pop()
            if v in comp:
                continue
            comp.add(v)
            queue.extend(w for w in range(len(pool)) if table[v, w] and w not in comp)
        seen |= comp
        comps.append(frozenset(pool[v] for v in comp))
    return set(comps)


def ref_discovery_loss(labels, member_lists, scores):
    """Plain-loop re-implementation of the discovery objective (no gradients)."""
    scores = np.asarray(scores, dtype=float)
    n_prop, n_cls = scores.shape
    total = 0.0
    if any(labels[y] == 1 for y in range(n_cls)):
        means = np.array([scores[m].mean(axis=0) for m in member_lists])
        e = np.exp(means - means.max())
        p = e / e.sum()
        w = p / np.maximum(p.sum(axis=1, keepdims=True), EPS)
        for y in range(n_cls):
            if labels[y] == 1:
                total += -math.log(max(float((w[:, y] * p[:, y]).sum()), EPS))
    q = np.exp(scores - scores.max(axis=1, keepdims=True))
    q /= q.sum(axis=1, keepdims=True)
    for y in range(n_cls):
        if labels[y] == 0:
            total += float(-np.log(np.maximum(1.0 - q[:, y], EPS)).sum())
    return total


def fd_gradient(fn, x0, step=1e-5):
    g = np.zeros_like(x0)
    flat, gflat = x0.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = fn(x0)
        flat[i] = orig - step
        lo = fn(x0)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * step)
    return g


def rel_err(analytic, numeric):
    scale = max(float(np.abs(numeric).max()), 1e-8)
    return float(np.abs(analytic - numeric).max()) / scale


def random_boxes(rng, n):
    out = np.zeros((n, 4))
    for i in range(n):
        x1, y1 = rng.uniform(0, 0.7, size=2)
        out[i] = [x1, y1, x1 + rng.uniform(0.05, 0.3), y1 + rng.uniform(0.05, 0.3)]
    return out


# ---------------------------------------------------------------------------
# clique partition
# ---------------------------------------------------------------------------

class TestPartition:
    def test_single_proposal(self):
        part = partition_cliques(np.array([[0, 0, 1, 1.0]]), np.array([0.5]), 0.7, 200)
        assert len(part.cliques) == 1
        assert part.cliques[0].members == (0,)
        assert part.pool == (0,)

    def test_two_overlapping_boxes_merge(self):
        boxes = np.array([[0, 0, 1, 1], [0.05, 0, 1.05, 1.0]])  # IoU ~ 0.9
        part = partition_cliques(boxes, np.array([0.9, 0.1]), 0.7, 200)
        assert len(part.cliques) == 1
        assert part.cliques[0].members == (0, 1)

    def test_greedy_trace_three_boxes(self):
        # A and B overlap at ~0.9; C is far away; objectness A > C > B
        boxes = np.array([[0, 0, 1, 1], [0.05, 0, 1.05, 1.0], [5, 5, 6, 6.0]])
        part = partition_cliques(boxes, np.array([0.9, 0.2, 0.5]), 0.7, 200)
        assert [c.members for c in part.cliques] == [(0, 1), (2,)]

    def test_chain_absorbed_to_closure(self):
        # A-B overlap > tau, B-C overlap > tau, A-C below: closure pulls in C
        boxes = np.array([
            [0.0, 0.0, 1.0, 1.0],
            [0.1, 0.0, 1.1, 1.0],
            [0.2, 0.0, 1.2, 1.0],
        ])
        table = iou_matrix(boxes, boxes)
        assert table[0, 1] > 0.7 and table[1, 2] > 0.7 and table[0, 2] < 0.7
        part = partition_cliques(boxes, np.array([0.9, 0.1, 0.5]), 0.7, 200)
        assert len(part.cliques) == 1
        assert part.cliques[0].members == (0, 1, 2)

    def test_top_k_restricts_pool(self):
        boxes = np.array([[0, 0, 1, 1], [10, 10, 11, 11], [20, 20, 21, 21.0]])
        part = partition_cliques(boxes, np.array([0.3, 0.9, 0.5]), 0.7, 2)
        assert part.pool == (1, 2)
        assert {c.members for c in part.cliques} == {(1,), (2,)}

    def test_matches_components_oracle(self):
        rng = np.random.default_rng(7)
        for trial in range(200):
            n = int(rng.integers(1, 20))
            boxes = random_boxes(rng, n)
            obj = rng.uniform(0, 1, size=n)
            top_k = int(rng.integers(1, n + 1))
            tau = float(rng.uniform(0.2, 0.8))
            part = partition_cliques(boxes, obj, tau, top_k)
            got = {frozenset(c.members) for c in part.cliques}
            assert got == components_oracle(boxes, obj, tau, top_k)
            # exact cover: disjoint union equals the pool
            all_members = [m for c in part.cliques for m in c.members]
            assert len(all_members) == len(set(all_members))
            assert set(all_members) == set(part.pool)

    def test_singleton_partition(self):
        boxes = np.array([[0, 0, 1, 1], [0.01, 0, 1.01, 1.0], [3, 3, 4, 4.0]])
        part = singleton_partition(boxes, np.array([0.5, 0.9, 0.1]), 2)
        assert part.pool == (0, 1)
        assert [c.members for c in part.cliques] == [(0,), (1,)]

    def test_clique_of(self):
        part = CliquePartition(
            cliques=(Clique((0, 2)), Clique((1,))), pool=(0, 1, 2), tau=0.7
        )
        assert part.clique_of(2) == 0
        assert part.clique_of(1) == 1
        with pytest.raises(KeyError):
            part.clique_of(9)

    def test_clique_validation(self):
        with pytest.raises(ValueError):
            Clique(members=())
        with pytest.raises(ValueError):
            Clique(members=(1, 1))


# ---------------------------------------------------------------------------
# clique-table probabilities
# ---------------------------------------------------------------------------

def two_singleton_partition():
    return CliquePartition(cliques=(Clique((0,)), Clique((1,))), pool=(0, 1), tau=0.7)


class TestCliqueProbs:
    def test_single_clique_equal_means(self):
        part = CliquePartition(cliques=(Clique((0, 1)),), pool=(0, 1), tau=0.7)
        probs = clique_class_probs(part, np.zeros((2, 2)))
        np.testing.assert_allclose(probs, [[0.5, 0.5]])

    def test_two_cliques_all_equal(self):
        probs = clique_class_probs(two_singleton_partition(), np.zeros((2, 2)))
        np.testing.assert_allclose(probs, 0.25)

    def test_single_clique_means_one_zero(self):
        part = CliquePartition(cliques=(Clique((0,)),), pool=(0,), tau=0.7)
        probs = clique_class_probs(part, np.array([[1.0, 0.0]]))
        e = math.e
        np.testing.assert_allclose(probs, [[e / (e + 1), 1 / (e + 1)]], rtol=1e-12)

    def test_table_sums_to_one_and_shift_invariant(self):
        rng = np.random.default_rng(12)
        for _ in range(200):
            n_prop = int(rng.integers(1, 8))
            n_cls = int(rng.integers(1, 4))
            scores = rng.normal(size=(n_prop, n_cls)) * 3
            part = singleton_partition(
                random_boxes(rng, n_prop), rng.uniform(0, 1, n_prop), n_prop
            )
            probs = clique_class_probs(part, scores)
            assert abs(probs.sum() - 1.0) < 1e-9
            shifted = clique_class_probs(part, scores + 17.3)
            np.testing.assert_allclose(probs, shifted, atol=1e-12)

    def test_mean_uses_member_count(self):
        part = CliquePartition(cliques=(Clique((0, 1, 2)),), pool=(0, 1, 2), tau=0.7)
        scores = np.array([[3.0, 0.0], [0.0, 0.0], [0.0, 0.0]])
        probs = clique_class_probs(part, scores)
        e = math.exp(1.0)  # mean score (1, 0)
        np.testing.assert_allclose(probs, [[e / (e + 1), 1 / (e + 1)]], rtol=1e-12)


class TestCliqueWeights:
    def test_equal_probs_give_uniform_row(self):
        w = clique_weights(np.array([[0.2, 0.2]]))
        np.testing.assert_allclose(w, [[0.5, 0.5]])

    def test_already_normalized_row_unchanged(self):
        row = np.array([[0.7311, 0.2689]])
        np.testing.assert_allclose(clique_weights(row), row, rtol=1e-12)

    def test_rows_sum_to_one_random(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            p = rng.uniform(0.01, 1.0, size=(int(rng.integers(1, 6)), int(rng.integers(1, 5))))
            p /= p.sum()
            w = clique_weights(p)
            np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-9)


class TestGlobalEntropy:
    def test_weighted_sum_one_gives_zero(self):
        probs = np.array([[1.0, 0.0]])
        weights = np.array([[1.0, 0.0]])
        assert global_entropy(probs, weights, 0) == 0.0

    def test_half_half(self):
        probs = np.array([[0.5, 0.5]])
        weights = np.array([[0.5, 0.5]])
        assert global_entropy(probs, weights, 0) == pytest.approx(-math.log(0.25))

    def test_zero_probability_clique_is_inert(self):
        probs = np.array([[0.5, 0.3], [0.0, 0.2]])
        weights = clique_weights(probs)
        base = global_entropy(probs[:1], weights[:1], 0)
        assert global_entropy(probs, weights, 0) == pytest.approx(base)

    def test_select_clique_largest_summand(self):
        probs = np.array([[0.1], [0.6], [0.3]])
        weights = np.ones((3, 1))
        assert select_clique(probs, weights, 0) == 1

    def test_select_clique_tie_lowest_index(self):
        probs = np.array([[0.4], [0.4]])
        weights = np.ones((2, 1))
        assert select_clique(probs, weights, 0) == 0

    def test_select_clique_single(self):
        assert select_clique(np.array([[0.9]]), np.array([[1.0]]), 0) == 0


# ---------------------------------------------------------------------------
# discovery loss + gradient
# ---------------------------------------------------------------------------

class TestDiscoveryLoss:
    def test_all_negative_bag_arithmetic(self):
        # two classes, two proposals, uniform softmax: each class contributes
        # -2 log 0.5
        scores = np.zeros((2, 2))
        out, grad = discovery_loss(np.array([0, 0]), None, scores)
        assert out.loss == pytest.approx(-4 * math.log(0.5))
        assert out.selected == {}
        assert grad.shape == scores.shape

    def test_positive_term_is_global_entropy(self):
        rng = np.random.default_rng(5)
        scores = rng.normal(size=(4, 2))
        part = singleton_partition(random_boxes(rng, 4), rng.uniform(0, 1, 4), 4)
        out, _ = discovery_loss(np.array([1, 1]), part, scores)
        probs = clique_class_probs(part, scores)
        weights = clique_weights(probs)
        want = global_entropy(probs, weights, 0) + global_entropy(probs, weights, 1)
        assert out.loss == pytest.approx(want)
        assert out.entropies[0] == pytest.approx(global_entropy(probs, weights, 0))
        assert out.selected[0] == select_clique(probs, weights, 0)

    def test_positive_without_partition_rejected(self):
        with pytest.raises(ValueError):
            discovery_loss(np.array([1]), None, np.zeros((2, 1)))

    def test_loss_matches_reference(self):
        rng = np.random.default_rng(8)
        for _ in range(50):
            n_prop = int(rng.integers(2, 7))
            n_cls = int(rng.integers(2, 4))
            scores = rng.normal(size=(n_prop, n_cls)) * 2
            labels = rng.integers(0, 2, size=n_cls)
            boxes = random_boxes(rng, n_prop)
            part = partition_cliques(boxes, rng.uniform(0, 1, n_prop), 0.5, n_prop)
            out, _ = discovery_loss(labels, part, scores)
            member_lists = [list(c.members) for c in part.cliques]
            assert out.loss == pytest.approx(ref_discovery_loss(labels, member_lists, scores))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(9)
        worst = 0.0
        for _ in range(60):
            n_prop = int(rng.integers(2, 7))
            n_cls = int(rng.integers(2, 4))
            scores = rng.normal(size=(n_prop, n_cls))
            labels = rng.integers(0, 2, size=n_cls)
            boxes = random_boxes(rng, n_prop)
            part = partition_cliques(boxes, rng.uniform(0, 1, n_prop), 0.5, n_prop)
            _, grad = discovery_loss(labels, part, scores)
            member_lists = [list(c.members) for c in part.cliques]
            num = fd_gradient(lambda s: ref_discovery_loss(labels, member_lists, s), scores)
            worst = max(worst, rel_err(grad, num))
        assert worst < 1e-4

    def test_normalization_outputs(self):
        rng = np.random.default_rng(10)
        scores = rng.normal(size=(5, 3))
        part = partition_cliques(random_boxes(rng, 5), rng.uniform(0, 1, 5), 0.6, 5)
        out, _ = discovery_loss(np.array([1, 0, 1]), part, scores)
        assert abs(out.clique_probs.sum() - 1.0) < 1e-9
        np.testing.assert_allclose(out.clique_weights.sum(axis=1), 1.0, atol=1e-9)


# ---------------------------------------------------------------------------
# kernel, soft weights, localization loss
# ---------------------------------------------------------------------------

class TestKernelAndWeights:
    def test_kernel_at_one(self):
        assert gaussian_kernel(1.0, 4.0) == 1.0

    def test_kernel_at_zero(self):
        assert gaussian_kernel(0.0, 4.0) == pytest.approx(math.exp(-4.0))

    def test_kernel_monotone_in_overlap(self):
        os = np.linspace(0, 1, 50)
        vals = gaussian_kernel(os, 4.0)
        assert (np.diff(vals) > 0).all()

    def test_soft_weights_equal_probs(self):
        w = soft_weights(np.array([0.3, 0.3, 0.3]), np.array([1.0, 0.8, 0.6]), 4.0)
        np.testing.assert_allclose(w, 1.0)

    def test_soft_weights_worked_example(self):
        # ious of 1.0 make both kernels 1
        w = soft_weights(np.array([0.2, 0.4]), np.array([1.0, 1.0]), 4.0)
        np.testing.assert_allclose(w, [1.5, 0.75])

    def test_soft_weights_singleton(self):
        np.testing.assert_allclose(soft_weights(np.array([0.7]), np.array([1.0]), 4.0), [1.0])

    def test_soft_weights_nonnegative_random(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            n = int(rng.integers(1, 8))
            w = soft_weights(rng.uniform(0, 1, n), rng.uniform(0, 1, n), 4.0)
            assert (w >= 0).all()


class TestSelectObject:
    def test_argmax_member(self):
        clique = Clique((0, 1, 2))
        probs = np.array([[0.2], [0.9], [0.4]])
        assert select_object(clique, probs, 0) == 1

    def test_singleton(self):
        assert select_object(Clique((3,)), np.zeros((5, 2)), 1) == 3

    def test_tie_lowest_index(self):
        probs = np.array([[0.5], [0.5]])
        assert select_object(Clique((0, 1)), probs, 0) == 0


class TestHardNegatives:
    def test_all_near_gives_empty(self):
        boxes = np.array([[0, 0, 1, 1], [0.02, 0, 1.02, 1.0]])
        assert hard_negatives(Clique((0, 1)), 0, boxes) == []

    def test_far_member_included(self):
        boxes = np.array([[0, 0, 1, 1], [0.5, 0.5, 1.5, 1.5]])  # IoU = 1/7 < 0.5
        assert hard_negatives(Clique((0, 1)), 0, boxes) == [1]

    def test_h_star_never_included(self):
        boxes = np.array([[0, 0, 1, 1], [0.5, 0.5, 1.5, 1.5]])
        assert 0 not in hard_negatives(Clique((0, 1)), 0, boxes)

    def test_h_star_must_be_member(self):
        with pytest.raises(ValueError):
            hard_negatives(Clique((0, 1)), 2, np.zeros((3, 4)) + [[0, 0, 1, 1]])


class TestLocalizationLoss:
    def test_perfect_probs_zero_loss(self):
        probs = np.array([[1.0, 0.0], [1.0, 0.0]])
        boxes = np.array([[0, 0, 1, 1], [0.01, 0, 1.01, 1.0]])
        out, grad = localization_loss(Clique((0, 1)), 0, probs, boxes, 4.0, 0)
        assert out.loss == pytest.approx(0.0, abs=1e-9)

    def test_two_member_arithmetic(self):
        # equal probs make both soft weights 1; loss = -2 * 0.5 * log 0.5
        probs = np.array([[0.5, 0.5], [0.5, 0.5]])
        boxes = np.array([[0, 0, 1, 1], [0, 0, 1, 1.0]])
        out, _ = localization_loss(Clique((0, 1)), 0, probs, boxes, 4.0, 0)
        assert out.loss == pytest.approx(-math.log(0.5))
        np.testing.assert_allclose(out.soft_weights, 1.0)

    def test_gradient_zero_outside_clique(self):
        probs = row_softmax(np.random.default_rng(0).normal(size=(4, 2)))
        boxes = random_boxes(np.random.default_rng(1), 4)
        _, grad = localization_loss(Clique((1, 2)), 1, probs, boxes, 4.0, 0)
        assert not grad[0].any() and not grad[3].any()

    def test_gradient_matches_frozen_finite_differences(self):
        rng = np.random.default_rng(14)
        worst = 0.0
        for _ in range(60):
            n_prop = int(rng.integers(2, 7))
            n_cls = int(rng.integers(2, 4))
            scores = rng.normal(size=(n_prop, n_cls))
            boxes = random_boxes(rng, n_prop)
            size = int(rng.integers(1, n_prop + 1))
            members = tuple(sorted(rng.choice(n_prop, size=size, replace=False).tolist()))
            clique = Clique(members)
            cls = int(rng.integers(0, n_cls))
            probs0 = row_softmax(scores)
            h_star = select_object(clique, probs0, cls)
            out, grad = localization_loss(clique, h_star, probs0, boxes, 4.0, cls)
            # freeze the pseudo labels at the evaluation point, then
            # differentiate -sum kappa * log softmax(s) numerically
            member_list = list(members)
            ious = iou_matrix(boxes[member_list], boxes[h_star : h_star + 1])[:, 0]
            kappa = soft_weights(probs0[member_list, cls], ious, 4.0) * probs0[member_list, cls]

            def frozen(s):
                p = row_softmax(s)
                return float(-(kappa * np.log(np.maximum(p[member_list, cls], EPS))).sum())

            num = fd_gradient(frozen, scores)
            worst = max(worst, rel_err(grad, num))
        assert worst < 1e-4

    def test_h_star_must_be_member(self):
        probs = np.full((3, 2), 0.5)
        boxes = random_boxes(np.random.default_rng(2), 3)
        with pytest.raises(ValueError):
            localization_loss(Clique((0, 1)), 2, probs, boxes, 4.0, 0)


class TestRowSoftmax:
    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(6)
        for _ in range(200):
            s = rng.normal(size=(int(rng.integers(1, 9)), int(rng.integers(1, 5)))) * 5
            q = row_softmax(s)
            np.testing.assert_allclose(q.sum(axis=1), 1.0, atol=1e-9)
            assert (q >= 0).all()

    def test_uniform_on_equal_scores(self):
        np.testing.assert_allclose(row_softmax(np.zeros((3, 4))), 0.25)
