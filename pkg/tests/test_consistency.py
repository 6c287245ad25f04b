import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tcr.consistency import (
    TcrConfig,
    best_one_path_loss,
    bernoulli_kl,
    compress,
    compressed_prob_loss,
    full_joint_loss,
    select_topk_cells,
    symmetric_consistency,
    symmetric_tcr,
    tcr_loss,
    threshold_topk_loss,
)
from tcr.lattice import EmissionLattice, occupancies

from oracles import (
    brute_force_occupancy,
    fd_lattice_grad,
    projected,
    random_log_lattice,
    random_target,
    rel_err,
)

BIG = TcrConfig(clamp=1e9)


def pair(seed, T=None, U=None, V=None, scale=0.5):
    rng = np.random.default_rng(seed)
    T = T or int(rng.integers(1, 5))
    U = int(rng.integers(0, 4)) if U is None else U
    V = V or int(rng.integers(1, 4))
    li = random_log_lattice(rng, T, U, V)
    lj = li + rng.normal(scale=scale, size=li.shape)
    lj -= np.log(np.exp(lj).sum(-1, keepdims=True))
    return li, lj, random_target(rng, U, V)


def bern(p, q):
    return p * math.log(p / q) + (1 - p) * math.log((1 - p) / (1 - q))


def kl(p, q):
    return sum(a * math.log(a / b) for a, b in zip(p, q) if a > 0)


def all_variants(li, lj, target):
    cfg = BIG
    return {
        "tcr": tcr_loss(li, lj, occupancies(li, target), target, cfg).d_c,
        "tcr_full": tcr_loss(
            li, lj, occupancies(li, target), target, dataclasses.replace(cfg, kl_mode="full_vocab")
        ).d_c,
        "full_joint": full_joint_loss(li, lj),
        "threshold_topk": threshold_topk_loss(li, lj, target, 2, 2),
        "best_one_path": best_one_path_loss(li, lj, target),
        "compressed_prob": compressed_prob_loss(li, lj, target),
    }


class TestKernels:
    def test_bernoulli_matches_closed_form(self):
        val, _, _ = bernoulli_kl(np.log(0.3), np.log(0.6))
        assert float(val) == pytest.approx(bern(0.3, 0.6), abs=1e-14)

    def test_bernoulli_grad(self):
        a, b, eps = math.log(0.3), math.log(0.7), 1e-6
        _, da, db = bernoulli_kl(a, b)
        fa = (bernoulli_kl(a + eps, b)[0] - bernoulli_kl(a - eps, b)[0]) / (2 * eps)
        fb = (bernoulli_kl(a, b + eps)[0] - bernoulli_kl(a, b - eps)[0]) / (2 * eps)
        assert float(da) == pytest.approx(float(fa), rel=1e-7)
        assert float(db) == pytest.approx(float(fb), rel=1e-7)


class TestTcr:
    def test_identical_views(self):
        li, _, target = pair(0, 3, 2, 3)
        assert tcr_loss(li, li, occupancies(li, target), target, BIG).d_c == 0.0

    def test_two_by_one_term_by_term(self):
        li = np.full((2, 2, 2), math.log(0.5))
        lj = li.copy()
        lj[0, 0] = np.log([0.2, 0.8])
        # weights from explicit path enumeration, each group normalized by its own sum
        nb, b, _ = brute_force_occupancy(li, [1])
        wn, wb = nb / nb.sum(), b / b.sum()
        expected = 0.0
        for t in range(2):
            for u in range(2):
                pi, pj = np.exp(li[t, u]), np.exp(lj[t, u])
                expected += wb[t, u] * bern(pi[0], pj[0])
                if u < 1:
                    expected += wn[t, u] * bern(pi[1], pj[1])
        res = tcr_loss(li, lj, occupancies(li, [1]), [1], BIG)
        assert res.d_c > 0
        assert res.d_c == pytest.approx(expected, abs=1e-14)
        assert res.d_c == pytest.approx(0.75 * bern(0.5, 0.8), abs=1e-14)

    def test_clamp(self):
        li, lj, target = pair(1, 4, 3, 3, scale=3.0)
        res = tcr_loss(li, lj, occupancies(li, target), target, TcrConfig(clamp=1e-4), with_grad=True)
        assert res.d_c_raw > 1e-4
        assert res.d_c == 1e-4
        assert not res.grad_i.any() and not res.grad_j.any()

    def test_provenance_mismatch(self):
        li, lj, target = pair(2, 3, 2, 2)
        with pytest.raises(ValueError):
            tcr_loss(li, lj, occupancies(lj, target), target, BIG)

    def test_shape_mismatch(self):
        li, _, target = pair(2, 3, 2, 2)
        with pytest.raises(ValueError):
            tcr_loss(li, li[:2], occupancies(li, target), target, BIG)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 10**9))
    def test_symmetric_is_swap_invariant(self, seed):
        li, lj, target = pair(seed)
        assert symmetric_tcr(li, lj, target, BIG) == symmetric_tcr(lj, li, target, BIG)
        composed = (
            tcr_loss(li, lj, occupancies(li, target), target, BIG).d_c
            + tcr_loss(lj, li, occupancies(lj, target), target, BIG).d_c
        )
        assert abs(symmetric_tcr(li, lj, target, BIG) - composed) <= 1e-12
        assert symmetric_tcr(li, li, target, BIG) == 0.0

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10**9), st.floats(1e-3, 1e3))
    def test_invariant_to_occupancy_scale(self, seed, scale):
        li, lj, target = pair(seed)
        occ = occupancies(li, target)
        raw_n, raw_b = occ.w_nonblank * occ.norm_nonblank, occ.w_blank * occ.norm_blank
        rescaled = dataclasses.replace(
            occ,
            w_nonblank=raw_n * scale / (raw_n * scale).sum() if raw_n.size else raw_n,
            w_blank=raw_b * scale / (raw_b * scale).sum(),
        )
        a = tcr_loss(li, lj, occ, target, BIG).d_c
        b = tcr_loss(li, lj, rescaled, target, BIG).d_c
        assert b == pytest.approx(a, rel=1e-12, abs=1e-15)

    def test_single_path_weighted_average(self):
        # one feasible alignment: blank at (0,0), emit at (1,0), blank at (1,1)
        p = np.array([[[1.0, 0.0], [0.5, 0.5]], [[0.0, 1.0], [1.0, 0.0]]])
        li = EmissionLattice.from_probs(p).logp
        q = np.array([[[0.9, 0.1], [0.4, 0.6]], [[0.3, 0.7], [0.6, 0.4]]])
        lj = np.log(q)
        res = tcr_loss(li, lj, occupancies(li, [1]), [1], BIG)
        # blank transitions at (0,0) and (1,1), each weight 1/2; the one emission weight 1
        expected = 0.5 * kl([1.0, 0.0], q[0, 0]) + 0.5 * kl([1.0, 0.0], q[1, 1]) + kl([1.0, 0.0], [0.7, 0.3])
        assert res.d_c == pytest.approx(expected, abs=1e-14)
        assert res.cells_used == 3


class TestVariants:
    def test_one_cell_full_joint(self):
        li, lj = np.log([[[0.5, 0.5]]]), np.log([[[0.9, 0.1]]])
        expected = 0.5 * math.log(0.5 / 0.9) + 0.5 * math.log(0.5 / 0.1)
        assert full_joint_loss(li, lj) == pytest.approx(expected, abs=1e-15)
        assert expected == pytest.approx(0.5108, abs=1e-4)

    def test_full_joint_mean_over_duplicated_rows(self):
        li, lj, _ = pair(5, 3, 2, 3)
        doubled = full_joint_loss(np.repeat(li, 2, axis=0), np.repeat(lj, 2, axis=0))
        assert doubled == pytest.approx(full_joint_loss(li, lj), rel=1e-13)

    def test_topk_argmax_selection(self):
        p = np.array(
            [[[0.8, 0.2], [0.5, 0.5]], [[0.1, 0.9], [0.5, 0.5]]]
        )  # (t=0: blank dominates emission at u=0); only one emission cell per frame
        li = np.log(p)
        nb, b = select_topk_cells(li, [1], k_blank=1, k_nonblank=1)
        assert nb.tolist() == [[True, False], [True, False]]
        # blank argmax per frame by explicit comparison
        for t in range(2):
            assert b[t].argmax() == int(np.argmax(p[t, :, 0]))
        p3 = np.full((2, 3, 2), 0.5)
        p3[0, 1] = [0.1, 0.9]
        p3[1, 0] = [0.3, 0.7]
        nb, _ = select_topk_cells(np.log(p3), [1, 1], 1, 1)
        assert nb.tolist() == [[False, True, False], [True, False, False]]

    def test_best_path_single_feasible(self):
        p = np.array([[[1.0, 0.0], [0.5, 0.5]], [[0.0, 1.0], [1.0, 0.0]]])
        li = EmissionLattice.from_probs(p).logp
        lj = np.log(np.array([[[0.9, 0.1], [0.4, 0.6]], [[0.3, 0.7], [0.6, 0.4]]]))
        cells = [(0, 0), (1, 0), (1, 1)]
        expected = np.mean([kl(p[c], np.exp(lj[c])) for c in cells])
        assert best_one_path_loss(li, lj, [1]) == pytest.approx(expected, abs=1e-14)

    def test_compressed_lossless_for_single_token_vocab(self):
        li, lj, target = pair(7, 3, 2, 1)
        c, _ = compress(li, target)
        assert np.all(np.exp(c[:, :2, 2]) == 0.0)
        assert compressed_prob_loss(li, lj, target) == pytest.approx(full_joint_loss(li, lj), abs=1e-13)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 10**9))
    def test_compressed_cells_normalized(self, seed):
        li, _, target = pair(seed)
        c, _ = compress(li, target)
        assert np.all(np.abs(np.exp(c).sum(-1) - 1) <= 1e-12)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 10**9))
    def test_saturated_topk_is_full_joint(self, seed):
        li, lj, target = pair(seed)
        U1 = li.shape[1]
        assert abs(threshold_topk_loss(li, lj, target, U1, U1) - full_joint_loss(li, lj)) <= 1e-12

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 10**9))
    def test_nonnegative_and_zero_on_identical(self, seed):
        li, lj, target = pair(seed)
        assert all(v == 0.0 for v in all_variants(li, li, target).values())
        assert all(v >= -1e-15 for v in all_variants(li, lj, target).values())


def directional_value(li, lj, target, cfg, occ):
    from tcr.consistency import directional_consistency

    return directional_consistency(li, lj, target, cfg, occ).d_c


@pytest.mark.parametrize(
    "cfg",
    [
        BIG,
        dataclasses.replace(BIG, kl_mode="full_vocab"),
        dataclasses.replace(BIG, beta_blank=0.3, beta_nonblank=2.0),
        dataclasses.replace(BIG, variant="full_joint"),
        dataclasses.replace(BIG, variant="threshold_topk"),
        dataclasses.replace(BIG, variant="best_one_path"),
        dataclasses.replace(BIG, variant="compressed_prob"),
    ],
    ids=lambda c: f"{c.variant}-{c.kl_mode}-{c.beta_blank}",
)
@pytest.mark.parametrize("seed", range(6))
def test_gradients_match_finite_differences(cfg, seed):
    li, lj, target = pair(seed + 100, V=3)
    occ = occupancies(li, target)
    occ.source = ""  # occupancies stay frozen while li is perturbed
    from tcr.consistency import directional_consistency

    res = directional_consistency(li, lj, target, cfg, occ)
    fd_i = fd_lattice_grad(lambda x: directional_value(x, lj, target, cfg, occ), li)
    fd_j = fd_lattice_grad(lambda x: directional_value(li, x, target, cfg, occ), lj)
    assert rel_err(projected(res.grad_i, li), fd_i, floor=1e-6) <= 1e-4
    assert rel_err(projected(res.grad_j, lj), fd_j, floor=1e-6) <= 1e-4


def test_symmetric_consistency_sums_directions():
    li, lj, target = pair(11, 4, 3, 3)
    val, raw, ga, gb = symmetric_consistency(li, lj, target, BIG)
    assert val == pytest.approx(symmetric_tcr(li, lj, target, BIG), abs=1e-15)
    assert raw == pytest.approx(val)
    assert ga.shape == li.shape and gb.shape == lj.shape
