import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lisa_mimo.channel import ChannelConfig, make_rng, sample_batch
from lisa_mimo.classic import (
    ComplexityBudgetError,
    DegenerateChannelError,
    candidate_indices,
    mld_detect,
    mld_indices,
    mmse_detect,
    mmse_estimate,
    sphere_detect,
    sphere_search,
    zf_detect,
    zf_estimate,
    zfdf_detect,
    zfdf_indices,
)
from lisa_mimo.linalg import ql_decompose, residual_metric, rotate_observation
from lisa_mimo.modem import make_constellation

QPSK = make_constellation("QPSK")
QAM16 = make_constellation("QAM16")


def brute_force(H, y, c):
    """Plain-loop exhaustive search; first minimiser in lexicographic order wins."""
    best, arg = np.inf, None
    for idx in itertools.product(range(c.M), repeat=H.shape[1]):
        s = c.alphabet[list(idx)]
        r = y - H @ s
        val = float(r @ r)
        if val < best:
            best, arg = val, s
    return arg, best


def random_instance(seed, n=4, m=None, c=QPSK, noise=0.3):
    rng = np.random.default_rng(seed)
    m = m or n
    H = rng.standard_normal((m, n))
    s = c.alphabet[rng.integers(0, c.M, n)]
    y = H @ s + noise * rng.standard_normal(m)
    return H, s, y


class TestLinear:
    def test_zf_matches_pinv(self):
        rng = np.random.default_rng(0)
        H, y = rng.standard_normal((10, 6)), rng.standard_normal(10)
        np.testing.assert_allclose(zf_estimate(H, y), np.linalg.pinv(H) @ y, atol=1e-10)

    def test_zf_matches_lstsq(self):
        rng = np.random.default_rng(1)
        H, y = rng.standard_normal((8, 8)), rng.standard_normal(8)
        ref = np.linalg.lstsq(H, y, rcond=None)[0]
        np.testing.assert_allclose(zf_estimate(H, y), ref, atol=1e-10)

    def test_mmse_zero_noise_is_zf(self):
        rng = np.random.default_rng(2)
        H, y = rng.standard_normal((8, 8)), rng.standard_normal(8)
        np.testing.assert_allclose(mmse_estimate(H, y, 0.0, 0.5), zf_estimate(H, y), atol=1e-10)
        np.testing.assert_array_equal(mmse_detect(H, y, QPSK, 0.0), zf_detect(H, y, QPSK))

    @pytest.mark.parametrize("v", [0.01, 0.5, 3.0])
    def test_mmse_augmented_least_squares(self, v):
        # ridge regression written as an augmented least-squares problem
        rng = np.random.default_rng(3)
        H, y = rng.standard_normal((8, 6)), rng.standard_normal(8)
        lam = np.sqrt(v / 0.5)
        A = np.vstack([H, lam * np.eye(6)])
        b = np.concatenate([y, np.zeros(6)])
        ref = np.linalg.lstsq(A, b, rcond=None)[0]
        assert np.max(np.abs(mmse_estimate(H, y, v, 0.5) - ref)) <= 1e-10

    def test_mmse_shrinks(self):
        rng = np.random.default_rng(4)
        H, y = rng.standard_normal((6, 6)), rng.standard_normal(6)
        norms = [np.linalg.norm(mmse_estimate(H, y, v, 0.5)) for v in (0.0, 1.0, 10.0, 100.0)]
        assert all(a >= b for a, b in zip(norms, norms[1:]))

    def test_negative_noise(self):
        with pytest.raises(ValueError):
            mmse_detect(np.eye(2), np.ones(2), QPSK, -1.0)

    def test_singular_zf(self):
        with pytest.raises(DegenerateChannelError):
            zf_detect(np.zeros((4, 4)), np.ones(4), QPSK)

    def test_batched(self):
        rng = np.random.default_rng(5)
        H, y = rng.standard_normal((7, 6, 4)), rng.standard_normal((7, 6))
        out = zf_estimate(H, y)
        for b in range(7):
            np.testing.assert_allclose(out[b], zf_estimate(H[b], y[b]), atol=1e-12)


class TestZfdf:
    @pytest.mark.parametrize("seed", range(5))
    def test_greedy_oracle(self, seed):
        # each step minimises the scalar residual given the earlier decisions
        H, _, y = random_instance(seed, 6, c=QAM16, noise=0.5)
        ql = ql_decompose(H)
        yt = rotate_observation(ql.Q, y)
        got = zfdf_detect(ql, yt, QAM16)
        s = np.zeros(6)
        for k in range(6):
            costs = [(yt[k] - ql.L[k, :k] @ s[:k] - ql.L[k, k] * a) ** 2 for a in QAM16.alphabet]
            s[k] = QAM16.alphabet[int(np.argmin(costs))]
        np.testing.assert_array_equal(got, s)

    def test_noiseless(self):
        H, s, y = random_instance(10, 8, noise=0.0)
        ql = ql_decompose(H)
        np.testing.assert_array_equal(zfdf_detect(ql, rotate_observation(ql.Q, y), QPSK), s)

    def test_stack_matches_single(self):
        b = sample_batch(ChannelConfig(2, 2), QAM16, make_rng(0), 20)
        idx = zfdf_indices(b.L, b.y_tilde, QAM16)
        for i in range(20):
            np.testing.assert_array_equal(idx[i], zfdf_indices(b.L[i], b.y_tilde[i], QAM16))

    def test_degenerate(self):
        L = np.diag([1.0, 0.0])
        with pytest.raises(DegenerateChannelError):
            zfdf_indices(L, np.ones(2), QPSK)


class TestMld:
    def test_candidate_order(self):
        np.testing.assert_array_equal(candidate_indices(2, 2), [[0, 0], [0, 1], [1, 0], [1, 1]])
        assert candidate_indices(4, 3).shape == (64, 3)

    def test_two_by_two_hand_case(self):
        a = QPSK.alphabet[1]
        H = np.eye(2)
        y = np.array([0.1, -2.0])
        np.testing.assert_array_equal(mld_detect(H, y, QPSK), [a, -a])

    @pytest.mark.parametrize("seed", range(6))
    @pytest.mark.parametrize("c", [QPSK, QAM16], ids=["qpsk", "qam16"])
    def test_matches_brute_force(self, seed, c):
        n = 4 if c is QPSK else 2
        H, _, y = random_instance(seed, n, m=n + 2, c=c, noise=0.6)
        ref, best = brute_force(H, y, c)
        got = mld_detect(H, y, c)
        np.testing.assert_array_equal(got, ref)
        assert residual_metric(y, H, got) == pytest.approx(best, rel=1e-12)

    @pytest.mark.parametrize("seed", range(10))
    def test_not_worse_than_linear(self, seed):
        H, _, y = random_instance(seed, 6, noise=1.0)
        r = residual_metric(y, H, mld_detect(H, y, QPSK))
        assert r <= residual_metric(y, H, zf_detect(H, y, QPSK)) + 1e-12
        assert r <= residual_metric(y, H, mmse_detect(H, y, QPSK, 1.0)) + 1e-12

    def test_tie_goes_to_first_candidate(self):
        # H has a zero column: both values of that symbol fit equally well
        H = np.array([[1.0, 0.0], [0.0, 0.0]])
        y = np.array([1.0, 0.0])
        np.testing.assert_array_equal(mld_detect(H, y, QPSK), QPSK.alphabet[[1, 0]])

    def test_chunking_invariant(self):
        b = sample_batch(ChannelConfig(2, 2), QAM16, make_rng(1), 8)
        a = mld_indices(b.H, b.y, QAM16, chunk=7)
        np.testing.assert_array_equal(a, mld_indices(b.H, b.y, QAM16))

    def test_budget(self):
        with pytest.raises(ComplexityBudgetError):
            mld_detect(np.eye(8), np.ones(8), QAM16, budget=1000)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            mld_detect(np.eye(4), np.ones(3), QPSK)


class TestSphere:
    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2 ** 32 - 1), noise=st.sampled_from([0.1, 0.7, 2.0]),
           name=st.sampled_from(["QPSK", "QAM16"]))
    def test_equals_mld(self, seed, noise, name):
        c = make_constellation(name)
        n = 6 if c.M == 2 else 4
        H, _, y = random_instance(seed, n, c=c, noise=noise)
        ql = ql_decompose(H)
        sd = sphere_detect(ql, rotate_observation(ql.Q, y), c)
        np.testing.assert_array_equal(sd, mld_detect(H, y, c))

    @pytest.mark.parametrize("seed", range(5))
    def test_noiseless_node_count(self, seed):
        H, s, y = random_instance(seed, 8, noise=0.0)
        ql = ql_decompose(H)
        res = sphere_search(ql.L, rotate_observation(ql.Q, y), QPSK)
        np.testing.assert_array_equal(QPSK.alphabet[res.indices], s)
        assert res.nodes <= 8 * QPSK.M
        assert res.metric <= 1e-20

    def test_metric_is_triangular_residual(self):
        H, _, y = random_instance(3, 4, noise=1.0)
        ql = ql_decompose(H)
        yt = rotate_observation(ql.Q, y)
        res = sphere_search(ql.L, yt, QPSK)
        s = QPSK.alphabet[res.indices]
        assert res.metric == pytest.approx(float(np.sum((yt - ql.L @ s) ** 2)), rel=1e-12)

    def test_nodes_bounded_by_full_tree(self):
        H, _, y = random_instance(4, 4, c=QAM16, noise=3.0)
        ql = ql_decompose(H)
        res = sphere_search(ql.L, rotate_observation(ql.Q, y), QAM16)
        assert res.nodes <= sum(4 ** k for k in range(1, 5))

    def test_tie_matches_mld(self):
        L = np.diag([1.0, 1.0])
        yt = np.array([0.0, 0.0])
        res = sphere_search(L, yt, QPSK)
        np.testing.assert_array_equal(res.indices, [0, 0])
        np.testing.assert_array_equal(res.indices, mld_indices(L[None], yt[None], QPSK)[0])

    def test_degenerate(self):
        with pytest.raises(DegenerateChannelError):
            sphere_search(np.zeros((2, 2)), np.zeros(2), QPSK)


@pytest.mark.parametrize("seed", range(3))
def test_all_detectors_noiseless_recovery(seed):
    b = sample_batch(ChannelConfig(2, 2, snr_range_db=(np.inf, np.inf)), QAM16, make_rng(seed), 1)
    smp = b[0]
    ql = ql_decompose(smp.H_hat)
    outs = [
        zf_detect(smp.H_hat, smp.y, QAM16),
        mmse_detect(smp.H_hat, smp.y, QAM16, 0.0),
        zfdf_detect(ql, smp.y_tilde, QAM16),
        sphere_detect(ql, smp.y_tilde, QAM16),
        mld_detect(smp.H_hat, smp.y, QAM16),
    ]
    for s_hat in outs:
        np.testing.assert_array_equal(s_hat, smp.s)
