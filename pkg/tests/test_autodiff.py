import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import erf

from retinassl import autodiff as ad
from retinassl.autodiff import (
    Tape,
    Tensor,
    backward,
    cross_entropy_rows,
    finite_difference,
    gelu,
    layer_norm,
    log_softmax_rows,
    matmul,
    softmax_rows,
)
from retinassl.errors import ContractError, ParameterError, ShapeMismatchError


def naive_matmul(a, b):
    """Triple-loop oracle, independent of np.matmul."""
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for t in range(k):
                out[i, j] += a[i, t] * b[t, j]
    return out


class TestMatmul:
    def test_identity(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        out = matmul(Tensor(np.eye(2)), Tensor(a))
        np.testing.assert_array_equal(out.data, a)

    def test_annihilator(self):
        z = Tensor(np.zeros((2, 2)))
        b = Tensor(np.arange(6.0).reshape(2, 3))
        np.testing.assert_array_equal(matmul(z, b).data, np.zeros((2, 3)))

    def test_against_triple_loop_oracle(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        b = np.array([[5.0, 6.0], [7.0, 8.0]])
        expected = naive_matmul(a, b)
        np.testing.assert_array_equal(expected, [[19.0, 22.0], [43.0, 50.0]])
        np.testing.assert_allclose(matmul(Tensor(a), Tensor(b)).data, expected)

    def test_random_against_oracle(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(4, 5))
        b = rng.normal(size=(5, 3))
        np.testing.assert_allclose(
            matmul(Tensor(a), Tensor(b)).data, naive_matmul(a, b), atol=1e-12)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeMismatchError, match=r"\(2, 3\).*\(2, 3\)"):
            matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


class TestSoftmaxRows:
    def test_constant_row_uniform(self):
        for k in (2, 5, 17):
            out = softmax_rows(Tensor(np.full((3, k), 4.2)), temperature=0.3)
            np.testing.assert_allclose(out.data, 1.0 / k, atol=1e-12)

    def test_two_entry_row(self):
        out = softmax_rows(Tensor(np.array([[1.0, 0.0]])), temperature=1.0)
        e = np.e
        np.testing.assert_allclose(out.data[0], [e / (e + 1), 1 / (e + 1)], atol=1e-10)
        np.testing.assert_allclose(out.data[0], [0.7311, 0.2689], atol=1e-4)

    def test_monotone_sharpening(self):
        x = Tensor(np.array([[1.0, 0.0]]))
        hot = softmax_rows(x, temperature=0.04).data.max()
        cool = softmax_rows(x, temperature=0.1).data.max()
        assert hot > cool

    def test_bad_temperature(self):
        with pytest.raises(ParameterError):
            softmax_rows(Tensor(np.zeros((1, 2))), temperature=0.0)
        with pytest.raises(ParameterError):
            softmax_rows(Tensor(np.zeros((1, 2))), temperature=-1.0)

    def test_stable_for_large_logits(self):
        out = softmax_rows(Tensor(np.array([[1e4, 0.0, -1e4]])), temperature=1.0)
        assert np.all(np.isfinite(out.data))
        np.testing.assert_allclose(out.data.sum(), 1.0, atol=1e-12)

    @settings(max_examples=60, deadline=None)
    @given(
        rows=st.lists(
            st.lists(st.floats(-50, 50), min_size=4, max_size=4),
            min_size=1, max_size=4),
        tau=st.floats(1e-3, 10.0),
        shift=st.floats(-20, 20),
    )
    def test_rows_sum_to_one_and_shift_invariance(self, rows, tau, shift):
        x = np.array(rows)
        out = softmax_rows(Tensor(x), temperature=tau).data
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-6)
        shifted = softmax_rows(Tensor(x + shift), temperature=tau).data
        np.testing.assert_allclose(out, shifted, atol=1e-6)

    @settings(max_examples=40, deadline=None)
    @given(tau_pair=st.tuples(st.floats(0.01, 1.0), st.floats(0.01, 1.0)))
    def test_sharpening_property(self, tau_pair):
        lo, hi = sorted(tau_pair)
        if hi - lo < 1e-6:
            return
        x = Tensor(np.array([[2.0, 0.5, -1.0]]))
        assert softmax_rows(x, lo).data.max() > softmax_rows(x, hi).data.max()


class TestLayerNorm:
    def _affine(self, d):
        return Tensor(np.ones(d)), Tensor(np.zeros(d))

    def test_constant_row_maps_to_zeros(self):
        s, b = self._affine(4)
        out = layer_norm(Tensor(np.full((2, 4), 3.0)), s, b, epsilon=1e-6)
        np.testing.assert_allclose(out.data, 0.0, atol=1e-9)

    def test_already_normalized(self):
        s, b = self._affine(2)
        out = layer_norm(Tensor(np.array([[1.0, -1.0]])), s, b, epsilon=1e-12)
        np.testing.assert_allclose(out.data, [[1.0, -1.0]], atol=1e-6)

    def test_hand_computed_row(self):
        s, b = self._affine(3)
        out = layer_norm(Tensor(np.array([[2.0, 4.0, 6.0]])), s, b, epsilon=1e-12)
        r = np.sqrt(1.5)
        np.testing.assert_allclose(out.data, [[-r, 0.0, r]], atol=1e-6)
        np.testing.assert_allclose(out.data, [[-1.2247, 0.0, 1.2247]], atol=1e-4)

    def test_bad_epsilon(self):
        s, b = self._affine(2)
        with pytest.raises(ParameterError):
            layer_norm(Tensor(np.zeros((1, 2))), s, b, epsilon=0.0)


class TestGelu:
    def test_zero(self):
        assert gelu(Tensor(np.array([0.0]))).data[0] == 0.0

    def test_large_positive_asymptote(self):
        x = np.array([8.0, 20.0])
        np.testing.assert_allclose(gelu(Tensor(x)).data, x, atol=1e-6)

    def test_value_at_one_exact_erf(self):
        # Oracle: x * Phi(x) with the scalar normal CDF.
        phi = 0.5 * (1.0 + erf(1.0 / np.sqrt(2.0)))
        out = gelu(Tensor(np.array([1.0]))).data[0]
        np.testing.assert_allclose(out, 1.0 * phi, atol=1e-12)
        np.testing.assert_allclose(out, 0.8413, atol=1e-4)


class TestCrossEntropyRows:
    def test_uniform_gives_log_k(self):
        for k in (2, 7, 16):
            p = np.full((1, k), 1.0 / k)
            out = cross_entropy_rows(p, Tensor(np.log(p)))
            np.testing.assert_allclose(out.data, np.log(k), atol=1e-12)

    def test_one_hot_perfect_match(self):
        p = np.array([[0.0, 1.0, 0.0]])
        log_q = np.array([[-5.0, 0.0, -7.0]])
        out = cross_entropy_rows(p, Tensor(log_q))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-12)

    def test_hand_computed(self):
        p = np.array([[0.5, 0.5]])
        q = np.array([[0.25, 0.75]])
        out = cross_entropy_rows(p, Tensor(np.log(q)))
        expected = -(0.5 * np.log(0.25) + 0.5 * np.log(0.75))
        np.testing.assert_allclose(out.data, expected, atol=1e-12)
        np.testing.assert_allclose(out.data, 0.8370, atol=1e-4)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            cross_entropy_rows(np.full((1, 3), 1 / 3), Tensor(np.zeros((1, 2))))

    def test_unnormalized_p_rejected(self):
        with pytest.raises(ContractError):
            cross_entropy_rows(np.array([[0.7, 0.7]]), Tensor(np.zeros((1, 2))))


class TestBackward:
    def test_sum_gives_ones(self):
        w = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        with Tape() as tape:
            loss = w.sum()
        backward(loss, tape)
        np.testing.assert_array_equal(w.grad, np.ones((2, 3)))

    def test_quadratic_rule(self):
        w = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
        with Tape() as tape:
            loss = (w * w).sum()
        backward(loss, tape)
        np.testing.assert_allclose(w.grad, [2.0, 4.0, 6.0], atol=1e-12)

    def test_non_scalar_loss_rejected(self):
        w = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            out = w * w
        with pytest.raises(ContractError):
            backward(out, tape)

    def test_off_cone_leaf_gets_zero(self):
        w = Tensor(np.ones(3), requires_grad=True)
        unused = Tensor(np.ones(2), requires_grad=True)
        with Tape() as tape:
            loss = w.sum()
        backward(loss, tape, leaves=[w, unused])
        np.testing.assert_array_equal(unused.grad, np.zeros(2))

    def test_three_layer_network_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        x = Tensor(rng.normal(size=(4, 5)))
        w1 = Tensor(rng.normal(size=(5, 6)) * 0.5, requires_grad=True)
        w2 = Tensor(rng.normal(size=(6, 6)) * 0.5, requires_grad=True)
        w3 = Tensor(rng.normal(size=(6, 3)) * 0.5, requires_grad=True)
        b1 = Tensor(np.zeros(6), requires_grad=True)
        scale = Tensor(np.ones(6), requires_grad=True)
        shift = Tensor(np.zeros(6), requires_grad=True)
        params = [w1, w2, w3, b1, scale, shift]
        targets = np.full((4, 3), 1.0 / 3.0)

        def forward():
            h = gelu(matmul(x, w1) + b1)
            h = layer_norm(matmul(h, w2), scale, shift, epsilon=1e-5)
            logits = matmul(h, w3)
            return cross_entropy_rows(targets, log_softmax_rows(logits, 0.7)).sum()

        with Tape() as tape:
            loss = forward()
        backward(loss, tape, leaves=params)
        analytic = [p.grad.copy() for p in params]

        numeric = finite_difference(lambda: forward().item(), params, epsilon=1e-5)
        for a, n in zip(analytic, numeric):
            rel = np.abs(a - n) / np.maximum.reduce([np.abs(a), np.abs(n),
                                                     np.full_like(a, 1e-3)])
            assert rel.max() <= 1e-4

    def test_softmax_and_interior_ops_gradcheck(self):
        rng = np.random.default_rng(11)
        w = Tensor(rng.normal(size=(3, 4)), requires_grad=True)

        def forward():
            s = softmax_rows(w, temperature=0.5)
            return (s * s).sum()

        with Tape() as tape:
            loss = forward()
        backward(loss, tape)
        numeric = finite_difference(lambda: forward().item(), [w])[0]
        np.testing.assert_allclose(w.grad, numeric, atol=1e-7)


class TestFiniteDifferenceOracle:
    def test_quadratic_exact(self):
        p = Tensor(np.array([3.0]))
        g = finite_difference(lambda: float(p.data[0] ** 2), [p], epsilon=1e-5)[0]
        np.testing.assert_allclose(g, [6.0], atol=1e-8)

    def test_sin_at_zero(self):
        p = Tensor(np.array([0.0]))
        g = finite_difference(lambda: float(np.sin(p.data[0])), [p], epsilon=1e-5)[0]
        np.testing.assert_allclose(g, [1.0], atol=1e-9)

    def test_bad_epsilon(self):
        with pytest.raises(ParameterError):
            finite_difference(lambda: 0.0, [Tensor(np.zeros(1))], epsilon=0.0)


class TestTapeSemantics:
    def test_replay_is_bit_identical(self):
        rng = np.random.default_rng(3)
        w = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
        x = Tensor(rng.normal(size=(2, 3)))
        with Tape() as tape:
            out = gelu(matmul(x, w))
            loss = out.sum()
        before = out.data.copy()
        loss_before = loss.data.copy()
        tape.replay()
        assert np.array_equal(out.data, before)
        assert np.array_equal(loss.data, loss_before)

    def test_tape_free_ops_record_nothing(self):
        w = Tensor(np.ones((2, 2)), requires_grad=True)
        out = matmul(w, w)  # no active tape
        assert out.requires_grad is False
        with Tape() as tape:
            pass
        assert tape.nodes == []

    def test_determinism_same_inputs_same_bits(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(4, 4))

        def run():
            t = Tensor(x.copy(), requires_grad=True)
            with Tape() as tape:
                loss = (softmax_rows(gelu(matmul(t, t)), 0.3)).sum()
            backward(loss, tape)
            return loss.data.copy(), t.grad.copy()

        l1, g1 = run()
        l2, g2 = run()
        assert np.array_equal(l1, l2)
        assert np.array_equal(g1, g2)

    def test_outputs_finite_on_finite_inputs(self):
        rng = np.random.default_rng(9)
        x = Tensor(rng.normal(size=(3, 4)) * 100)
        for out in (softmax_rows(x, 0.01), log_softmax_rows(x, 0.01), gelu(x),
                    ad.l2_normalize_rows(x)):
            assert np.all(np.isfinite(out.data))
