"""Unit tests for the MLP engine: forward passes, both differentiation
modes against central finite differences, positional encoding, Adam, and
the two initialization schemes."""

import numpy as np
import pytest
from scipy.special import expit

from reparamis import nnet
from reparamis.nnet import (
    MlpParams,
    MlpSpec,
    TrainingDivergedError,
    adam_step,
    backward,
    forward,
    forward_with_input_jacobian,
    init_optimizer,
    init_params,
    positional_encode,
)


def random_net(layer_sizes, seed, hidden="silu", output="none"):
    spec = MlpSpec(layer_sizes=tuple(layer_sizes), hidden_activation=hidden, output_activation=output)
    rng = np.random.default_rng(seed)
    flat = rng.normal(0.0, 0.6, size=spec.num_params)
    return MlpParams(spec, flat)


def fd_jacobian(params, x, wrt, h=1e-5):
    cols = []
    for idx in wrt:
        xp = x.copy()
        xm = x.copy()
        xp[idx] += h
        xm[idx] -= h
        cols.append((forward(params, xp) - forward(params, xm)) / (2 * h))
    return np.stack(cols, axis=-1)


def fd_param_grad(loss_of_flat, flat, h=1e-6):
    g = np.zeros_like(flat)
    for i in range(flat.size):
        fp = flat.copy()
        fm = flat.copy()
        fp[i] += h
        fm[i] -= h
        g[i] = (loss_of_flat(fp) - loss_of_flat(fm)) / (2 * h)
    return g


def rel_err(a, b):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


class TestSpecAndParams:
    def test_requires_hidden_layer(self):
        with pytest.raises(ValueError):
            MlpSpec(layer_sizes=(2, 1))

    def test_rejects_bad_sizes(self):
        with pytest.raises(ValueError):
            MlpSpec(layer_sizes=(2, 0, 1))

    def test_param_count_and_layout(self):
        spec = MlpSpec(layer_sizes=(2, 16, 16, 3))
        assert spec.num_params == (2 * 16 + 16) + (16 * 16 + 16) + (16 * 3 + 3)
        p = init_params(spec, 0)
        layers = p.layers()
        assert [w.shape for w, _ in layers] == [(16, 2), (16, 16), (3, 16)]
        # layers() views alias the flat vector
        layers[0][0][0, 0] = 123.0
        assert p.flat[0] == 123.0

    def test_wrong_flat_length_rejected(self):
        spec = MlpSpec(layer_sizes=(1, 4, 1))
        with pytest.raises(ValueError):
            MlpParams(spec, np.zeros(spec.num_params + 1))


class TestForward:
    def test_identity_linear_layer(self):
        """W=I, b=0 single 'hidden'-free path: use none activations throughout."""
        spec = MlpSpec(layer_sizes=(2, 2, 2), hidden_activation="silu", output_activation="none")
        p = MlpParams(spec, np.zeros(spec.num_params))
        w1, b1 = p.layers()[0]
        w2, b2 = p.layers()[1]
        w1[:] = np.eye(2)
        w2[:] = np.eye(2)
        x = np.array([1.0, 2.0])
        # hidden silu intervenes, so check the pure final layer instead:
        # y = silu(x) through identity weights
        got = forward(p, x)
        np.testing.assert_allclose(got, x * expit(x), rtol=0, atol=1e-15)

    def test_silu_unit_values(self):
        """Scalar chain w=1, b=0 gives silu(x); silu(0)=0 and silu(1)=0.731058..."""
        spec = MlpSpec(layer_sizes=(1, 1, 1))
        p = MlpParams(spec, np.array([1.0, 0.0, 1.0, 0.0]))
        assert forward(p, np.array([0.0]))[0] == 0.0
        got = forward(p, np.array([1.0]))[0]
        assert got == pytest.approx(1.0 * expit(1.0), abs=1e-15)
        assert got == pytest.approx(0.7310585786300049, abs=1e-12)

    def test_batch_matches_single(self):
        """Row-wise agreement; BLAS reduction order may differ by ulps
        between batched and single-row products."""
        p = random_net((3, 8, 8, 2), seed=1)
        rng = np.random.default_rng(2)
        xs = rng.normal(size=(5, 3))
        batch = forward(p, xs)
        for i in range(5):
            np.testing.assert_allclose(batch[i], forward(p, xs[i]), rtol=1e-13, atol=1e-15)
        # identical calls are bit-identical
        np.testing.assert_array_equal(batch, forward(p, xs))

    def test_dimension_mismatch(self):
        p = random_net((3, 4, 2), seed=0)
        with pytest.raises(ValueError):
            forward(p, np.zeros(4))

    def test_exp_output_positive(self):
        p = random_net((2, 8, 1), seed=3, hidden="relu", output="exp")
        rng = np.random.default_rng(4)
        y = forward(p, rng.normal(size=(100, 2)))
        assert np.all(y > 0)

    def test_softplus_last_only_touches_final_component(self):
        p = random_net((2, 8, 3), seed=5, output="softplus_last")
        plain = random_net((2, 8, 3), seed=5, output="none")
        x = np.array([0.3, -0.7])
        y_sp = forward(p, x)
        y = forward(plain, x)
        np.testing.assert_array_equal(y_sp[:2], y[:2])
        assert y_sp[2] == pytest.approx(np.logaddexp(0.0, y[2]), abs=1e-15)
        assert y_sp[2] > 0


class TestInputJacobian:
    def test_linear_map_jacobian_is_weight_matrix(self):
        spec = MlpSpec(layer_sizes=(3, 2, 2), hidden_activation="silu", output_activation="none")
        p = MlpParams(spec, np.zeros(spec.num_params))
        w1, _ = p.layers()[0]
        w2, _ = p.layers()[1]
        rng = np.random.default_rng(0)
        w1[:] = rng.normal(size=(2, 3))
        w2[:] = np.eye(2)
        # silu between layers: at x=0 pre-activations are 0 where silu'(0)=0.5,
        # so use the final linear layer alone instead: W2 = I, W1 free, check
        # J = diag(silu'(a)) @ W1 with a = W1 x.
        x = rng.normal(size=3)
        y, jac = forward_with_input_jacobian(p, x)
        a = w1 @ x
        s = expit(a)
        dsilu = s * (1 + a * (1 - s))
        np.testing.assert_allclose(jac, dsilu[:, None] * w1, rtol=1e-12, atol=1e-14)

    def test_pure_linear_network(self):
        """With 'none' everywhere the Jacobian is the product of the weights."""
        spec = MlpSpec(layer_sizes=(2, 3, 2), hidden_activation="relu", output_activation="none")
        p = MlpParams(spec, np.zeros(spec.num_params))
        w1, _ = p.layers()[0]
        w2, _ = p.layers()[1]
        rng = np.random.default_rng(1)
        w1[:] = np.abs(rng.normal(size=(3, 2)))  # keep relu active
        w2[:] = rng.normal(size=(2, 3))
        x = np.array([1.0, 2.0])
        _, jac = forward_with_input_jacobian(p, x)
        np.testing.assert_allclose(jac, w2 @ w1, rtol=1e-12)

    def test_matches_finite_differences_100_random(self):
        """Forward-mode tangents agree with central differences at 1e-4."""
        rng = np.random.default_rng(42)
        for trial in range(100):
            sizes = (int(rng.integers(1, 4)), 16, 16, int(rng.integers(1, 4)))
            p = random_net(sizes, seed=trial)
            x = rng.normal(size=sizes[0])
            _, jac = forward_with_input_jacobian(p, x)
            ref = fd_jacobian(p, x, range(sizes[0]))
            assert np.max(rel_err(jac, ref)) < 1e-4

    def test_wrt_subset_columns(self):
        p = random_net((5, 8, 2), seed=9)
        x = np.random.default_rng(3).normal(size=5)
        _, full = forward_with_input_jacobian(p, x)
        _, sub = forward_with_input_jacobian(p, x, wrt=[0, 2])
        np.testing.assert_array_equal(sub, full[:, [0, 2]])
        assert sub.shape == (2, 2)

    def test_specific_example_2hidden_silu(self):
        p = random_net((2, 16, 16, 2), seed=100)
        x = np.array([0.3, -0.7])
        _, jac = forward_with_input_jacobian(p, x)
        ref = fd_jacobian(p, x, [0, 1])
        assert np.max(rel_err(jac, ref)) < 1e-4


class TestBackward:
    def test_zero_upstream_zero_gradient(self):
        p = random_net((2, 8, 2), seed=0)
        g = backward(p, np.array([0.1, 0.2]), np.zeros(2))
        assert np.all(g == 0.0)

    def test_scalar_linear_unit(self):
        """y = w x: upstream 1 at input 3 gives dL/dw = 3."""
        spec = MlpSpec(layer_sizes=(1, 1, 1), hidden_activation="relu", output_activation="none")
        p = MlpParams(spec, np.array([1.0, 0.0, 1.0, 0.0]))
        g = backward(p, np.array([3.0]), np.array([1.0]))
        # layout: [w1, b1, w2, b2]; y = w2 * relu(w1 x + b1)
        assert g[0] == pytest.approx(3.0)  # dL/dw1 = w2 * relu'(3) * 3
        assert g[2] == pytest.approx(3.0)  # dL/dw2 = relu(3)

    def test_matches_finite_differences(self):
        """Reverse-mode parameter gradients agree with central differences."""
        rng = np.random.default_rng(7)
        for trial in range(20):
            sizes = (2, 8, 8, 2)
            p = random_net(sizes, seed=trial + 50)
            x = rng.normal(size=(4, 2))
            upstream = rng.normal(size=(4, 2))
            g = backward(p, x, upstream)

            def loss(flat):
                return float(np.sum(forward(MlpParams(p.spec, flat), x) * upstream))

            ref = fd_param_grad(loss, p.flat.copy())
            assert np.max(rel_err(g, ref)) < 1e-4

    def test_exp_output_gradient(self):
        p = random_net((2, 6, 1), seed=11, hidden="relu", output="exp")
        rng = np.random.default_rng(12)
        x = rng.normal(size=(8, 2))
        up = rng.normal(size=(8, 1))
        g = backward(p, x, up)

        def loss(flat):
            return float(np.sum(forward(MlpParams(p.spec, flat), x) * up))

        ref = fd_param_grad(loss, p.flat.copy())
        assert np.max(rel_err(g, ref)) < 1e-4


class TestBackwardThroughJacobian:
    """The reverse pass over the dual (tangent) computation is what makes
    determinant losses trainable; check it against finite differences of a
    scalar functional that mixes outputs and Jacobian entries."""

    @pytest.mark.parametrize("sizes", [(1, 8, 1), (2, 16, 16, 3), (3, 8, 8, 2)])
    def test_matches_finite_differences(self, sizes):
        rng = np.random.default_rng(sum(sizes))
        p = random_net(sizes, seed=sum(sizes))
        n, k = 5, min(2, sizes[0])
        wrt = list(range(k))
        x = rng.normal(size=(n, sizes[0]))
        up_y = rng.normal(size=(n, sizes[-1]))
        up_t = rng.normal(size=(n, k, sizes[-1]))
        g = nnet.backward_through_jacobian(p, x, wrt, up_y, up_t)

        def loss(flat):
            q = MlpParams(p.spec, flat)
            y, ty, _ = nnet._dual_forward(q, x, wrt, keep_cache=False)
            return float(np.sum(y * up_y) + np.sum(ty * up_t))

        ref = fd_param_grad(loss, p.flat.copy())
        assert np.max(rel_err(g, ref)) < 1e-4

    def test_silu_second_derivative_consistency(self):
        """silu'' used by the reverse-over-forward pass matches the numerical
        derivative of silu' on [-10, 10]."""
        x = np.linspace(-10, 10, 2001)
        h = 1e-6
        dd = nnet._act_dd(x, "silu")
        num = (nnet._act_d(x + h, "silu") - nnet._act_d(x - h, "silu")) / (2 * h)
        assert np.max(np.abs(dd - num)) < 1e-6

    def test_silu_derivative_matches_numerical(self):
        x = np.linspace(-10, 10, 2001)
        h = 1e-6
        d = nnet._act_d(x, "silu")
        num = (nnet._act(x + h, "silu") - nnet._act(x - h, "silu")) / (2 * h)
        assert np.max(np.abs(d - num)) < 1e-6


class TestPositionalEncoding:
    def test_zero_vector_four_freqs(self):
        got = positional_encode(np.array([0.0]), 4)
        np.testing.assert_array_equal(got, [0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0])

    def test_half_one_freq(self):
        got = positional_encode(np.array([0.5]), 1)
        assert got[0] == 0.5
        assert got[1] == pytest.approx(1.0, abs=1e-15)  # sin(pi/2)
        assert got[2] == pytest.approx(0.0, abs=1e-15)  # cos(pi/2)

    def test_zero_freqs_identity(self):
        v = np.array([0.3, -0.2])
        np.testing.assert_array_equal(positional_encode(v, 0), v)

    def test_length_formula(self):
        v = np.random.default_rng(0).normal(size=(7, 2))
        out = positional_encode(v, 4)
        assert out.shape == (7, 2 * (1 + 2 * 4))

    def test_negative_freqs_rejected(self):
        with pytest.raises(ValueError):
            positional_encode(np.array([0.0]), -1)


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        p = random_net((1, 4, 1), seed=0)
        before = p.flat.copy()
        st = init_optimizer(p, 1e-3)
        adam_step(st, p, np.zeros_like(p.flat))
        np.testing.assert_array_equal(p.flat, before)
        assert st.t == 1

    def test_first_step_magnitude(self):
        """Bias-corrected first step is lr * g / (|g| + eps)."""
        spec = MlpSpec(layer_sizes=(1, 1, 1))
        p = MlpParams(spec, np.zeros(4))
        st = init_optimizer(p, 1e-3)
        g = np.array([0.2, 0.0, 0.0, 0.0])
        adam_step(st, p, g)
        expected = -1e-3 * 0.2 / (0.2 + 1e-8)
        assert p.flat[0] == pytest.approx(expected, rel=1e-12)
        assert np.all(p.flat[1:] == 0.0)

    def test_global_norm_clipping(self):
        """A gradient at twice the max norm is halved before the update."""
        spec = MlpSpec(layer_sizes=(1, 1, 1))
        p1 = MlpParams(spec, np.zeros(4))
        p2 = MlpParams(spec, np.zeros(4))
        g = np.array([0.6, 0.0, 0.8, 0.0])  # norm 1.0
        st1 = init_optimizer(p1, 1e-3, max_grad_norm=0.5)
        adam_step(st1, p1, g)
        st2 = init_optimizer(p2, 1e-3)
        adam_step(st2, p2, 0.5 * g)
        np.testing.assert_allclose(p1.flat, p2.flat, rtol=0, atol=0)

    def test_nonfinite_gradient_raises(self):
        p = random_net((1, 4, 1), seed=0)
        st = init_optimizer(p, 1e-3)
        g = np.zeros_like(p.flat)
        g[0] = np.nan
        with pytest.raises(TrainingDivergedError):
            adam_step(st, p, g)

    def test_length_mismatch(self):
        p = random_net((1, 4, 1), seed=0)
        st = init_optimizer(p, 1e-3)
        with pytest.raises(ValueError):
            adam_step(st, p, np.zeros(3))


class TestInit:
    def test_same_seed_bit_identical(self):
        spec = MlpSpec(layer_sizes=(2, 16, 16, 1))
        a = init_params(spec, 7)
        b = init_params(spec, 7)
        np.testing.assert_array_equal(a.flat, b.flat)

    def test_different_seed_differs(self):
        spec = MlpSpec(layer_sizes=(2, 16, 16, 1))
        assert not np.array_equal(init_params(spec, 1).flat, init_params(spec, 2).flat)

    def test_standard_init_bounded(self):
        """All parameters stay below 2 in magnitude for the chosen scale
        (max weight limit is sqrt(3/fan_in) <= sqrt(3))."""
        spec = MlpSpec(layer_sizes=(1, 16, 16, 1))
        p = init_params(spec, 0)
        assert np.max(np.abs(p.flat)) < 2.0

    def test_identity_init_zeroes_final_layer(self):
        spec = MlpSpec(layer_sizes=(1, 16, 16, 1), init="identity")
        p = init_params(spec, 3)
        w, b = p.layers()[-1]
        assert np.all(w == 0.0) and np.all(b == 0.0)
        # earlier layers are randomly initialized
        assert np.any(p.layers()[0][0] != 0.0)

    def test_forward_deterministic(self):
        p = random_net((2, 16, 2), seed=0)
        x = np.random.default_rng(1).normal(size=(10, 2))
        np.testing.assert_array_equal(forward(p, x), forward(p, x))
