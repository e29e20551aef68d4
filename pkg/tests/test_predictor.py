import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pkinject.dataio import PatchSet
from pkinject.predictor import (PkLinearHead, encode_pooled, encoder_grad, init_encoder,
                                init_head, mlp_encode, mse, pk_forward, pk_grad, pk_term,
                                pool_patches)

from conftest import central_diff, max_rel_err


def random_head(rng, n=20, d=5, lam=0.3, clamp=True, zero_rows=()):
    G = rng.uniform(size=(n, d))
    G[list(zero_rows)] = 0
    return PkLinearHead(rng.normal(size=(n, d)), rng.normal(size=n), G, lam, clamp)


class TestForward:
    def test_hand_example(self):
        head = PkLinearHead([[1, 0], [0, 1], [1, 1]], [0, 0.1, -0.1],
                            [[0.5, 0.5], [0, 0], [1, 0]], lam=0.5)
        np.testing.assert_allclose(pk_forward(head, [1, 2]), [1.25, 1.1, 1.9], atol=1e-15)

    def test_lambda_zero_is_linear(self, rng):
        head = random_head(rng, lam=0.0, clamp=False)
        w = rng.normal(size=5)
        assert np.max(np.abs(pk_forward(head, w) - (w @ head.A.T + head.b))) <= 1e-12

    @pytest.mark.parametrize("lam", [0.1, 0.5, 0.9])
    def test_zero_row_is_attenuated_linear(self, rng, lam):
        head = random_head(rng, lam=lam, clamp=False, zero_rows=(3, 7))
        w = rng.normal(size=5)
        out = pk_forward(head, w)
        for i in (3, 7):
            assert abs(out[i] - ((1 - lam) * w @ head.A[i] + head.b[i])) <= 1e-12

    def test_collinear_in_lambda(self, rng):
        head = random_head(rng)
        w = rng.normal(size=5)
        raw = {lam: pk_forward(PkLinearHead(head.A, head.b, head.G, lam), w, raw=True)
               for lam in (0.0, 0.5, 1.0)}
        np.testing.assert_allclose(raw[0.5], 0.5 * (raw[0.0] + raw[1.0]), atol=1e-12)

    def test_equal_embeddings_share_pk_term(self, rng):
        head = random_head(rng)
        head.G[4] = head.G[9]
        t = pk_term(head, rng.normal(size=5))
        assert t[4] == t[9]

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 100_000), st.floats(0, 1))
    def test_clamped_output_nonnegative(self, seed, lam):
        rng = np.random.default_rng(seed)
        head = random_head(rng, lam=lam)
        assert pk_forward(head, rng.normal(size=(7, 5)) * 3).min() >= 0

    def test_validation(self, rng):
        head = random_head(rng)
        with pytest.raises(ValueError):
            pk_forward(head, np.ones(4))
        with pytest.raises(ValueError):
            PkLinearHead(np.ones((3, 2)), np.ones(3), np.ones((3, 3)))
        with pytest.raises(ValueError):
            PkLinearHead(np.ones((3, 2)), np.ones(3), np.ones((3, 2)), lam=1.5)

    def test_init_head_defaults(self):
        head = init_head(10, 4, seed=3)
        assert head.A.shape == (10, 4) and not head.G.any() and head.lam == 0.0
        assert init_head(10, 4, seed=3).A.tobytes() == head.A.tobytes()


class TestGradient:
    def test_zero_residual(self, rng):
        head = random_head(rng, clamp=False)
        W = rng.normal(size=(8, 5))
        loss, g = pk_grad(head, W, pk_forward(head, W))
        assert loss == 0.0
        assert not g["A"].any() and not g["b"].any()

    def test_lambda_one_freezes_A(self, rng):
        head = random_head(rng, lam=1.0)
        _, g = pk_grad(head, rng.normal(size=(8, 5)), rng.normal(size=(8, 20)))
        assert not g["A"].any()
        assert "G" not in g

    @pytest.mark.parametrize("clamp", [False, True])
    def test_finite_differences(self, rng, clamp):
        head = random_head(rng, clamp=clamp)
        W, T = rng.normal(size=(8, 5)), rng.uniform(size=(8, 20))
        loss, g = pk_grad(head, W, T)
        assert loss == pytest.approx(mse(pk_forward(head, W), T), rel=1e-14)
        for name in ("A", "b"):
            num = central_diff(lambda: mse(pk_forward(head, W), T), getattr(head, name))
            assert max_rel_err(g[name], num) < 1e-4

    def test_input_gradient(self, rng):
        head = random_head(rng, clamp=False)
        W, T = rng.normal(size=(4, 5)), rng.normal(size=(4, 20))
        _, _, dW = pk_grad(head, W, T, return_input_grad=True)
        num = central_diff(lambda: mse(pk_forward(head, W), T), W)
        assert max_rel_err(dW, num) < 1e-4

    def test_trainable_G(self, rng):
        head = random_head(rng, clamp=False)
        head.train_G = True
        W, T = rng.normal(size=(4, 5)), rng.normal(size=(4, 20))
        _, g = pk_grad(head, W, T)
        num = central_diff(lambda: mse(pk_forward(head, W), T), head.G)
        assert max_rel_err(g["G"], num) < 1e-4

    def test_shape_errors(self, rng):
        head = random_head(rng)
        with pytest.raises(ValueError):
            pk_grad(head, np.zeros((0, 5)), np.zeros((0, 20)))
        with pytest.raises(ValueError):
            pk_grad(head, np.zeros((2, 5)), np.zeros((2, 19)))


class TestEncoder:
    def test_identical_patches(self, rng):
        enc = init_encoder(6, 8, 4, seed=1)
        p = rng.normal(size=6)
        np.testing.assert_allclose(mlp_encode(enc, np.tile(p, (5, 1))), mlp_encode(enc, p[None]),
                                   atol=1e-15)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 100_000))
    def test_permutation_bitwise(self, seed):
        rng = np.random.default_rng(seed)
        P = rng.normal(size=(int(rng.integers(1, 40)), 6)) * 10 ** rng.uniform(-3, 3)
        enc = init_encoder(6, 8, 4, seed=2)
        a = mlp_encode(enc, P)
        b = mlp_encode(enc, PatchSet("s", P[rng.permutation(len(P))]))
        assert a.tobytes() == b.tobytes()

    def test_empty_and_mismatch(self):
        enc = init_encoder(6, 8, 4)
        with pytest.raises(ValueError):
            pool_patches(np.zeros((0, 6)))
        with pytest.raises(ValueError):
            mlp_encode(enc, np.ones((2, 5)))

    def test_finite_differences_through_head(self, rng):
        enc = init_encoder(6, 10, 5, seed=4)
        enc.b1[:] = rng.normal(size=10) * 0.1
        head = random_head(rng, clamp=False)
        X, T = rng.normal(size=(8, 6)), rng.normal(size=(8, 20))

        def loss():
            return mse(pk_forward(head, encode_pooled(enc, X)), T)

        W, cache = encode_pooled(enc, X, cache=True)
        _, _, dW = pk_grad(head, W, T, return_input_grad=True)
        grads = encoder_grad(enc, cache, dW)
        for name, param in enc.params().items():
            assert max_rel_err(grads[name], central_diff(loss, param)) < 1e-4, name
