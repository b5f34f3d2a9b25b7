import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dualmae import oracles
from dualmae.errors import ConfigError, InputError, NumericError, ShapeError
from dualmae.objectives import (
    contrastive_rows,
    cross_loss,
    intra_loss,
    mean_views,
    mse_loss,
    nt_xent,
    reconstruction_loss,
    total_loss,
)

from .helpers import finite_difference_check, random_orthogonal

Z1 = [[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]
Z2 = [[1.0, 0.5], [0.2, 1.0], [-1.0, 1.0]]
H = [[0.3, 0.7], [1.0, -1.0], [0.5, 0.5]]


def t(x):
    return torch.tensor(x, dtype=torch.float64)


class TestContrastiveExamples:
    def test_orthogonal_pair(self):
        eye = t([[1.0, 0.0], [0.0, 1.0]])
        out = nt_xent(eye, eye, 1.0)
        assert out.tolist() == pytest.approx([math.log(2 + math.e) - 1] * 2, abs=1e-9)

    def test_single_sample_is_zero(self):
        assert nt_xent(t([[0.3, -2.0, 1.0]]), t([[5.0, 1.0, 0.0]]), 0.1).item() == 0.0
        assert intra_loss(t([[1.0, 2.0]]), t([[0.0, 1.0]]), t([[3.0, 1.0]]), t([[1.0, 1.0]]), 0.1).item() == 0.0
        assert cross_loss(t([[1.0, 2.0]]), t([[0.0, 1.0]]), t([[3.0, 1.0]]), t([[1.0, 1.0]]), 0.1).item() == 0.0

    def test_frozen_nt_xent(self):
        # values from the direct-summation oracle
        np.testing.assert_allclose(nt_xent(t(Z1), t(Z2), 0.5).numpy(), [0.762093049093533, 0.97163174861498, 3.0528558606888296], rtol=1e-12)

    def test_frozen_intra(self):
        assert intra_loss(t(Z1), t(Z2), t(Z2), t(Z1), 0.1).item() == pytest.approx(3.1146601939462637, rel=1e-12)

    def test_frozen_cross(self):
        assert cross_loss(t(Z1), t(H), t(Z2), t(H), 0.2).item() == pytest.approx(4.16467036212722, rel=1e-12)

    def test_anchor_view_swaps_roles(self):
        assert torch.allclose(nt_xent(t(Z1), t(Z2), 0.5, anchor_view=2), contrastive_rows(t(Z2), t(Z1), 0.5))

    def test_small_tau_is_finite(self):
        z = torch.randn(8, 16, dtype=torch.float64)
        assert torch.isfinite(nt_xent(z, -z, 1e-4)).all()

    def test_frame_stacks_average_over_frames(self):
        g = torch.Generator().manual_seed(0)
        zu1, zu2 = torch.randn(4, 6, generator=g, dtype=torch.float64), torch.randn(4, 6, generator=g, dtype=torch.float64)
        zf1, zf2 = torch.randn(4, 3, 6, generator=g, dtype=torch.float64), torch.randn(4, 3, 6, generator=g, dtype=torch.float64)
        per_frame = [intra_loss(zu1, zu2, zf1[:, r], zf2[:, r], 0.1) for r in range(3)]
        assert intra_loss(zu1, zu2, zf1, zf2, 0.1).item() == pytest.approx(float(sum(per_frame) / 3), rel=1e-12)


class TestContrastiveErrors:
    def test_zero_norm_row(self):
        with pytest.raises(InputError):
            nt_xent(t([[0.0, 0.0], [1.0, 0.0]]), t([[1.0, 0.0], [0.0, 1.0]]), 0.1)

    @pytest.mark.parametrize("tau", [0.0, -0.5])
    def test_bad_tau(self, tau):
        with pytest.raises(ConfigError):
            nt_xent(t(Z1), t(Z2), tau)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            nt_xent(t(Z1), t(Z2)[:2], 0.1)
        with pytest.raises(ShapeError):
            mean_views(t(Z1), t(Z2)[:2])


class TestOracleAgreement:
    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 8), st.integers(2, 16), st.floats(0.05, 2.0), st.integers(0, 2**31))
    def test_intra_and_cross(self, B, D, tau, seed):
        rng = np.random.default_rng(seed)
        zu1, zu2, zf1, zf2, hu, hf = (rng.normal(size=(B, D)) for _ in range(6))
        got = intra_loss(t(zu1), t(zu2), t(zf1), t(zf2), tau).item()
        assert got == pytest.approx(oracles.intra(zu1.tolist(), zu2.tolist(), zf1.tolist(), zf2.tolist(), tau), rel=1e-6)
        zu, zf = oracles.mean_views(zu1.tolist(), zu2.tolist()), oracles.mean_views(zf1.tolist(), zf2.tolist())
        got = cross_loss(mean_views(t(zu1), t(zu2)), t(hu), mean_views(t(zf1), t(zf2)), t(hf), tau).item()
        assert got == pytest.approx(oracles.cross(zu, hu.tolist(), zf, hf.tolist(), tau), rel=1e-6)


class TestInvariance:
    def test_positive_scaling(self):
        rng = np.random.default_rng(1)
        z1, z2 = rng.normal(size=(6, 8)), rng.normal(size=(6, 8))
        s1, s2 = rng.uniform(0.1, 10, size=(6, 1)), rng.uniform(0.1, 10, size=(6, 1))
        a = nt_xent(t(z1), t(z2), 0.1)
        b = nt_xent(t(z1 * s1), t(z2 * s2), 0.1)
        assert torch.allclose(a, b, atol=1e-6, rtol=0)

    def test_orthogonal_transform(self):
        rng = np.random.default_rng(2)
        z1, z2 = rng.normal(size=(6, 8)), rng.normal(size=(6, 8))
        q = random_orthogonal(8, rng)
        assert torch.allclose(nt_xent(t(z1), t(z2), 0.2), nt_xent(t(z1 @ q), t(z2 @ q), 0.2), atol=1e-6, rtol=0)


class TestReconstructionAndPrediction:
    def test_perfect_reconstruction(self):
        u = torch.rand(2, 8, 12, dtype=torch.float64)
        assert reconstruction_loss(u, u, u, u).item() == 0.0

    def test_oracle_agreement(self):
        rng = np.random.default_rng(3)
        u1, p1, u2, p2 = (rng.normal(size=(3, 4, 5)) for _ in range(4))
        flat = [x.reshape(3, -1).tolist() for x in (u1, p1, u2, p2)]
        assert reconstruction_loss(t(u1), t(p1), t(u2), t(p2)).item() == pytest.approx(oracles.reconstruction(*flat), rel=1e-12)

    def test_mse_oracle_and_embedder(self):
        rng = np.random.default_rng(4)
        f1, f2 = rng.normal(size=(3, 5, 4)), rng.normal(size=(3, 5, 4))
        w = rng.normal(size=(4, 6))
        expected = oracles.mse((f1 @ w).reshape(3, -1).tolist(), (f2 @ w).reshape(3, -1).tolist())
        assert mse_loss(t(f1), t(f2), lambda x: x @ t(w)).item() == pytest.approx(expected, rel=1e-12)
        assert mse_loss(t(f1), t(f1)).item() == 0.0

    def test_masked_weights(self):
        u = torch.zeros(1, 4, 3, dtype=torch.float64)
        p = torch.tensor([[[1.0] * 3, [2.0] * 3, [0.0] * 3, [0.0] * 3]], dtype=torch.float64)
        w = torch.tensor([[True, False, False, False]])
        assert reconstruction_loss(u, p, u, u, w, w).item() == pytest.approx(1.0)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            reconstruction_loss(torch.zeros(1, 4, 3), torch.zeros(1, 4, 2), torch.zeros(1, 4, 3), torch.zeros(1, 4, 3))


class TestTotal:
    def test_lambda_zero(self):
        assert total_loss(1.5, 2.5, 0.25, 0.75, 0.0).total == 1.0

    def test_decomposition(self):
        r = total_loss(0.1, 0.2, 0.3, 0.4, 1.0)
        assert abs(r.total - (r.l_intra + r.l_cross + r.l_rl + r.l_mse)) <= 1e-12

    def test_non_finite_names_component(self):
        with pytest.raises(NumericError) as err:
            total_loss(1.0, float("nan"), 0.0, 0.0)
        assert err.value.component == "L_cross"

    def test_tensor_graph_kept(self):
        x = torch.tensor(2.0, dtype=torch.float64, requires_grad=True)
        r = total_loss(x, x, x, x, 0.5)
        r.tensor.backward()
        assert x.grad.item() == pytest.approx(3.0)


class TestGradients:
    @pytest.mark.parametrize("instance", range(3))
    def test_intra(self, instance):
        rng = np.random.default_rng(100 + instance)
        xs = [t(rng.normal(size=(4, 6))) for _ in range(4)]
        finite_difference_check(lambda *a: intra_loss(*a, 0.3), xs)

    @pytest.mark.parametrize("instance", range(3))
    def test_cross(self, instance):
        rng = np.random.default_rng(200 + instance)
        xs = [t(rng.normal(size=(4, 6))) for _ in range(4)]
        finite_difference_check(lambda *a: cross_loss(*a, 0.3), xs)
