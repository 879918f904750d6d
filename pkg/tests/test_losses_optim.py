import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from specmix.autodiff.tensor import Tape, Tensor
from specmix.config import TrainConfig
from specmix.errors import ConfigError, ContractError
from specmix.losses import GROUP_WEIGHTS, group_losses, group_lr_scale, reconstruction_loss, sad_similarity
from specmix.optim import Adam, AdamState, adam_step

ZERO = TrainConfig(lambda0=0.0, lambda1=0.0, lambda2=0.0)


class TestSAD:
    def test_examples(self):
        x = np.array([[0.3, 0.5, 0.2]])
        assert sad_similarity(x, x).item() == pytest.approx(1.0, abs=1e-7)
        assert sad_similarity(x, 4.0 * x).item() == pytest.approx(1.0, abs=1e-7)
        assert sad_similarity([[1.0, 0.0]], [[0.0, 1.0]]).item() == pytest.approx(0.5, abs=1e-15)

    def test_zero_vector(self):
        with pytest.raises(ContractError):
            sad_similarity([[0.0, 0.0]], [[1.0, 0.0]])

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**20))
    def test_range(self, seed):
        rng = np.random.default_rng(seed)
        c = sad_similarity(rng.normal(size=(4, 6)), rng.normal(size=(4, 6))).data
        assert np.all((c >= 0) & (c <= 1))


class TestReconstructionLoss:
    def test_perfect_reconstruction(self):
        x = np.array([[0.2, 0.3, 0.5]])
        assert reconstruction_loss(x, x, np.array([[1.0]]), [], ZERO).item() == pytest.approx(0, abs=1e-7)

    def test_absolute_error_term(self):
        x, xh, y = np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]]), np.array([[1.0]])
        with_l0 = reconstruction_loss(x, xh, y, [], ZERO.updated(lambda0=1.0)).item()
        without = reconstruction_loss(x, xh, y, [], ZERO).item()
        assert with_l0 - without == pytest.approx(2.0)
        assert without == pytest.approx(math.log(2.0))

    def test_decreases_with_angle(self):
        x = np.array([[1.0, 0.0]])
        angles = np.linspace(1.5, 0.01, 30)
        values = [
            reconstruction_loss(x, np.array([[math.cos(a), math.sin(a)]]), np.ones((1, 1)), [], ZERO).item()
            for a in angles
        ]
        assert np.all(np.diff(values) < 0)

    def test_regularizers(self):
        x = np.array([[0.2, 0.8]])
        y = np.array([[0.25, 0.75], [0.5, 0.5]])
        w = Tensor(np.array([1.0, 2.0]))
        cfg = ZERO.updated(lambda1=0.4, lambda2=0.5)
        got = reconstruction_loss(np.vstack([x, x]), np.vstack([x, x]), y, [w], cfg).item()
        assert got == pytest.approx(0.4 * 1.0 + 0.5 * 5.0, abs=1e-7)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**20))
    def test_nonnegative(self, seed):
        rng = np.random.default_rng(seed)
        x, xh = rng.uniform(size=(3, 5)), rng.uniform(size=(3, 5))
        cfg = TrainConfig(lambda0=1.0)
        assert reconstruction_loss(x, xh, rng.dirichlet(np.ones(3), 3), [Tensor(rng.normal(size=4))], cfg).item() >= 0


class TestGroups:
    def test_coefficients(self):
        g = group_losses(1.0, 1.0, 2.0)
        assert g["mixture"] == pytest.approx(0.11)
        assert g["encoder"] == 1.0
        assert g["residual"] == pytest.approx(0.001)
        assert g["uncertainty"] == pytest.approx(0.001)
        assert g["critic"] == 2.0
        assert group_losses(1.0, 0.0)["uncertainty"] == 0.0

    def test_table_matches_function(self):
        for name, (a, b) in GROUP_WEIGHTS.items():
            assert group_losses(3.0, 5.0)[name] == pytest.approx(3 * a + 5 * b)

    def test_lr_scale(self):
        assert group_lr_scale("mixture") == pytest.approx(0.11)
        assert group_lr_scale("encoder") == 1.0
        assert group_lr_scale("critic") == 1.0

    def test_routing_is_isolated(self):
        rng = np.random.default_rng(0)
        a = Tensor(rng.normal(size=3), requires_grad=True)
        b = Tensor(rng.normal(size=3), requires_grad=True)
        with Tape() as tape:
            l_re = (a * a).sum()
            l_adv = (b * a).sum() + (b * b).sum()
            both = group_losses(l_re, l_adv)
            alone = group_losses(l_re, l_adv * 0.0)
        g_with, = tape.gradient(both["encoder"], [a])
        g_without, = tape.gradient(alone["encoder"], [a])
        assert_array_equal(g_with.data, g_without.data)
        (gb,) = tape.gradient(both["residual"], [b])
        assert_array_equal(gb.data, 0)


class TestAdam:
    def test_zero_gradient(self):
        p = {"w": Tensor(np.array([1.0, -2.0]))}
        adam_step(p, {"w": np.zeros(2)}, AdamState())
        assert_array_equal(p["w"].data, [1.0, -2.0])

    def test_first_step(self):
        p = {"w": Tensor(np.array([0.0]))}
        adam_step(p, {"w": np.ones(1)}, AdamState(), lr=0.002)
        assert p["w"].data[0] == pytest.approx(-0.002 / (1 + 1e-8), rel=1e-12)

    def test_constant_gradient_limit(self):
        p = {"w": Tensor(np.array([0.0, 0.0]))}
        opt = Adam(p, lr=0.01)
        for _ in range(200):
            before = p["w"].data.copy()
            opt.step({"w": np.array([3.0, -0.5])})
        assert_allclose(p["w"].data - before, [-0.01, 0.01], rtol=1e-6)

    def test_scale_covariance(self):
        rng = np.random.default_rng(1)
        grads = [rng.normal(size=4) for _ in range(5)]
        a, b = {"w": Tensor(np.zeros(4))}, {"w": Tensor(np.zeros(4))}
        sa, sb = AdamState(), AdamState()
        for g in grads:
            adam_step(a, {"w": g}, sa)
            adam_step(b, {"w": 2 * g}, sb)
        assert_array_equal(np.sign(a["w"].data), np.sign(b["w"].data))
        assert_allclose(a["w"].data, b["w"].data, rtol=1e-6)

    def test_missing_gradient_is_zero(self):
        p = {"w": Tensor(np.ones(2)), "v": Tensor(np.ones(2))}
        adam_step(p, {"w": np.ones(2)}, AdamState())
        assert_array_equal(p["v"].data, 1.0)

    def test_arrays_not_mutated(self):
        p = {"w": Tensor(np.ones(2))}
        held = p["w"].data
        adam_step(p, {"w": np.ones(2)}, AdamState())
        assert_array_equal(held, 1.0)


class TestConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.lambda1, cfg.lambda2, cfg.lr, cfg.beta1) == (0.4, 1e-5, 0.002, 0.7)
        assert (cfg.batch_size, cfg.iterations, cfg.lambda0) == (64, 10000, 0.0)
        assert cfg.noise_dim == cfg.K

    @pytest.mark.parametrize("bad", [dict(lr=0), dict(lambda1=-1), dict(batch_size=1),
                                     dict(K=4, N=3), dict(beta1=1.0)])
    def test_invalid(self, bad):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)

    def test_round_trip(self, tmp_path):
        cfg = TrainConfig(lambda0=1.0, N=16, seed=9)
        cfg.save(tmp_path / "c.json")
        assert TrainConfig.load(tmp_path / "c.json") == cfg

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            TrainConfig.from_dict({"lamda0": 1})
