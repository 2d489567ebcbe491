import pytest
import numpy as np
import pymimodet.trainer as trainer_module
from pymimodet.channel import gen_correlated_grid, gen_iid_gaussian, gen_kronecker
from pymimodet.constellation import make_constellation, symbol_errors
from pymimodet.detectors import DetectorProblem, detect, mmse_detect
from pymimodet.exceptions import ContractViolation
from pymimodet.models import IidParams, OampNetParams, init_full_params, init_iid_params
from pymimodet.numerics import RngStream
from pymimodet.trainer import (
    AdamState,
    TrainConfig,
    adam_step,
    cold_train_grid,
    fit,
    gradient_check,
    init_params,
    iterations_per_channel,
    loss,
    online_train_grid,
    sample_batch,
    train_on_channel,
)


def small_batch(seed=1, batch_size=16, snr_db=10.0):
    c = make_constellation(4)
    h = gen_iid_gaussian(4, 2, RngStream(seed)).h
    batch = sample_batch(h, c, 4, 2, batch_size, (snr_db, snr_db), RngStream(seed, 1))
    return h, c, batch


class TestLoss():

    def test_layer_average(self):
        c = make_constellation(4)
        x = np.array([[0]])
        s = c.points[0]
        x_hat = np.array([[[s + np.sqrt(0.5)]], [[s + 1j * np.sqrt(0.1)]]])

        assert loss(x_hat, x, c) == pytest.approx(0.3)

    def test_zero_for_exact(self):
        c = make_constellation(16)
        x = np.array([[1, 5, 9]])

        assert loss(np.stack([c.symbols(x)] * 3), x, c) == 0.0


class TestSampleBatch():

    def test_fixed_channel(self):
        h, c, batch = small_batch(batch_size=8)

        assert batch.x.shape == (8, 2)
        assert batch.y.shape == (8, 4)
        assert np.array_equal(batch.h, h)
        assert batch.snr_db == 10.0
        assert batch.problem().batch == 8

    def test_random_channels(self):
        c = make_constellation(4)
        batch = sample_batch(None, c, 8, 4, 5, (4.0, 11.0), RngStream(2))

        assert batch.h.shape == (5, 8, 4)
        assert batch.sigma2.shape == (5,)
        assert 4.0 <= batch.snr_db <= 11.0

    def test_repeatable(self):
        _, _, a = small_batch(seed=3)
        _, _, b = small_batch(seed=3)

        assert np.array_equal(a.y, b.y)


class TestAdam():

    def test_zero_gradient(self):
        params = IidParams(np.array([0.5, 1.5]), np.array([1.0, 2.0]))
        new, state = adam_step(params, np.zeros(4), AdamState.create(4))

        assert np.array_equal(new.to_vector(), params.to_vector())
        assert state.step == 1

    def test_first_step_is_sign(self):
        params = init_iid_params(2)
        g = np.array([0.3, -2.0, 1e-3, -5.0])
        new, _ = adam_step(params, g, AdamState.create(4, lr=0.01))

        assert np.allclose(new.to_vector() - params.to_vector(), -0.01 * np.sign(g), rtol=1e-4)

    def test_two_steps(self):
        params = init_iid_params(1)
        g1, g2 = np.array([1.0, -1.0]), np.array([0.5, 2.0])
        p1, s1 = adam_step(params, g1, AdamState.create(2))
        p2, s2 = adam_step(p1, g2, s1)

        m = 0.9 * 0.1 * g1 + 0.1 * g2
        v = 0.999 * 0.001 * g1 ** 2 + 0.001 * g2 ** 2
        expected = p1.to_vector() - 1e-3 * (m / (1 - 0.9 ** 2)) / (np.sqrt(v / (1 - 0.999 ** 2)) + 1e-8)

        assert s2.step == 2
        assert np.allclose(p2.to_vector(), expected, rtol=1e-12)

    def test_accepts_params_as_gradient(self):
        params = OampNetParams(np.ones(2), np.ones(2))
        new, _ = adam_step(params, OampNetParams(np.ones(2), np.ones(2)), AdamState.create(4))

        assert type(new) is OampNetParams

    def test_shape_mismatch(self):
        with pytest.raises(ContractViolation, match=r'^Gradient shape .+$'):
            adam_step(init_iid_params(2), np.zeros(3), AdamState.create(4))


class TestGradientCheck():

    @pytest.mark.parametrize("kind", ["mmnet-iid", "mmnet", "oampnet"])
    def test_autograd_matches_finite_differences(self, kind):
        h, c, batch = small_batch()
        params = init_params(kind, h, n_layers=3)
        rng = np.random.default_rng(0)
        params = params.with_vector(params.to_vector() * rng.uniform(0.8, 1.2, size=params.to_vector().size))
        check = gradient_check(params, batch, c)

        assert check.analytic.shape == check.numeric.shape
        assert check.max_rel_error < 1e-5


class TestFit():

    def test_zero_iterations(self):
        h, c, _ = small_batch()
        params = init_full_params(h, 3)
        cfg = TrainConfig(iterations=0, snr_db_range=(10.0, 10.0))
        result = fit(h, c, cfg, params)

        assert result.params is params
        assert result.initial_loss is None
        assert result.state.step == 0

    def test_deterministic(self):
        h, c, _ = small_batch()
        cfg = TrainConfig(iterations=5, snr_db_range=(8.0, 12.0), rng=RngStream(4), batch_size=32)
        a = fit(h, c, cfg, init_full_params(h, 3))
        b = fit(h, c, cfg, init_full_params(h, 3))

        assert np.array_equal(a.params.to_vector(), b.params.to_vector())
        assert a.final_loss == b.final_loss
        assert a.state.step == 5

    def test_without_heldout(self):
        h, c, _ = small_batch()
        cfg = TrainConfig(iterations=4, snr_db_range=(8.0, 12.0), rng=RngStream(4), batch_size=32)
        checked = fit(h, c, cfg, init_full_params(h, 3))
        unchecked = fit(h, c, cfg, init_full_params(h, 3), heldout=False)

        assert np.array_equal(checked.params.to_vector(), unchecked.params.to_vector())
        assert unchecked.initial_loss is None and unchecked.final_loss is None
        assert unchecked.state.step == 4

    def test_reduces_loss(self):
        c = make_constellation(4)
        h = gen_iid_gaussian(16, 8, RngStream(5)).h
        cfg = TrainConfig(iterations=200, snr_db_range=(10.0, 10.0), rng=RngStream(5), batch_size=100)
        result = fit(h, c, cfg, init_full_params(h, 4))

        assert result.improved

    def test_trained_beats_mmse(self):
        c = make_constellation(4)
        h = gen_kronecker(16, 8, 0.5, 0.5, RngStream(6)).h
        cfg = TrainConfig(iterations=400, snr_db_range=(12.0, 12.0), rng=RngStream(6), batch_size=100)
        params = train_on_channel(h, c, cfg, init_full_params(h, 10))
        batch = sample_batch(h, c, 16, 8, 4000, (12.0, 12.0), RngStream(6, 99))
        p = DetectorProblem(batch.y, h, batch.sigma2)
        mmnet_errors = symbol_errors(detect("mmnet", p, c, params=params).symbols, batch.x)

        assert mmnet_errors <= symbol_errors(mmse_detect(p, c).symbols, batch.x)

    def test_random_channels_need_dims(self):
        c = make_constellation(4)
        cfg = TrainConfig(iterations=1, snr_db_range=(10.0, 10.0))

        with pytest.raises(ContractViolation, match=r'^Antenna counts are needed .+$'):
            fit(None, c, cfg, init_iid_params(2))

    def test_offline_iid(self):
        c = make_constellation(4)
        cfg = TrainConfig(iterations=3, snr_db_range=(4.0, 11.0), batch_size=20)
        result = fit(None, c, cfg, init_iid_params(2), n_r=8, n_t=4)

        assert result.params.kind == "mmnet-iid"
        assert result.state.step == 3

    def test_init_params_invalid(self):
        with pytest.raises(ContractViolation, match=r'^Invalid model kind detnet.$'):
            init_params("detnet")
        with pytest.raises(ContractViolation, match=r'^MMNet is initialized from a channel matrix.$'):
            init_params("mmnet")


class TestTrainConfig():

    data_invalid = [
        ( 0,    (1.0, 2.0),     r'^Invalid batch size .+$' ),
        ( 10,   (3.0, 2.0),     r'^Invalid SNR range .+$' ),
    ]

    @pytest.mark.parametrize("batch_size,snr_range,message", data_invalid)
    def test_invalid(self, batch_size, snr_range, message):
        with pytest.raises(ContractViolation, match=message):
            TrainConfig(iterations=1, snr_db_range=snr_range, batch_size=batch_size)

    def test_negative_iterations(self):
        with pytest.raises(ContractViolation, match=r'^Invalid iteration count .+$'):
            TrainConfig(iterations=-1, snr_db_range=(1.0, 2.0))


class TestOnlineTraining():

    data_iterations_per_channel = [
        ( 1,        1000,   3,  1000.0 ),
        ( 64,       1000,   3,  (1000 + 63 * 3) / 64 ),
        ( 1024,     1000,   3,  (1000 + 1023 * 3) / 1024 ),
    ]

    @pytest.mark.parametrize("f_count,first,rest,expected", data_iterations_per_channel)
    def test_iterations_per_channel(self, f_count, first, rest, expected):
        assert iterations_per_channel(f_count, first, rest) == pytest.approx(expected)

    def test_default_budget_average(self):
        assert iterations_per_channel(1024) == pytest.approx(3.97, abs=0.01)

    def test_iteration_accounting(self):
        c = make_constellation(4)
        grid = gen_correlated_grid(4, 2, 5, 2, 0.0, 0.0, 0.9, 0.5, RngStream(0))
        cfg = TrainConfig(iterations=0, snr_db_range=(10.0, 10.0), batch_size=8)
        table = online_train_grid(grid, c, cfg, first_iters=4, rest_iters=2, n_layers=2)

        assert len(table) == 10
        assert table.iterations == [4 + 4 * 2, 4 + 4 * 2]
        assert table[(4, 1)].kind == "mmnet"

    def test_warm_start_carries_parameters(self, mocker):
        c = make_constellation(4)
        grid = gen_correlated_grid(4, 2, 3, 1, 0.0, 0.0, 0.9, 0.0, RngStream(0))
        cfg = TrainConfig(iterations=0, snr_db_range=(10.0, 10.0), batch_size=8)
        spy = mocker.spy(trainer_module, "fit")
        table = online_train_grid(grid, c, cfg, first_iters=2, rest_iters=1, n_layers=2)

        assert spy.call_count == 3
        assert [call.args[2].iterations for call in spy.call_args_list] == [2, 1, 1]
        assert spy.call_args_list[1].args[3] is table[(0, 0)]
        assert spy.call_args_list[2].args[4] is not None

    def test_heldout_loss_once_per_slice(self, mocker):
        c = make_constellation(4)
        grid = gen_correlated_grid(4, 2, 3, 2, 0.0, 0.0, 0.9, 0.5, RngStream(0))
        cfg = TrainConfig(iterations=0, snr_db_range=(10.0, 10.0), batch_size=8)
        fit_spy = mocker.spy(trainer_module, "fit")
        loss_spy = mocker.spy(trainer_module, "evaluate_loss")
        online_train_grid(grid, c, cfg, first_iters=2, rest_iters=1, n_layers=2)

        assert [call.kwargs["heldout"] for call in fit_spy.call_args_list] == [True, False, False] * 2
        assert loss_spy.call_count == 2 * 2

    def test_cold_training(self):
        c = make_constellation(4)
        grid = gen_correlated_grid(4, 2, 2, 1, 0.0, 0.0, 0.5, 0.0, RngStream(0))
        cfg = TrainConfig(iterations=2, snr_db_range=(10.0, 10.0), batch_size=8)
        table = cold_train_grid(grid, c, cfg, n_layers=2)

        assert len(table) == 2
        assert table.iterations == [4]
