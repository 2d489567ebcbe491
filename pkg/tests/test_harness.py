import io
import math

import pytest
import numpy as np
import pymimodet.harness as harness_module
from pymimodet.channel import gen_correlated_grid
from pymimodet.exceptions import ContractViolation, DivergenceError, RangeError
from pymimodet.harness import (
    MonteCarloSweep,
    SerReport,
    SerRow,
    SweepConfig,
    evaluate_channels,
    paired_bootstrap,
    percentile_gap,
    run_sweep,
    run_sweep_async,
    ser_cdf,
    snr_at_target,
    snr_gap,
    threads_from_env,
)
from pymimodet.numerics import RngStream
from pymimodet.trainer import TrainResult, iterations_per_channel


def small_config(**kw):
    args = dict(
        detectors=("zf", "mmse"),
        snr_db=(4.0, 8.0),
        n_r=8,
        n_t=4,
        min_errors=50,
        max_symbols=4000,
        block_size=10,
    )
    args.update(kw)
    return SweepConfig(**args)


def untrained_fit(h, c, cfg, params, state=None, n_r=None, n_t=None, heldout=True):
    return TrainResult(params, state, None, None)


class MemoryStorage:
    def __init__(self):
        self.data = {}

    async def set_key(self, key, val):
        self.data[key] = bytes(val)

    async def get_key(self, key):
        return self.data.get(key)

    async def list_keys(self):
        for key in self.data:
            print(key)

    async def close(self):
        pass


class TestSweepConfig():

    data_invalid = [
        ( dict(detectors=()),                   r'^At least one detector is needed.$' ),
        ( dict(detectors=("sphere",)),          r'^Invalid detector sphere.+$' ),
        ( dict(snr_db=()),                      r'^SNR list must be nonempty.$' ),
        ( dict(min_errors=0),                   r'^Invalid min_errors 0.+$' ),
        ( dict(threads=0),                      r'^max_symbols, block_size and threads .+$' ),
        ( dict(channel="rayleigh"),             r'^Invalid channel source rayleigh.+$' ),
        ( dict(channel="grid"),                 r'^Channel source grid needs a channel grid.$' ),
        ( dict(n_channels=0),                   r'^Invalid channel count 0.+$' ),
    ]

    @pytest.mark.parametrize("kw,message", data_invalid)
    def test_invalid(self, kw, message):
        with pytest.raises(ContractViolation, match=message):
            small_config(**kw)

    def test_train_range_default(self):
        assert small_config(order=16).train_range == (11.0, 16.0)
        assert small_config(train_snr_db=(1.0, 2.0)).train_range == (1.0, 2.0)

    def test_grid_dims(self):
        grid = gen_correlated_grid(6, 3, 2, 1, 0.0, 0.0, 0.5, 0.0, RngStream(0))

        assert small_config(channel="grid", grid=grid).dims == (6, 3)


class TestThreadsFromEnv():

    def test_env(self, monkeypatch):
        monkeypatch.setenv("MIMO_THREADS", "3")

        assert threads_from_env() == 3

    def test_default(self, monkeypatch):
        monkeypatch.delenv("MIMO_THREADS", raising=False)

        assert threads_from_env(5) == 5
        assert threads_from_env() >= 1

    @pytest.mark.parametrize("value", ["0", "-2", "many"])
    def test_invalid(self, monkeypatch, value):
        monkeypatch.setenv("MIMO_THREADS", value)

        with pytest.raises(ContractViolation, match=r'^Invalid MIMO_THREADS value .+$'):
            threads_from_env()


class TestSweep():

    def test_report_shape(self):
        report = run_sweep(small_config())

        assert [(r.detector, r.snr_db) for r in report.rows] == [("zf", 4.0), ("zf", 8.0), ("mmse", 4.0), ("mmse", 8.0)]
        for row in report.rows:
            assert row.symbols % 40 == 0
            assert row.errors >= 50 or row.symbols >= 4000
            assert row.ser == row.errors / row.symbols
            assert row.failure is None

    def test_thread_count_does_not_matter(self):
        one = run_sweep(small_config(threads=1))
        four = run_sweep(small_config(threads=4))

        assert [r[:5] for r in one.rows] == [r[:5] for r in four.rows]

    def test_repeatable(self):
        assert [r[:5] for r in run_sweep(small_config()).rows] == [r[:5] for r in run_sweep(small_config()).rows]

    def test_seed_changes_result(self):
        a = run_sweep(small_config(detectors=("zf",), min_errors=10 ** 6, max_symbols=2000))
        b = run_sweep(small_config(detectors=("zf",), min_errors=10 ** 6, max_symbols=2000, seed=1))

        assert [r.errors for r in a.rows] != [r.errors for r in b.rows]

    def test_max_symbols_stops(self):
        report = run_sweep(small_config(detectors=("ml",), snr_db=(30.0,), max_symbols=400))

        assert report.rows[0].symbols == 400
        assert report.rows[0].errors == 0
        assert report.rows[0].ser == 0.0

    def test_more_snr_fewer_errors(self):
        report = run_sweep(small_config(detectors=("mmse",), snr_db=(0.0, 20.0), min_errors=10 ** 6, max_symbols=4000))

        assert report.rows[0].ser > report.rows[1].ser

    def test_failure_row(self, mocker):
        mocker.patch('pymimodet.harness.detect', side_effect=DivergenceError("AMP diverged at iteration 3.", 3))
        report = run_sweep(small_config(detectors=("amp",), snr_db=(5.0,)))
        row = report.rows[0]

        assert row.failure == "AMP diverged at iteration 3."
        assert (row.errors, row.symbols) == (0, 0)
        assert math.isnan(row.ser)
        assert report.points("amp") == []

    def test_timing(self):
        assert run_sweep(small_config(detectors=("zf",), snr_db=(5.0,), timing=True)).rows[0].wall_seconds > 0
        assert run_sweep(small_config(detectors=("zf",), snr_db=(5.0,))).rows[0].wall_seconds == 0.0

    def test_grid_channel_cycles(self):
        grid = gen_correlated_grid(8, 4, 3, 2, 0.0, 0.0, 0.5, 0.5, RngStream(0))
        sweep = MonteCarloSweep(small_config(channel="grid", grid=grid))

        assert np.array_equal(sweep.channel(7), grid.h[0, 1])
        assert sweep._locate(7) == (1, 1)

    def test_locate(self):
        assert MonteCarloSweep(small_config(n_channels=3))._locate(7) == (1, 2)
        assert MonteCarloSweep(small_config())._locate(7) == (7, 0)

    def test_evaluate_channels(self):
        cfg = small_config(detectors=("zf", "ml"), n_channels=4)
        evaluation = evaluate_channels(cfg, 6.0, blocks_per_channel=2)

        assert evaluation.symbols_per_channel == 2 * 10 * 4
        assert evaluation.ser["zf"].shape == (4,)
        assert np.mean(evaluation.ser["ml"]) <= np.mean(evaluation.ser["zf"])

    def test_evaluate_channels_needs_count(self):
        with pytest.raises(ContractViolation, match=r'^Per-channel evaluation needs a fixed channel count.$'):
            evaluate_channels(small_config(), 6.0)


@pytest.mark.asyncio
class TestLearnedSweep():

    async def test_trains_once_per_channel(self, mocker):
        fit = mocker.patch('pymimodet.harness.fit', side_effect=untrained_fit)
        cfg = small_config(detectors=("mmnet",), snr_db=(6.0,), n_channels=2, min_errors=10 ** 6, max_symbols=400,
                           layers=2)
        report = await run_sweep_async(cfg)

        assert fit.call_count == 2
        assert report.rows[0].symbols == 400

    async def test_offline_model_trained_once(self, mocker):
        fit = mocker.patch('pymimodet.harness.fit', side_effect=untrained_fit)
        cfg = small_config(detectors=("mmnet-iid",), snr_db=(6.0, 8.0), min_errors=10 ** 6, max_symbols=400, layers=2)
        await run_sweep_async(cfg)

        assert fit.call_count == 1
        assert fit.call_args.args[0] is None

    async def test_storage_cache(self, mocker):
        fit = mocker.patch('pymimodet.harness.fit', side_effect=untrained_fit)
        storage = MemoryStorage()
        cfg = small_config(detectors=("mmnet",), snr_db=(6.0,), n_channels=2, min_errors=10 ** 6, max_symbols=160,
                           layers=2)
        first = await run_sweep_async(cfg, storage=storage)

        assert len(storage.data) == 2
        assert all(key.startswith("mmnet:") for key in storage.data)

        second = await run_sweep_async(cfg, storage=storage)

        assert fit.call_count == 2
        assert first.rows[0][:5] == second.rows[0][:5]

    async def test_sqlite_cache(self, mocker, tmp_path):
        mocker.patch('pymimodet.harness.fit', side_effect=untrained_fit)
        cfg = small_config(detectors=("mmnet-iid",), snr_db=(6.0,), min_errors=10 ** 6, max_symbols=160, layers=2)
        await run_sweep_async(cfg, cache_path=str(tmp_path / "cache.sqlite"))

        assert (tmp_path / "cache.sqlite").exists()

    async def test_online_grid(self, mocker):
        mocker.patch('pymimodet.trainer.fit', side_effect=untrained_fit)
        online = mocker.spy(harness_module, "online_train_grid")
        grid = gen_correlated_grid(8, 4, 3, 1, 0.0, 0.0, 0.9, 0.0, RngStream(0))
        cfg = small_config(detectors=("mmnet",), snr_db=(6.0,), channel="grid", grid=grid, online=True,
                           min_errors=10 ** 6, max_symbols=240, layers=2)
        report = await run_sweep_async(cfg)

        assert online.call_count == 1
        assert report.rows[0].symbols == 240

    async def test_bad_storage(self):
        with pytest.raises(ContractViolation, match=r'^Storage is not a StorageProto class.$'):
            await MonteCarloSweep.create(small_config(), storage=object())


class TestSerReport():

    def report(self):
        return SerReport(rows=[
            SerRow("a", 10.0, 1, 10000, 1e-4),
            SerRow("a", 8.0, 100, 10000, 1e-2),
            SerRow("b", 8.0, 10, 1000, 1e-2),
            SerRow("b", 12.0, 1, 10000, 1e-4),
            SerRow("b", 10.0, 0, 0, math.nan, 0.0, "failed"),
        ])

    def test_points(self):
        assert self.report().points("a") == [(8.0, 1e-2), (10.0, 1e-4)]
        assert self.report().points("b") == [(8.0, 1e-2), (12.0, 1e-4)]

    def test_snr_at_target(self):
        assert snr_at_target(self.report(), "a", 1e-3) == pytest.approx(9.0)
        assert snr_at_target(self.report(), "b", 1e-3) == pytest.approx(10.0)
        assert snr_gap(self.report(), "b", "a") == pytest.approx(1.0)

    data_unbracketed = [
        ( "a",  1e-1 ),
        ( "a",  1e-6 ),
        ( "c",  1e-3 ),
    ]

    @pytest.mark.parametrize("detector,target", data_unbracketed)
    def test_not_bracketed(self, detector, target):
        with pytest.raises(RangeError, match=r'^.+ SER curve does not bracket .+$'):
            snr_at_target(self.report(), detector, target)

    def test_csv(self, tmp_path):
        f = io.StringIO()
        self.report().to_csv(f)
        lines = f.getvalue().splitlines()

        assert lines[0] == "detector,snr_db,errors,symbols,ser,wall_seconds"
        assert lines[1] == "a,10,1,10000,0.0001,0.000000"
        assert len(lines) == 6

        path = tmp_path / "ser.csv"
        self.report().write_csv(path)
        assert path.read_text() == f.getvalue()


class TestStatistics():

    def test_bootstrap_constant_difference(self):
        mean, (lo, hi) = paired_bootstrap(np.arange(10.0) + 1.0, np.arange(10.0))

        assert mean == pytest.approx(1.0)
        assert lo == pytest.approx(1.0)
        assert hi == pytest.approx(1.0)

    def test_bootstrap_significant(self):
        rng = np.random.default_rng(0)
        b = rng.uniform(size=60)
        mean, (lo, hi) = paired_bootstrap(b + 0.2 + 0.05 * rng.normal(size=60), b, n_boot=2000, rng=RngStream(1))

        assert lo > 0.0
        assert lo <= mean <= hi

    def test_bootstrap_invalid(self):
        with pytest.raises(ContractViolation):
            paired_bootstrap([], [])

    def test_ser_cdf(self):
        v, p = ser_cdf([3.0, 1.0, 2.0, 4.0])

        assert np.array_equal(v, [1.0, 2.0, 3.0, 4.0])
        assert np.array_equal(p, [0.25, 0.5, 0.75, 1.0])

    def test_percentile_gap(self):
        assert percentile_gap(np.arange(101.0)) == pytest.approx(90.0)
        assert percentile_gap(np.arange(101.0), q=50) == pytest.approx(50.0)


@pytest.mark.slow
class TestAcceptance():

    def test_mmse_iid_64x32(self):
        cfg = SweepConfig(detectors=("mmse",), snr_db=(9.0,), min_errors=10 ** 9, max_symbols=3 * 10 ** 6, threads=4)
        ser = run_sweep(cfg).rows[0].ser

        assert ser == pytest.approx(2.0e-3, rel=0.3)

    def test_amp_iid_64x32(self):
        cfg = SweepConfig(detectors=("amp",), snr_db=(9.0,), min_errors=10 ** 9, max_symbols=3 * 10 ** 6, threads=4)
        ser = run_sweep(cfg).rows[0].ser

        assert 0.6e-4 <= ser <= 2.4e-4

    def test_learned_iid_64x32(self):
        cfg = SweepConfig(detectors=("mmnet-iid", "oampnet"), snr_db=(9.0,), min_errors=10 ** 9,
                          max_symbols=3 * 10 ** 6, threads=4)
        report = run_sweep(cfg)

        assert report.points("mmnet-iid")[0][1] <= 1.5e-4
        assert report.points("oampnet")[0][1] <= 1.7e-4

    def test_iid_ordering(self):
        cfg = SweepConfig(detectors=("mmnet-iid", "oampnet", "amp", "mmse"), snr_db=(9.0,), n_channels=200,
                          block_size=100, threads=4)
        ser = evaluate_channels(cfg, 9.0, blocks_per_channel=50).ser

        for better, worse in [("mmnet-iid", "oampnet"), ("oampnet", "amp"), ("amp", "mmse")]:
            _, (lo, _) = paired_bootstrap(ser[better], ser[worse], rng=RngStream(1))
            assert lo <= 0.0

    def test_correlated_ordering(self):
        base = dict(n_r=16, n_t=8, channel="kron", rho_r=0.7, rho_t=0.7, n_channels=50, block_size=100, threads=4)
        snr_db = None
        for candidate in np.arange(10.0, 32.0, 2.0):
            mmse = evaluate_channels(SweepConfig(detectors=("mmse",), snr_db=(candidate,), **base), candidate,
                                     blocks_per_channel=20).ser["mmse"]
            if 1e-3 <= np.mean(mmse) <= 1e-2:
                snr_db = float(candidate)
                break
        assert snr_db is not None

        cfg = SweepConfig(detectors=("mmnet", "oampnet", "mmse"), snr_db=(snr_db,),
                          train_snr_db=(snr_db - 3.0, snr_db + 3.0), **base)
        ser = evaluate_channels(cfg, snr_db, blocks_per_channel=20).ser

        for better, worse in [("mmnet", "oampnet"), ("oampnet", "mmse")]:
            _, (_, hi) = paired_bootstrap(ser[better], ser[worse], rng=RngStream(2))
            assert hi < 0.0

    def test_online_training_close_to_cold(self):
        grid = gen_correlated_grid(16, 8, 64, 1, 0.0, 0.0, 0.99, 0.0, RngStream(3))
        base = dict(detectors=("mmnet",), snr_db=(8.0,), channel="grid", grid=grid, block_size=100, threads=4,
                    train_iterations=1000, rest_iterations=3)
        online = evaluate_channels(SweepConfig(online=True, **base), 8.0, blocks_per_channel=10).ser["mmnet"]
        cold = evaluate_channels(SweepConfig(**base), 8.0, blocks_per_channel=10).ser["mmnet"]

        assert iterations_per_channel(64, 1000, 3) <= 18.6
        assert np.mean(online) <= 2.0 * np.mean(cold)
