import argparse
import asyncio
import csv
import logging
import os
import sys

import numpy as np

from ._version import __version__
from .channel import (
    gen_correlated_grid,
    gen_iid_gaussian,
    gen_kronecker,
    grid_from_realizations,
    load_grid,
    save_grid,
    sigma2_from_snr,
)
from .constants import (
    ANDERSON_CSV_HEADER,
    CLASSIC_DETECTORS,
    DEFAULT_LAYERS,
    DEFAULT_TRAIN_SNR_DB,
    DETECTOR_NAMES,
    MODEL_KINDS,
    MODULATIONS,
    ONLINE_FIRST_ITERS,
    ONLINE_REST_ITERS,
    STREAM_CHANNEL,
    STREAM_DIAG,
    TRACE_CSV_HEADER,
    TRAIN_BATCH_SIZE,
)
from .constellation import make_constellation, modulation_order
from .diagnostics import (
    anderson_report,
    anderson_rows,
    condition_number,
    layer_error_trace,
    multiplication_count,
    trace_rows,
)
from .exceptions import PyMimoException
from .harness import SweepConfig, run_sweep_async, threads_from_env
from .models import load_params, save_params
from .numerics import RngStream
from .storage_sqlitedict import StorageSqliteDict
from .trainer import TrainConfig, fit, gradient_check, init_params, online_train_grid, sample_batch


class _Parser(argparse.ArgumentParser):
    """Usage errors exit with 1; 2 is kept for runtime failures."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def parse_snr_list(arg):
    """"lo:hi:step" (inclusive), "a,b,c" or a single value."""
    try:
        if ":" in arg:
            lo, hi, step = (float(v) for v in arg.split(":"))
            if step <= 0 or hi < lo:
                raise ValueError
            count = int(round((hi - lo) / step)) + 1
            return tuple(lo + i * step for i in range(count))
        return tuple(float(v) for v in arg.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid SNR list '{arg}', expected lo:hi:step or a,b,c")


def parse_snr_range(arg):
    try:
        lo, hi = (float(v) for v in arg.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid SNR range '{arg}', expected lo:hi")
    if hi < lo:
        raise argparse.ArgumentTypeError(f"invalid SNR range '{arg}', low end above high end")
    return lo, hi


def parse_detectors(arg):
    names = tuple(n.strip() for n in arg.split(",") if n.strip())
    for name in names:
        if name not in DETECTOR_NAMES:
            raise argparse.ArgumentTypeError(f"invalid detector '{name}', choose from {', '.join(DETECTOR_NAMES)}")
    if not names:
        raise argparse.ArgumentTypeError("at least one detector is needed")
    return names


def _order(args):
    return modulation_order(args.mod)


def _channel(args, index=0):
    rng = RngStream(args.seed).child(STREAM_CHANNEL, index)
    if args.channel == "kron":
        return gen_kronecker(args.nr, args.nt, args.rho_r, args.rho_t, rng).h
    return gen_iid_gaussian(args.nr, args.nt, rng).h


def _open_out(path):
    return open(path, "w", newline="") if path else sys.stdout


def _write_rows(path, header, rows):
    f = _open_out(path)
    try:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    finally:
        if path:
            f.close()


def cmd_gen(args):
    rng = RngStream(args.seed).child(STREAM_CHANNEL)
    if args.model == "grid":
        grid = gen_correlated_grid(args.nr, args.nt, args.f, args.t, args.rho_r, args.rho_t,
                                   args.corr_f, args.corr_t, rng)
    else:
        draws = []
        for i in range(args.f):
            cell_rng = rng.child(i)
            if args.model == "kron":
                draws.append(gen_kronecker(args.nr, args.nt, args.rho_r, args.rho_t, cell_rng))
            else:
                draws.append(gen_iid_gaussian(args.nr, args.nt, cell_rng))
        grid = grid_from_realizations(draws)
    save_grid(grid, args.out)
    print(f"{args.out}: {grid.n_r}x{grid.n_t} F={grid.f_count} T={grid.t_count}")


async def cmd_bench(args):
    grid = load_grid(args.grid) if args.grid else None
    cfg = SweepConfig(
        detectors=args.detectors,
        snr_db=args.snr,
        order=_order(args),
        n_r=args.nr,
        n_t=args.nt,
        channel="grid" if grid is not None else args.channel,
        rho_r=args.rho_r,
        rho_t=args.rho_t,
        grid=grid,
        n_channels=args.channels,
        min_errors=args.min_errors,
        max_symbols=args.max_symbols,
        block_size=args.block_size,
        seed=args.seed,
        threads=args.threads or threads_from_env(),
        layers=args.layers,
        train_snr_db=args.train_snr,
        train_iterations=args.train_iters,
        offline_iterations=args.offline_iters,
        train_batch=args.batch,
        online=args.online,
        rest_iterations=args.rest_iters,
        timing=args.timing,
    )
    report = await run_sweep_async(cfg, cache_path=args.cache)
    f = _open_out(args.out)
    try:
        report.to_csv(f)
    finally:
        if args.out:
            f.close()


def cmd_train(args):
    c = make_constellation(_order(args))
    snr_range = args.train_snr or DEFAULT_TRAIN_SNR_DB[c.order]
    cfg = TrainConfig(iterations=args.iters, snr_db_range=snr_range, rng=RngStream(args.seed),
                      batch_size=args.batch)

    if args.online:
        if not args.grid:
            raise PyMimoException("Online training needs a channel grid (--grid).")
        grid = load_grid(args.grid)
        table = online_train_grid(grid, c, cfg, args.iters, args.rest_iters, n_layers=args.layers)
        os.makedirs(args.out, exist_ok=True)
        for (f, t), params in sorted(table.cells.items()):
            save_params(params, os.path.join(args.out, f"f{f:04d}_t{t:04d}.mparm"))
        print(f"{args.out}: {len(table)} cells, {sum(table.iterations)} iterations")
        return

    if args.model == "mmnet-iid":
        h = None
    elif args.grid:
        h = load_grid(args.grid).h[0, 0]
    else:
        h = _channel(args)
    params = init_params(args.model, h, args.layers)
    result = fit(h, c, cfg, params, n_r=args.nr, n_t=args.nt)
    save_params(result.params, args.out)
    print(f"{args.out}: {args.model} T={result.params.n_layers} held-out loss {result.initial_loss} -> {result.final_loss}")


def cmd_diagnose(args):
    if args.what == "opcount":
        rows = []
        for kind in args.detectors:
            count = multiplication_count(kind, args.nr, args.nt, layers=args.layers, amortization=args.amortization,
                                         order=_order(args))
            rows.append((kind, count.one_time, count.per_signal, count.total))
        _write_rows(args.out, ("detector", "one_time", "per_signal", "total"), rows)
        return

    if args.what == "condition":
        if args.grid:
            grid = load_grid(args.grid)
            values = [(f"{cell.freq_index}:{cell.time_index}", condition_number(cell.h)) for cell in grid.cells()]
        else:
            values = [(str(i), condition_number(_channel(args, i))) for i in range(args.count)]
        _write_rows(args.out, ("channel", "condition_number"), values)
        return

    c = make_constellation(_order(args))
    h = load_grid(args.grid).h[0, 0] if args.grid else _channel(args)
    sigma2 = float(sigma2_from_snr(h, args.snr))
    model = load_params(args.params) if args.params else args.model
    if model in MODEL_KINDS:
        raise PyMimoException(f"Diagnosing {model} needs trained parameters (--params).")
    trace = layer_error_trace(model, h, c, sigma2, args.samples, RngStream(args.seed).child(STREAM_DIAG))
    if args.what == "trace":
        _write_rows(args.out, TRACE_CSV_HEADER, trace_rows(trace))
    else:
        report = anderson_report(trace.e_lin)
        _write_rows(args.out, ANDERSON_CSV_HEADER, anderson_rows(report))
        logging.getLogger(__name__).info("Gaussian fraction per layer: %s", np.round(report.gaussian_fraction(), 3))


def cmd_gradcheck(args):
    c = make_constellation(_order(args))
    snr = (args.snr, args.snr)
    cfg = TrainConfig(iterations=0, snr_db_range=snr, rng=RngStream(args.seed), batch_size=args.batch)
    h = None if args.model == "mmnet-iid" else _channel(args)
    params = init_params(args.model, h, args.layers)
    batch = sample_batch(h, c, args.nr, args.nt, args.batch, snr, cfg.rng.child(0))
    check = gradient_check(params, batch, c)
    print(f"{args.model}: {check.analytic.size} parameters, max relative error {check.max_rel_error:.3e}")


def _add_common(parser, channel=True):
    parser.add_argument("--mod", choices=tuple(MODULATIONS), default="qam4", help="constellation")
    parser.add_argument("--nr", type=int, default=64, help="receive antennas")
    parser.add_argument("--nt", type=int, default=32, help="transmit antennas")
    parser.add_argument("--seed", type=int, default=0, help="root seed")
    if channel:
        parser.add_argument("--channel", choices=("iid", "kron"), default="iid", help="channel model")
        parser.add_argument("--rho-r", dest="rho_r", type=float, default=0.0, help="receive correlation")
        parser.add_argument("--rho-t", dest="rho_t", type=float, default=0.0, help="transmit correlation")
        parser.add_argument("--grid", type=str, help="MCHAN1 channel file to use instead of drawing channels")
    parser.add_argument("--layers", type=int, default=DEFAULT_LAYERS, help="unrolled layers / iterations")


def build_parser():
    parser = _Parser(prog="pymimodetcommand", description="Massive MIMO detection benchmarks.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    parser.add_argument("-l", "--list_cached_params", dest="list_cached_params", action="store_true",
                        help="display all cached parameter sets")
    parser.add_argument("--cache", type=str, help="path to the parameter cache")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    gen = sub.add_parser("gen", help="generate a channel dataset (MCHAN1)")
    gen.add_argument("--nr", type=int, required=True)
    gen.add_argument("--nt", type=int, required=True)
    gen.add_argument("--f", type=int, default=1, help="subcarriers, or independent draws for iid/kron")
    gen.add_argument("--t", type=int, default=1, help="time slices (grid only)")
    gen.add_argument("--model", choices=("iid", "kron", "grid"), default="iid")
    gen.add_argument("--rho-r", dest="rho_r", type=float, default=0.0)
    gen.add_argument("--rho-t", dest="rho_t", type=float, default=0.0)
    gen.add_argument("--corr-f", dest="corr_f", type=float, default=0.0, help="adjacent subcarrier correlation")
    gen.add_argument("--corr-t", dest="corr_t", type=float, default=0.0, help="adjacent time slice correlation")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", type=str, required=True)

    bench = sub.add_parser("bench", help="SER sweep to CSV")
    _add_common(bench)
    bench.add_argument("--detectors", type=parse_detectors, default=("mmse",), help="comma separated detector names")
    bench.add_argument("--snr", type=parse_snr_list, required=True, help="lo:hi:step (inclusive) or a,b,c")
    bench.add_argument("--channels", type=int, help="number of channels cycled through")
    bench.add_argument("--min-errors", dest="min_errors", type=int, default=100)
    bench.add_argument("--max-symbols", dest="max_symbols", type=int, default=10 ** 6)
    bench.add_argument("--block-size", dest="block_size", type=int, default=100)
    bench.add_argument("--threads", type=int, help="worker threads (default MIMO_THREADS or cpu count)")
    bench.add_argument("--train-snr", dest="train_snr", type=parse_snr_range, help="training SNR range lo:hi")
    bench.add_argument("--train-iters", dest="train_iters", type=int, default=ONLINE_FIRST_ITERS)
    bench.add_argument("--rest-iters", dest="rest_iters", type=int, default=ONLINE_REST_ITERS)
    bench.add_argument("--offline-iters", dest="offline_iters", type=int, default=10000)
    bench.add_argument("--batch", type=int, default=TRAIN_BATCH_SIZE)
    bench.add_argument("--online", action="store_true", help="train MMNet online along the grid")
    bench.add_argument("--timing", action="store_true", help="write wall-clock seconds")
    bench.add_argument("--out", type=str, help="CSV file (default stdout)")

    train = sub.add_parser("train", help="train a learned detector (MPARM1)")
    _add_common(train)
    train.add_argument("--model", choices=MODEL_KINDS, default="mmnet")
    train.add_argument("--iters", type=int, default=ONLINE_FIRST_ITERS)
    train.add_argument("--rest-iters", dest="rest_iters", type=int, default=ONLINE_REST_ITERS)
    train.add_argument("--batch", type=int, default=TRAIN_BATCH_SIZE)
    train.add_argument("--train-snr", dest="train_snr", type=parse_snr_range)
    train.add_argument("--online", action="store_true", help="online MMNet training over --grid, --out is a directory")
    train.add_argument("--out", type=str, required=True)

    diagnose = sub.add_parser("diagnose", help="error dynamics, Gaussianity, conditioning, op counts")
    _add_common(diagnose)
    diagnose.set_defaults(layers=None)
    diagnose.add_argument("what", choices=("trace", "anderson", "condition", "opcount"))
    diagnose.add_argument("--model", choices=("amp", "oamp") + MODEL_KINDS, default="amp")
    diagnose.add_argument("--params", type=str, help="MPARM1 file of a trained model")
    diagnose.add_argument("--snr", type=float, default=9.0)
    diagnose.add_argument("--samples", type=int, default=10000)
    diagnose.add_argument("--count", type=int, default=10, help="channels for the condition numbers")
    diagnose.add_argument("--detectors", type=parse_detectors, default=CLASSIC_DETECTORS[:-1] + MODEL_KINDS)
    diagnose.add_argument("--amortization", type=int, default=100)
    diagnose.add_argument("--out", type=str, help="CSV file (default stdout)")

    gradcheck = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    _add_common(gradcheck, channel=False)
    gradcheck.set_defaults(channel="iid", rho_r=0.0, rho_t=0.0)
    gradcheck.add_argument("--model", choices=MODEL_KINDS, default="mmnet")
    gradcheck.add_argument("--batch", type=int, default=16)
    gradcheck.add_argument("--snr", type=float, default=10.0)
    return parser


async def list_cached_params(path):
    storage = await StorageSqliteDict.create(path)
    try:
        await storage.list_keys()
    finally:
        await storage.close()


def run(args):
    if args.list_cached_params:
        asyncio.run(list_cached_params(args.cache))
    elif args.command == "gen":
        cmd_gen(args)
    elif args.command == "bench":
        asyncio.run(cmd_bench(args))
    elif args.command == "train":
        cmd_train(args)
    elif args.command == "diagnose":
        cmd_diagnose(args)
    elif args.command == "gradcheck":
        cmd_gradcheck(args)


def cli_main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code
    if args.command is None and not args.list_cached_params:
        parser.print_usage(sys.stderr)
        return 1

    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        run(args)
    except (PyMimoException, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


def pymimodetcommand():
    sys.exit(cli_main())
