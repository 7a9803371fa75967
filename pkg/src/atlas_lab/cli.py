"""``atlas-lab`` command-line entry point.

Exit codes: 0 success, 2 config error, 3 missing upstream artifact,
4 numerical failure, 5 config-hash mismatch, 6 output directory locked.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC, EXIT_HASH, EXIT_LOCKED = 0, 2, 3, 4, 5, 6
COMMANDS = ["gen-data", "train-decoder", "train", "forecast", "evaluate", "compare", "grad-check", "spectra"]

log = logging.getLogger("atlas_lab")


def _cap_threads() -> int | None:
    """Honor ATLAS_LAB_THREADS before numpy and torch spin up their pools."""
    n = os.environ.get("ATLAS_LAB_THREADS")
    if not n:
        return None
    try:
        n = int(n)
    except ValueError:
        n = 0
    if n < 1:
        raise ValueError("ATLAS_LAB_THREADS must be a positive integer")
    for var in ("OMP_NUM_THREADS", "MKL_NUM_THREADS", "OPENBLAS_NUM_THREADS"):
        os.environ[var] = str(n)
    return n


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="run config (TOML)")
    common.add_argument("--seed", type=_u64, help="overrides the config seed")
    common.add_argument("--out", help="overrides the config output directory")
    common.add_argument("--override-hash-check", action="store_true",
                        help="proceed when upstream artifacts were built from a different config")
    common.add_argument("--method", choices=["si", "edm", "crps"], help="overrides method.name")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="atlas-lab", description="Desk-scale latent probabilistic forecasting lab")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="simulate the synthetic dataset and norm stats")
    sub.add_parser("train-decoder", parents=[common], help="fit the latent-to-full-grid decoder")
    sub.add_parser("train", parents=[common], help="fit the generative model for method.name")
    f = sub.add_parser("forecast", parents=[common], help="roll out an ensemble from one test init")
    f.add_argument("--model", help="method name or 'oracle' (default: method.name)")
    f.add_argument("--init", type=int, default=0, help="index into the evaluation init times")
    e = sub.add_parser("evaluate", parents=[common], help="score ensembles over the test init times")
    e.add_argument("--model", help="method name or 'oracle' (default: method.name)")
    c = sub.add_parser("compare", parents=[common], help="paired scorecard of two evaluated models")
    c.add_argument("--a", help="model A (default: method.name)")
    c.add_argument("--b", default="oracle", help="model B (default: oracle)")
    sub.add_parser("grad-check", parents=[common], help="finite-difference gradient checks")
    s = sub.add_parser("spectra", parents=[common], help="power spectra of truth and a saved forecast")
    s.add_argument("--model", help="method name or 'oracle' (default: method.name)")
    return p


def run(args) -> int:
    threads = _cap_threads()
    import torch
    from filelock import FileLock, Timeout

    from . import runner
    from .config import ConfigError, RunConfig
    from .diffable import NonFiniteError

    if threads:
        torch.set_num_threads(threads)
    try:
        cfg = RunConfig.load(args.config, seed=args.seed, out=args.out, method=args.method)
    except ConfigError as e:
        log.error("config error: %s", e)
        return EXIT_CONFIG
    cfg.out.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(cfg.out / ".lock"), timeout=0)
    try:
        lock.acquire()
    except Timeout:
        log.error("output directory %s is locked by another process", cfg.out)
        return EXIT_LOCKED
    try:
        run_ = runner.Run(cfg, args.override_hash_check)
        model = getattr(args, "model", None) or cfg.method
        cmd = args.command
        if cmd == "gen-data":
            runner.gen_data(run_)
        elif cmd == "train-decoder":
            runner.train_decoder_stage(run_)
        elif cmd == "train":
            runner.train_stage(run_)
        elif cmd == "forecast":
            runner.forecast_stage(run_, model, args.init)
        elif cmd == "evaluate":
            runner.evaluate_stage(run_, model)
        elif cmd == "compare":
            runner.compare_stage(run_, args.a or cfg.method, args.b)
        elif cmd == "grad-check":
            if not runner.grad_check_stage(run_):
                log.error("gradient check failed; see grad-check.csv")
                return EXIT_NUMERIC
        elif cmd == "spectra":
            runner.spectra_stage(run_, model)
    except ConfigError as e:
        log.error("config error: %s", e)
        return EXIT_CONFIG
    except runner.MissingArtifact as e:
        log.error("%s", e)
        return EXIT_MISSING
    except runner.HashMismatch as e:
        log.error("%s", e)
        return EXIT_HASH
    except (FloatingPointError, NonFiniteError) as e:
        log.error("numerical failure: %s", e)
        return EXIT_NUMERIC
    finally:
        lock.release()
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except ValueError as e:
        if "ATLAS_LAB_THREADS" in str(e):
            log.error("config error: %s", e)
            return EXIT_CONFIG
        raise


if __name__ == "__main__":
    sys.exit(main())
