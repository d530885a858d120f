#!/usr/bin/env python3
"""
iotprint Pipeline Orchestrator
------------------------------------------
Sequentially runs split → encode → train → eval into one output tree:

  <out>/sessions   session store from the pcaps
  <out>/dataset    IDX dataset
  <out>/run        model, reports, saved splits
  <out>/run/eval   re-scored report

Responsibilities:
  • Execute each stage in-process through the CLI commands
  • Capture logs in Config.LOG_DIR/pipeline_runner__<timestamp>.log
  • Print a timing summary for each step
"""

from __future__ import annotations
import argparse
import sys
import time
from pathlib import Path
from typing import Callable

import pendulum

from iotprint.config import Config
from iotprint.errors import ConfigError, DataError


logger = Config.setup_logger(__name__)


# -------------------- STEPS --------------------

def _steps(args: argparse.Namespace) -> list[tuple[str, Callable[[], int]]]:
    from iotprint import cli

    out = Path(args.out)
    sessions_dir, dataset_dir, run_dir = out / "sessions", out / "dataset", out / "run"

    split_args = argparse.Namespace(**{**vars(args), "out": str(sessions_dir)})
    encode_args = argparse.Namespace(**{**vars(args), "out": str(dataset_dir), "sessions": str(sessions_dir)})
    train_args = argparse.Namespace(**{**vars(args), "out": str(run_dir), "dataset": str(dataset_dir)})
    eval_args = argparse.Namespace(run_dir=str(run_dir), out=None)
    if args.experiment == 2 and args.exclude == "all":
        eval_step: Callable[[], int] = lambda: cli.EXIT_OK  # per-label runs are scored during training
    else:
        eval_step = lambda: cli.cmd_eval(eval_args)

    return [
        ("split", lambda: cli.cmd_split(split_args)),
        ("encode", lambda: cli.cmd_encode(encode_args)),
        ("train", lambda: cli.cmd_train(train_args)),
        ("eval", eval_step),
    ]


def run_step(name: str, step: Callable[[], int]) -> tuple[int, float]:
    """
    Run one pipeline step.
    Returns (return_code, elapsed_seconds); domain errors propagate to the CLI.
    """
    start = time.perf_counter()
    logger.info("-> Running step: %s", name)
    rc = step()
    elapsed = time.perf_counter() - start
    if rc == 0:
        logger.info("<- %s completed OK in %.2fs", name, elapsed)
    else:
        logger.error("<- %s FAILED (code %s) in %.2fs", name, rc, elapsed)
    return rc, elapsed


# -------------------- MAIN --------------------

def log_summary(timings: list[tuple[str, float]], total_elapsed: float) -> None:
    mins, secs = divmod(total_elapsed, 60)
    logger.info("----------------------------")
    logger.info("Pipeline Timing Summary")
    logger.info("----------------------------")
    for step, t in timings:
        step_mins, step_secs = divmod(t, 60)
        logger.info("%-25s : %6.1fs (%dm %ds)", step, t, int(step_mins), int(step_secs))

    logger.info("----------------------------")
    logger.info("Total: %6.1fs (%dm %ds)", total_elapsed, int(mins), int(secs))
    logger.info("----------------------------")


def run_pipeline(args: argparse.Namespace) -> int:
    Config.ensure_dirs()
    log_file = Config.LOG_DIR / f"pipeline_runner__{pendulum.now('UTC').format('YYYY-MM-DD_HHmmss')}.log"
    Config.setup_logger(__name__, log_file)

    # Keep orchestration logs free of progress bars
    tqdm_was = Config.TQDM_ENABLED
    Config.set_tqdm(False)

    logger.info("==== Pipeline started ====")
    logger.info("Log file: %s", log_file)

    overall_start = time.perf_counter()
    timings: list[tuple[str, float]] = []
    failed: str | None = None
    try:
        for name, step in _steps(args):
            start = time.perf_counter()
            try:
                rc, elapsed = run_step(name, step)
            except (ConfigError, DataError, OSError):
                timings.append((name, time.perf_counter() - start))
                logger.error("<- %s raised an error", name)
                raise
            timings.append((name, elapsed))
            if rc != 0:
                failed = name
                break
    finally:
        Config.set_tqdm(tqdm_was)
        log_summary(timings, time.perf_counter() - overall_start)

    if failed:
        logger.error("Pipeline stopped at step: %s", failed)
        return 1
    logger.info("All pipeline steps completed successfully.")
    return 0


if __name__ == "__main__":
    from iotprint.cli import main

    sys.exit(main(["run", *sys.argv[1:]]))
