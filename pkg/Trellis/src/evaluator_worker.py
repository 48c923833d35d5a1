#!/usr/bin/env python3
"""
evaluator_worker.py
-------------------

Built-in evaluator worker. Reads EvaluatorRequest lines on stdin, writes one
EvaluatorResponse line per request on stdout; diagnostics go to stderr.

Modes:
    --echo            value = sum(genes) / 30 (metric acc), no training
    (default)         trainer.fitness on the request's dataset, budget and seed,
                      with the remaining settings from --config

Fault hooks (used to exercise the driver):
    --exit-after K    answer K requests, then exit
    --reverse         read every request until EOF, answer in reverse order
    --hang-on ID      never answer request ID

Usage:
    python evaluator_worker.py --echo
    python evaluator_worker.py --config configs/default.yaml
"""

import argparse
import sys
import time
from functools import lru_cache

from pydantic import ValidationError

import trainer
from external_eval import EvaluatorRequest, EvaluatorResponse
from graph_datasets import load_dataset
from run_config import RunConfig, load_run_config
from search_space import ArchitectureEncoding


def echo_response(request: EvaluatorRequest) -> EvaluatorResponse:
    start = time.perf_counter()
    return EvaluatorResponse(
        id=request.id,
        value=sum(request.encoding) / 30.0,
        metric_name="acc",
        minimize=False,
        wall_time=max(time.perf_counter() - start, 1e-9),
    )


@lru_cache(maxsize=4)
def _dataset(path: str):
    return load_dataset(path)


def train_response(request: EvaluatorRequest, config: RunConfig) -> EvaluatorResponse:
    max_steps = request.budget.max_steps
    cfg = config.train.model_copy(update={
        "max_steps": max_steps,
        "warmup_steps": min(config.train.warmup_steps, max_steps),
        "seed": request.budget.seed,
    })
    record = trainer.fitness(
        ArchitectureEncoding(tuple(request.encoding)),
        _dataset(request.dataset_path),
        request.task,
        cfg,
        config.dataset.metric,
        model_config=config.model,
    )
    return EvaluatorResponse(id=request.id, value=record.value, metric_name=record.metric_name,
                             minimize=record.minimize, diverged=record.diverged,
                             wall_time=record.wall_time)


def _emit(response: EvaluatorResponse):
    sys.stdout.write(response.model_dump_json() + "\n")
    sys.stdout.flush()


def serve(args, config: RunConfig):
    answered, held = 0, []
    for line in sys.stdin:
        line = line.strip()
        if not line:
            continue
        try:
            request = EvaluatorRequest.model_validate_json(line)
        except ValidationError as exc:
            print(f"⚠️  skipping malformed request: {exc}", file=sys.stderr)
            continue

        if args.exit_after is not None and answered >= args.exit_after:
            print(f"exiting after {answered} responses", file=sys.stderr)
            return
        if args.hang_on is not None and request.id == args.hang_on:
            while True:
                time.sleep(3600)

        response = echo_response(request) if args.echo else train_response(request, config)
        if args.reverse:
            held.append(response)
            continue
        _emit(response)
        answered += 1

    for response in reversed(held):
        _emit(response)


def main():
    parser = argparse.ArgumentParser(description="JSON-lines architecture evaluator worker.")
    parser.add_argument("--echo", action="store_true", help="Analytic echo mode (no training).")
    parser.add_argument("--config", default=None, help="Run config YAML for training mode.")
    parser.add_argument("--exit-after", type=int, default=None,
                        help="Exit after answering this many requests.")
    parser.add_argument("--reverse", action="store_true",
                        help="Answer all requests in reverse order after stdin closes.")
    parser.add_argument("--hang-on", default=None, help="Never answer the request with this id.")
    args = parser.parse_args()

    config = load_run_config(args.config)
    print("evaluator worker started", file=sys.stderr)
    serve(args, config)


if __name__ == "__main__":
    main()
