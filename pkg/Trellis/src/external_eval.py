#!/usr/bin/env python3
"""
external_eval.py
----------------

Drives an out-of-process evaluator over newline-delimited JSON.

    -> {"id", "encoding": [6 ints], "budget": {"max_steps", "seed"}, "dataset_path", "task"}
    <- {"id", "value", "metric_name", "minimize", "diverged", "wall_time"}

Responses may arrive in any order and are matched by id; unknown fields are ignored.
A request times out after max(timeout_floor, 10 x median completed wall time) with no
response (initial_timeout until a freshly started worker answers once): the worker is killed, the
earliest-sent unanswered request is marked diverged and a fresh worker takes the rest.
If the worker exits early, every unanswered request is marked diverged.
Requests are written from a separate thread, so a worker that stops reading cannot stall
the timeout.
"""

import json
import queue
import shlex
import subprocess
import threading
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from search_space import ArchitectureEncoding
from trainer import FitnessRecord


class ProtocolError(RuntimeError):
    def __init__(self, line: str, reason: str = ""):
        self.line = line
        super().__init__(f"Malformed evaluator response{f' ({reason})' if reason else ''}: {line!r}")


class Budget(BaseModel):
    model_config = ConfigDict(extra="ignore")

    max_steps: int
    seed: int


class EvaluatorRequest(BaseModel):
    model_config = ConfigDict(extra="ignore")

    id: str
    encoding: List[int] = Field(min_length=6, max_length=6)
    budget: Budget
    dataset_path: str
    task: str = "NC"


class EvaluatorResponse(BaseModel):
    model_config = ConfigDict(extra="ignore")

    id: str
    value: float
    metric_name: str
    minimize: bool
    diverged: bool = False
    wall_time: float = 0.0


ResponseCallback = Callable[[EvaluatorRequest, EvaluatorResponse], None]


def to_fitness_record(request: EvaluatorRequest, response: EvaluatorResponse) -> FitnessRecord:
    return FitnessRecord(
        encoding=ArchitectureEncoding(tuple(request.encoding)),
        metric_name=response.metric_name,
        value=response.value,
        minimize=response.minimize,
        wall_time=response.wall_time,
        seed=request.budget.seed,
        diverged=response.diverged,
        id=request.id,
    )


def _diverged(request: EvaluatorRequest, metric_name: str) -> EvaluatorResponse:
    return EvaluatorResponse(
        id=request.id,
        value=float("inf") if metric_name == "mae" else 0.0,
        metric_name=metric_name,
        minimize=metric_name == "mae",
        diverged=True,
    )


def _spawn(command: Sequence[str]) -> subprocess.Popen:
    return subprocess.Popen(
        list(command),
        stdin=subprocess.PIPE,
        stdout=subprocess.PIPE,
        text=True,
        bufsize=1,
    )


def _feed(stdin, requests: Sequence[EvaluatorRequest]):
    """Writes every request, then closes stdin. Runs off the timeout thread."""
    try:
        for request in requests:
            stdin.write(request.model_dump_json() + "\n")
        stdin.close()
    except (OSError, ValueError):
        pass


def _pump(stream, lines: "queue.Queue"):
    for line in stream:
        line = line.strip()
        if line:
            lines.put(line)
    lines.put(None)


def _parse(line: str, outstanding: List[str]) -> EvaluatorResponse:
    try:
        response = EvaluatorResponse.model_validate(json.loads(line))
    except (json.JSONDecodeError, ValidationError) as exc:
        raise ProtocolError(line, type(exc).__name__) from exc
    if response.id not in outstanding:
        raise ProtocolError(line, f"unexpected id {response.id}")
    return response


def _stop(proc: subprocess.Popen, writer: threading.Thread):
    if proc.poll() is None:
        proc.kill()
    proc.wait()
    writer.join()
    try:
        proc.stdin.close()
    except (OSError, ValueError):
        pass


def external_evaluate(worker_command: Union[str, Sequence[str]],
                      requests: Sequence[EvaluatorRequest],
                      metric_name: str = "acc",
                      timeout_floor: float = 60.0,
                      initial_timeout: float = 600.0,
                      verbose: bool = False,
                      on_response: Optional[ResponseCallback] = None) -> List[EvaluatorResponse]:
    """Responses in request order. `metric_name` labels records the worker never answered.

    `on_response(request, response)` runs on the calling thread as soon as each request is
    settled, answered or diverged, so callers can persist results before the batch ends.
    """
    command = shlex.split(worker_command) if isinstance(worker_command, str) else list(worker_command)
    answers: Dict[str, EvaluatorResponse] = {}
    completed_times: List[float] = []
    pending = list(requests)

    def settle(request: EvaluatorRequest, response: EvaluatorResponse):
        answers[request.id] = response
        if on_response is not None:
            on_response(request, response)

    while pending:
        proc = _spawn(command)
        lines: "queue.Queue" = queue.Queue()
        threading.Thread(target=_pump, args=(proc.stdout, lines), daemon=True).start()
        writer = threading.Thread(target=_feed, args=(proc.stdin, list(pending)), daemon=True)
        writer.start()

        outstanding = [r.id for r in pending]
        by_id = {r.id: r for r in pending}
        restart, answered_here = False, 0
        try:
            while outstanding:
                timeout = (max(timeout_floor, 10.0 * float(np.median(completed_times)))
                           if answered_here else initial_timeout)
                try:
                    line = lines.get(timeout=timeout)
                except queue.Empty:
                    victim = outstanding.pop(0)
                    settle(by_id[victim], _diverged(by_id[victim], metric_name))
                    if verbose:
                        print(f"⚠️  request {victim} timed out after {timeout:.1f}s, restarting worker")
                    restart = True
                    break
                if line is None:
                    if verbose:
                        print(f"⚠️  worker exited with {len(outstanding)} requests unanswered")
                    for rid in outstanding:
                        settle(by_id[rid], _diverged(by_id[rid], metric_name))
                    outstanding = []
                    break
                response = _parse(line, outstanding)
                outstanding.remove(response.id)
                completed_times.append(response.wall_time)
                answered_here += 1
                settle(by_id[response.id], response)
                if verbose:
                    print(f"   {response.id:>8}  {response.metric_name} {response.value:.4f}"
                          f"{'  (diverged)' if response.diverged else ''}")
        finally:
            _stop(proc, writer)
        pending = [r for r in pending if r.id not in answers] if restart else []

    return [answers[r.id] for r in requests]
