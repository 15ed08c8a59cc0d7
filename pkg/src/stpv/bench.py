"""Computational-performance reporting: exact parameter counts, an analytic
memory estimate, and wall time per 100 training iterations.

Memory is params + two Adam moments per trainable param + the tape's peak
activation bytes. This is deliberate: an analytic figure is portable and
deterministic where resident-set probes are not, so reports are comparable
across machines (documented in the bench.csv header).
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .optim import Adam
from .tensor import GradientTape, Tensor, backward


@dataclass
class BenchReport:
    name: str
    trainable_params: int
    frozen_params: int
    memory_bytes: int
    ms_per_100_iters_mean: float
    ms_per_100_iters_std: float
    trials: int

    @property
    def params_split(self) -> str:
        """Millions, reported as 'trainable + frozen' (e.g. '6.60 + 2.17')."""
        return f"{self.trainable_params / 1e6:.2f} + {self.frozen_params / 1e6:.2f}"


def count_params(*models) -> tuple[int, int]:
    """Exact element counts over named parameters, split trainable/frozen."""
    trainable = 0
    frozen = 0
    for model in models:
        for p in model.named_parameters().values():
            if p.requires_grad:
                trainable += p.size
            else:
                frozen += p.size
    return trainable, frozen


def estimate_memory_bytes(*models, activation_bytes: int = 0) -> int:
    """Params + 2 optimizer moments per trainable param + peak activations."""
    total = 0
    for model in models:
        for p in model.named_parameters().values():
            weight = 3 if p.requires_grad else 1
            total += weight * p.data.nbytes
    return total + activation_bytes


def run_train_step(loss_builder, opt: Adam) -> tuple[int, int]:
    """One forward+backward+update; returns (activation, param buffer) bytes."""
    opt.zero_grad()
    with GradientTape() as tape:
        loss = loss_builder()
        backward(tape, loss)
    opt.step()
    return tape.activation_bytes, tape.param_buffer_bytes


def bench_step_time(name: str, loss_builder, opt: Adam, *models, trials: int = 5,
                    iters: int = 5, warmup: int = 10) -> BenchReport:
    """Time full train steps; first `warmup` iterations are excluded."""
    if trials < 5:
        raise ValueError("bench needs at least 5 trials")
    activation = buffers = 0
    for _ in range(warmup):
        activation, buffers = run_train_step(loss_builder, opt)
    per_100 = []
    for _ in range(trials):
        t0 = time.perf_counter()
        for _ in range(iters):
            run_train_step(loss_builder, opt)
        elapsed = time.perf_counter() - t0
        per_100.append(elapsed / iters * 100.0 * 1e3)
    trainable, frozen = count_params(*models)
    return BenchReport(
        name=name,
        trainable_params=trainable,
        frozen_params=frozen,
        memory_bytes=estimate_memory_bytes(*models, activation_bytes=activation + buffers),
        ms_per_100_iters_mean=float(np.mean(per_100)),
        ms_per_100_iters_std=float(np.std(per_100)),
        trials=trials,
    )


BENCH_HEADER = ("# memory_bytes is analytic: params + 2 Adam moments per trainable "
                "param + peak tape activations (no platform probing)\n"
                "name,trainable_params,frozen_params,params_split_m,memory_bytes,"
                "ms_per_100_iters_mean,ms_per_100_iters_std,trials\n")


def write_bench_csv(path, reports: list[BenchReport]) -> None:
    lines = [BENCH_HEADER]
    for r in reports:
        lines.append(f"{r.name},{r.trainable_params},{r.frozen_params},"
                     f"{r.params_split},{r.memory_bytes},"
                     f"{r.ms_per_100_iters_mean!r},{r.ms_per_100_iters_std!r},{r.trials}\n")
    with open(path, "w") as fh:
        fh.writelines(lines)
