"""Throughput/latency bench harness over a grid of prompt/output shapes.

For each shape the largest batch fitting the memory budget is chosen
analytically from the cost model (per configuration: sharing shrinks the
per-stream cache, admitting larger batches). Each cell is the mean of
`repeats` timed runs; throughput counts prompted plus generated tokens over
total wall time. Functional outputs are deterministic; wall time is
hardware-dependent and reported as an informational metric.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, asdict

import numpy as np

from .costs import (CostShape, LayerKind, decode_flops_per_token, layer_kinds,
                    memory_report)
from .engine import generate
from .errors import ConfigError
from .model import Model


@dataclass
class BenchRow:
    l_in: int
    l_out: int
    config: str
    batch: int
    tokens_per_s: float
    latency_s: float
    decode_flops_per_token: int
    kv_bytes_per_stream: int

    def to_json(self) -> dict:
        return asdict(self)


def _stream_bytes(shape: CostShape, model: Model, ctx: int,
                  dtype_bytes: int) -> int:
    lisa = model.sharing.lisa_layers()
    if lisa:
        ranks = [model.sharing.lisa_config_of(i).r_k for i in lisa]
        rep = memory_report(shape, ctx, n_lisa=len(lisa), r=min(ranks),
                            dtype_bytes=dtype_bytes)
        return rep.kv_cache_bytes - rep.k_savings_bytes + rep.decode_score_bytes
    return memory_report(shape, ctx, dtype_bytes=dtype_bytes).kv_cache_bytes


def bench(model: Model, shapes: list[tuple[int, int]], memory_budget_bytes: int,
          repeats: int = 10, seed: int = 0,
          include_baseline: bool = True) -> list[BenchRow]:
    """Run the shape grid on the model and (optionally) its no-sharing twin."""
    cfg = model.config
    shape = CostShape.from_model_config("bench", cfg)
    dtype_bytes = model.weights.token_emb.data.itemsize
    rng = np.random.default_rng(seed)

    runs: list[tuple[str, Model, list[LayerKind]]] = []
    if include_baseline:
        try:
            teacher = model.teacher_view()
            runs.append(("baseline", teacher, layer_kinds(teacher)))
        except ConfigError:
            pass
    if model.sharing.shared_layers():
        runs.append(("shared", model, layer_kinds(model)))
    elif not runs:
        runs.append(("baseline", model, layer_kinds(model)))

    rows: list[BenchRow] = []
    for l_in, l_out in shapes:
        ctx = l_in + l_out
        if ctx > cfg.max_len:
            raise ConfigError(f"shape ({l_in},{l_out}) exceeds max_len {cfg.max_len}")
        prompt = rng.integers(0, min(cfg.vocab, 256), size=l_in)
        for name, run_model, kinds in runs:
            per_stream = _stream_bytes(shape, run_model, ctx, dtype_bytes)
            batch = max(1, int(memory_budget_bytes // per_stream))
            times = []
            for _ in range(repeats):
                t0 = time.perf_counter()
                for _ in range(batch):
                    generate(run_model, prompt, l_out,
                             nf=run_model.sharing.nf)
                times.append(time.perf_counter() - t0)
            mean_t = float(np.mean(times))
            rows.append(BenchRow(
                l_in=l_in, l_out=l_out, config=name, batch=batch,
                tokens_per_s=batch * ctx / mean_t if mean_t > 0 else float("inf"),
                latency_s=mean_t,
                decode_flops_per_token=decode_flops_per_token(shape, ctx, kinds),
                kv_bytes_per_stream=per_stream,
            ))
    return rows
