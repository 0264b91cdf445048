"""Cross-layer redundancy analyses over captured attention traces.

Attention weights are per-query distributions over the causal prefix, so
similarity is measured row-wise: each query row is compared over its
unmasked prefix and scores are averaged over rows (prefix-length-1 rows are
skipped; their distribution is forced) and over samples. Divergences are
Jensen-Shannon, natural log by default; base 2 is available behind the
`base` argument.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InputError
from .model import AttentionTrace, Model
from .training import eval_perplexity

SUBMODULES = ("q", "k", "v", "a", "p", "pv", "attn_out")


def js_divergence(p, q, base: float = np.e) -> float:
    """Jensen-Shannon divergence of two non-negative vectors.

    Inputs are normalized to sum 1 (truncated traces drift slightly);
    0*log(0) contributes 0. Symmetric, bounded by log_base(2).
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise InputError(f"distributions must be same-length vectors, "
                         f"got {p.shape} and {q.shape}")
    if (p < 0).any() or (q < 0).any():
        raise InputError("distributions must be non-negative")
    ps, qs = p.sum(), q.sum()
    if ps <= 0 or qs <= 0:
        raise InputError("distributions must have positive mass")
    p = p / ps
    q = q / qs
    m = 0.5 * (p + q)

    def half_kl(a):
        nz = a > 0
        return float((a[nz] * np.log(a[nz] / m[nz])).sum())

    value = 0.5 * half_kl(p) + 0.5 * half_kl(q)
    if base != np.e:
        value /= np.log(base)
    return max(value, 0.0)


def _rowwise_js(pa: np.ndarray, pb: np.ndarray, base: float) -> float:
    """Mean JS over query rows of two [l, l] attention matrices, each row
    restricted to its causal prefix; row 0 (forced distribution) skipped."""
    l = pa.shape[-1]
    if l < 2:
        raise InputError("need at least 2 positions for a row-wise comparison")
    vals = [js_divergence(pa[t, :t + 1], pb[t, :t + 1], base)
            for t in range(1, l)]
    return float(np.mean(vals))


def pairwise_layer_js(traces: list[AttentionTrace], base: float = np.e) -> np.ndarray:
    """Layer-pair matrix of mean JS between head-averaged attention weights.

    `traces` holds one AttentionTrace per input sample, captured on
    identical inputs per sample; entry (a, b) averages over samples and
    query rows. Symmetric with a zero diagonal.
    """
    if not traces:
        raise InputError("no traces given")
    n_layers = len(traces[0])
    for tr in traces:
        if len(tr) != n_layers:
            raise InputError("traces disagree on layer count")
    matrix = np.zeros((n_layers, n_layers))
    for a in range(n_layers):
        for b in range(a + 1, n_layers):
            acc = [
                _rowwise_js(tr.layers[a].p.mean(axis=0),
                            tr.layers[b].p.mean(axis=0), base)
                for tr in traces
            ]
            matrix[a, b] = matrix[b, a] = float(np.mean(acc))
    return matrix


def head_js_matrix(p_a, p_b, base: float = np.e) -> np.ndarray:
    """[h, h] matrix of mean row JS between heads of two layers.

    p_a/p_b are [h, l, l] post-softmax weights, or lists of them (samples);
    entry (j, i) compares head j of the first layer with head i of the
    second.
    """
    if isinstance(p_a, np.ndarray):
        p_a, p_b = [p_a], [p_b]
    h = p_a[0].shape[0]
    if any(x.shape[0] != h for x in list(p_a) + list(p_b)):
        raise InputError("head counts differ")
    out = np.zeros((h, h))
    for j in range(h):
        for i in range(h):
            out[j, i] = float(np.mean([
                _rowwise_js(sa[j], sb[i], base) for sa, sb in zip(p_a, p_b)
            ]))
    return out


def head_matched_js(p_a, p_b, strategy: str, seed: int = 0,
                    base: float = np.e) -> float:
    """Mean JS over matched head pairs under one of three strategies.

    direct matches head i to head i; random uses a seeded permutation
    (a bijection); most_similar pairs every head of the second layer with
    its argmin-JS head of the first (many-to-one allowed - the oracle
    lower bound).
    """
    m = head_js_matrix(p_a, p_b, base)
    h = m.shape[0]
    if strategy == "direct":
        return float(np.mean(np.diag(m)))
    if strategy == "random":
        perm = np.random.default_rng(seed).permutation(h)
        return float(np.mean(m[perm, np.arange(h)]))
    if strategy == "most_similar":
        return float(np.mean(m.min(axis=0)))
    raise InputError(f"unknown matching strategy {strategy!r}")


@dataclass
class SubmoduleCosineReport:
    values: dict[str, np.ndarray]   # sub-module -> [n_layers-1] adjacent-pair means
    skipped: dict[str, int]         # zero-norm token vectors skipped
    samples: int


def _token_vectors(layer, name: str, l: int):
    """Per-token flattened vectors of one sub-module; masked score entries
    are excluded from the flattening."""
    arr = getattr(layer, name)
    if arr is None:
        raise InputError(f"trace lacks sub-module {name!r}; capture it on a "
                         "standard-attention pass")
    if name in ("a", "p"):
        return [arr[:, t, :t + 1].ravel() for t in range(l)]
    if arr.ndim == 3:  # [heads, l, dim]
        return [arr[:, t, :].ravel() for t in range(l)]
    return [arr[t] for t in range(l)]


def submodule_cosine(traces: list[AttentionTrace],
                     submodules=SUBMODULES) -> SubmoduleCosineReport:
    """Cosine similarity of each sub-module between adjacent layers,
    averaged over tokens and samples."""
    if not traces:
        raise InputError("no traces given")
    n_layers = len(traces[0])
    values = {s: np.zeros(n_layers - 1) for s in submodules}
    skipped = {s: 0 for s in submodules}
    for name in submodules:
        for pair in range(n_layers - 1):
            sims = []
            for tr in traces:
                l = tr.layers[pair].p.shape[-1]
                va = _token_vectors(tr.layers[pair], name, l)
                vb = _token_vectors(tr.layers[pair + 1], name, l)
                for a, b in zip(va, vb):
                    na, nb = np.linalg.norm(a), np.linalg.norm(b)
                    if na == 0 or nb == 0:
                        skipped[name] += 1
                        continue
                    sims.append(float(a @ b / (na * nb)))
            values[name][pair] = float(np.mean(sims)) if sims else np.nan
    return SubmoduleCosineReport(values=values, skipped=skipped,
                                 samples=len(traces))


@dataclass
class DeviationResult:
    pattern: str
    metric: dict[int, float]  # target layer -> held-out perplexity
    baseline: float


def deviation_sweep(model: Model, corpus, pattern: str,
                    max_windows: int | None = None) -> DeviationResult:
    """Perplexity impact of replacing a single layer's attention.

    For each target layer n >= 1 the model is evaluated with only layer n
    forced onto `pattern` ("ds": reuse layer n-1's scores; "avg": uniform
    weights); all other layers are untouched. Layer 0 is never targeted.
    """
    if pattern not in ("ds", "avg"):
        raise InputError(f"unknown deviation pattern {pattern!r}")
    if model.config.n_layers < 2:
        raise InputError("deviation sweep needs at least 2 layers")
    baseline = eval_perplexity(model, corpus, max_windows=max_windows)
    metric = {}
    for layer in range(1, model.config.n_layers):
        metric[layer] = eval_perplexity(model, corpus, max_windows=max_windows,
                                        overrides={layer: pattern})
    return DeviationResult(pattern=pattern, metric=metric, baseline=baseline)


@dataclass
class SimilarityReport:
    layer_pair_js: np.ndarray
    head_matching: dict[str, np.ndarray]  # strategy -> [n_layers-1] adjacent pairs
    submodule_cosine: SubmoduleCosineReport
    samples: int
    log_base: float
    seed: int = 0
    skipped_rows: int = 0


def run_analysis(model: Model, sample_windows, strategies=("direct", "random",
                 "most_similar"), seed: int = 0,
                 base: float = np.e) -> SimilarityReport:
    """Full redundancy analysis: traces every sample once, then computes the
    layer-pair JS matrix, adjacent-pair head matching under each strategy,
    and sub-module cosine curves."""
    from .model import model_forward

    traces = [model_forward(np.asarray(w), model, trace=True).trace
              for w in sample_windows]
    matrix = pairwise_layer_js(traces, base)
    n_layers = len(traces[0])
    matching = {}
    for strategy in strategies:
        vals = np.zeros(n_layers - 1)
        for pair in range(n_layers - 1):
            p_a = [tr.layers[pair].p for tr in traces]
            p_b = [tr.layers[pair + 1].p for tr in traces]
            vals[pair] = head_matched_js(p_a, p_b, strategy, seed=seed, base=base)
        matching[strategy] = vals
    cosine = submodule_cosine(traces)
    return SimilarityReport(layer_pair_js=matrix, head_matching=matching,
                            submodule_cosine=cosine, samples=len(traces),
                            log_base=base, seed=seed)
