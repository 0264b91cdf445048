"""LLaMA-style decoder-only transformer with pluggable per-layer attention.

The block is pre-norm RMSNorm -> attention -> residual, RMSNorm -> gated
SiLU FFN -> residual, with rotary positions and an untied LM head. The
attention score matrix of each layer is produced by the variant configured
for that layer (standard / ds / avg / lisa); the softmax(P) @ V @ Wo tail is
shared by all variants. Pre-softmax scores are kept with masked entries at
exact 0 so they can be chained into sharing layers and stored in traces.

A forward pass can capture a full per-layer AttentionTrace; tracing copies
values and never perturbs the computation.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .config import ModelConfig, SharingConfig
from .errors import CapacityError, ConfigError, InputError
from .rope import apply_rope, rope_tables
from .sharing import (LisaParams, ds_scores, lisa_scores, mask_fill_zero,
                      project_low_rank, uniform_attention)
from .tensor import (Tensor, matmul, repeat, reshape, row_softmax_masked,
                     rsqrt, silu, take_rows, tensor_mean, transpose)

RMS_EPS = 1e-6


@dataclass
class LayerWeights:
    """One decoder layer. wq/wk are None for layers trained from scratch
    with a sharing variant (they never compute their own scores)."""

    wq: Tensor | None
    wk: Tensor | None
    wv: Tensor
    wo: Tensor
    attn_norm: Tensor
    gate: Tensor
    up: Tensor
    down: Tensor
    ffn_norm: Tensor


@dataclass
class ModelWeights:
    token_emb: Tensor
    layers: list[LayerWeights]
    final_norm: Tensor
    lm_head: Tensor

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        """Stable (name, tensor) listing; absent wq/wk are skipped."""
        out = [("token_emb", self.token_emb)]
        for i, lw in enumerate(self.layers):
            for name in ("wq", "wk", "wv", "wo", "attn_norm",
                         "gate", "up", "down", "ffn_norm"):
                t = getattr(lw, name)
                if t is not None:
                    out.append((f"layers.{i}.{name}", t))
        out.append(("final_norm", self.final_norm))
        out.append(("lm_head", self.lm_head))
        return out

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for name, t in self.named_tensors():
            digest.update(name.encode())
            digest.update(np.ascontiguousarray(t.data).tobytes())
        return digest.hexdigest()

    def set_requires_grad(self, flag: bool) -> None:
        for _, t in self.named_tensors():
            t.requires_grad = flag


def init_weights(config: ModelConfig, seed: int = 0,
                 sharing: SharingConfig | None = None,
                 dtype=np.float64) -> ModelWeights:
    """Fresh weights: N(0, 0.02) matrices, unit norm gains.

    Layers that a sharing config marks non-standard get no wq/wk: trained
    from scratch they would never be used.
    """
    rng = np.random.default_rng(seed)

    def mat(*shape):
        return Tensor(rng.normal(0.0, 0.02, size=shape).astype(dtype))

    layers = []
    for i in range(config.n_layers):
        shared = sharing is not None and sharing.mode_of(i) != "standard"
        wq = None if shared else mat(config.d, config.h * config.d_k)
        wk = None if shared else mat(config.d, config.h_kv * config.d_k)
        layers.append(LayerWeights(
            wq=wq, wk=wk,
            wv=mat(config.d, config.h_kv * config.d_k),
            wo=mat(config.h * config.d_k, config.d),
            attn_norm=Tensor(np.ones(config.d, dtype=dtype)),
            gate=mat(config.d, config.d_ff),
            up=mat(config.d, config.d_ff),
            down=mat(config.d_ff, config.d),
            ffn_norm=Tensor(np.ones(config.d, dtype=dtype)),
        ))
    return ModelWeights(
        token_emb=mat(config.vocab, config.d),
        layers=layers,
        final_norm=Tensor(np.ones(config.d, dtype=dtype)),
        lm_head=mat(config.d, config.vocab),
    )


@dataclass
class Model:
    """Weights plus the sharing configuration and any lisa parameters."""

    config: ModelConfig
    weights: ModelWeights
    sharing: SharingConfig = field(default_factory=SharingConfig)
    lisa_params: dict[int, LisaParams] = field(default_factory=dict)

    def __post_init__(self):
        self.sharing.validate_for(self.config)
        for i in self.sharing.lisa_layers():
            if i not in self.lisa_params:
                raise ConfigError(f"layer {i} is lisa but has no parameters")

    def teacher_view(self) -> "Model":
        """The same weights with original attention everywhere."""
        for i, lw in enumerate(self.weights.layers):
            if lw.wq is None or lw.wk is None:
                raise ConfigError(
                    f"layer {i} has no original projections; cannot run standard")
        return Model(self.config, self.weights, SharingConfig.all_standard(), {})


@dataclass
class LayerTrace:
    """Captured internals of one layer. a/p are [h, l, l] with masked
    entries recorded as 0; q/k are the rotated projected states (low-rank
    ones for lisa layers, None for ds/avg)."""

    a: np.ndarray
    p: np.ndarray
    q: np.ndarray | None
    k: np.ndarray | None
    v: np.ndarray
    pv: np.ndarray
    attn_out: np.ndarray


@dataclass
class AttentionTrace:
    layers: list[LayerTrace]

    def __len__(self) -> int:
        return len(self.layers)


@dataclass
class ForwardResult:
    logits: Tensor
    trace: AttentionTrace | None = None
    scores: dict[int, tuple[Tensor, Tensor]] | None = None


def causal_mask(l: int) -> np.ndarray:
    return np.tril(np.ones((l, l), dtype=bool))


def rmsnorm(x: Tensor, gain: Tensor, eps: float = RMS_EPS) -> Tensor:
    ms = tensor_mean(x * x, axis=-1, keepdims=True)
    return x * rsqrt(ms + eps) * gain


def gated_ffn(x: Tensor, lw: LayerWeights) -> Tensor:
    return matmul(silu(matmul(x, lw.gate)) * matmul(x, lw.up), lw.down)


def _heads(x: Tensor, l: int, heads: int, dim: int) -> Tensor:
    return transpose(reshape(x, (l, heads, dim)), (1, 0, 2))


def _rope_cache(tables: dict, positions: np.ndarray, dim: int, base: float):
    if dim not in tables:
        tables[dim] = rope_tables(positions, dim, base)
    return tables[dim]


def attention_forward(h_norm: Tensor, lw: LayerWeights, layer: int, variant: str,
                      model: Model, mask: np.ndarray, rope_tabs: dict,
                      a_prev: Tensor | None, kv_sink: list | None = None,
                      nf: bool = False):
    """One attention sub-layer under the given variant.

    Returns (out [l, d], a [h, l, l] | None, p [h, l, l], internals dict).
    `a` is the final pre-softmax score matrix with masked entries at 0; avg
    produces its weights directly and yields a = None.
    """
    cfg = model.config
    l = h_norm.shape[0]
    groups = cfg.groups
    sink_entry: dict | None = {"mode": variant} if kv_sink is not None else None

    run_variant = "standard" if nf else variant
    q = k = None
    if run_variant == "standard":
        if lw.wq is None or lw.wk is None:
            raise ConfigError(f"layer {layer} has no wq/wk for standard attention")
        cos, sin = _rope_cache(rope_tabs, np.arange(l), cfg.d_k, cfg.rope_base)
        q = apply_rope(_heads(matmul(h_norm, lw.wq), l, cfg.h, cfg.d_k), cos, sin)
        k = apply_rope(_heads(matmul(h_norm, lw.wk), l, cfg.h_kv, cfg.d_k), cos, sin)
        k_full = repeat(k, groups, axis=0) if groups > 1 else k
        a = mask_fill_zero(
            matmul(q, transpose(k_full, (0, 2, 1))) * (1.0 / np.sqrt(cfg.d_k)), mask)
        p = row_softmax_masked(a, mask)
        if sink_entry is not None:
            sink_entry["k"] = k.data
    elif run_variant == "ds":
        a = ds_scores(a_prev)
        p = row_softmax_masked(a, mask)
    elif run_variant == "avg":
        a = None
        p = Tensor(uniform_attention(l, dtype=h_norm.dtype))
    elif run_variant == "lisa":
        lcfg = model.sharing.lisa_config_of(layer)
        params = model.lisa_params.get(layer)
        if lcfg is None or params is None:
            raise ConfigError(f"layer {layer} lacks a lisa config/parameters")
        cos_r, sin_r = _rope_cache(rope_tabs, np.arange(l), lcfg.r_q, cfg.rope_base)
        a = lisa_scores(h_norm, a_prev, params, lcfg, cfg, cos_r, sin_r, mask)
        p = row_softmax_masked(a, mask)
        q = k = None
    else:
        raise ConfigError(f"unknown attention variant {run_variant!r}")

    v = _heads(matmul(h_norm, lw.wv), l, cfg.h_kv, cfg.d_k)
    v_full = repeat(v, groups, axis=0) if groups > 1 else v
    pv = matmul(p, v_full)                                     # [h, l, d_k]
    merged = reshape(transpose(pv, (1, 0, 2)), (l, cfg.h * cfg.d_k))
    out = matmul(merged, lw.wo)

    if sink_entry is not None:
        if variant == "lisa":
            # lisa layers cache the compressed keys, whether or not this
            # pass ran the original attention (NF prefill).
            lcfg = model.sharing.lisa_config_of(layer)
            params = model.lisa_params.get(layer)
            if lcfg is None or params is None:
                raise ConfigError(f"layer {layer} lacks a lisa config/parameters")
            cos_r, sin_r = _rope_cache(rope_tabs, np.arange(l), lcfg.r_k, cfg.rope_base)
            sink_entry["k_lr"] = project_low_rank(
                h_norm, params.w_lr_k, cfg.h_kv, lcfg.r_k, cos_r, sin_r).data
        sink_entry["v"] = v.data
        kv_sink.append(sink_entry)

    internals = {"q": q, "k": k, "v": v, "pv": pv, "out": out}
    return out, a, p, internals


def model_forward(tokens: np.ndarray, model: Model, *, trace: bool = False,
                  capture_scores=None, overrides: dict[int, str] | None = None,
                  kv_sink: list | None = None, nf: bool = False) -> ForwardResult:
    """Run the model over a token sequence.

    overrides forces single layers onto another variant (used by the
    deviation sweep); capture_scores is an iterable of layer indices whose
    graph-connected (A, P) tensors are returned for loss construction.
    """
    tokens = np.asarray(tokens)
    if tokens.ndim != 1:
        raise InputError(f"tokens must be a 1-d sequence, got shape {tokens.shape}")
    l = tokens.shape[0]
    cfg = model.config
    if l < 1:
        raise InputError("empty token sequence")
    if l > cfg.max_len:
        raise CapacityError(f"sequence length {l} exceeds max_len {cfg.max_len}")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab:
        raise InputError("token id out of range")

    overrides = overrides or {}
    capture = set(capture_scores) if capture_scores is not None else None
    mask = causal_mask(l)
    rope_tabs: dict = {}
    traces: list[LayerTrace] = [] if trace else None
    scores: dict[int, tuple[Tensor, Tensor]] = {} if capture is not None else None

    x = take_rows(model.weights.token_emb, tokens)
    a_prev: Tensor | None = None
    for i, lw in enumerate(model.weights.layers):
        variant = overrides.get(i, model.sharing.mode_of(i))
        h_norm = rmsnorm(x, lw.attn_norm)
        out, a, p, internals = attention_forward(
            h_norm, lw, i, variant, model, mask, rope_tabs, a_prev,
            kv_sink=kv_sink, nf=nf)
        x = x + out
        h_ffn = rmsnorm(x, lw.ffn_norm)
        x = x + gated_ffn(h_ffn, lw)

        if traces is not None:
            h = cfg.h
            p_data = p.data if p.data.ndim == 3 else np.broadcast_to(
                p.data, (h,) + p.data.shape).copy()
            a_data = a.data.copy() if a is not None else np.zeros_like(p_data)
            traces.append(LayerTrace(
                a=a_data, p=p_data.copy(),
                q=None if internals["q"] is None else internals["q"].data.copy(),
                k=None if internals["k"] is None else internals["k"].data.copy(),
                v=internals["v"].data.copy(),
                pv=internals["pv"].data.copy(),
                attn_out=internals["out"].data.copy(),
            ))
        if scores is not None and i in capture:
            scores[i] = (a, p)
        a_prev = a

    logits = matmul(rmsnorm(x, model.weights.final_norm), model.weights.lm_head)
    return ForwardResult(
        logits=logits,
        trace=AttentionTrace(traces) if traces is not None else None,
        scores=scores,
    )
