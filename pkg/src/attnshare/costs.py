"""Analytic memory and FLOP accounting for prefill/decode inference.

Conventions (chosen to reproduce published large-model cost tables):
  * 2 FLOPs per multiply-add.
  * Attention cost = the four projections plus the two length-squared
    products (scores and weighted values). Decode reports the last step:
    projections for one token, score/value products over the full context
    l_in + l_out.
  * KV cache bytes counted at the full final context length, 2 bytes per
    element by default, GiB = 2**30 bytes.

Sharing changes per-layer terms: ds/avg layers drop the Q/K projections
and the score product entirely; lisa layers shrink them to rank r and add
the alignment-map cost.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

from .config import MODEL_PRESETS, ModelConfig
from .errors import ConfigError

GIB = 2 ** 30


@dataclass(frozen=True)
class CostShape:
    """Architecture shape as the cost model sees it. ffn_matrices selects
    the FFN accounting: "gated3" (three d x d_ff matrices) or "relu2"
    (two d x d_ff matrices, d_ff typically 4d)."""

    name: str
    n_layers: int
    d: int
    h: int
    h_kv: int
    d_k: int
    d_ff: int
    ffn_matrices: str = "gated3"

    def __post_init__(self):
        if self.ffn_matrices not in ("gated3", "relu2"):
            raise ConfigError(f"unknown ffn accounting {self.ffn_matrices!r}")

    @property
    def ffn_width_sum(self) -> int:
        return (3 if self.ffn_matrices == "gated3" else 2) * self.d_ff

    @classmethod
    def from_model_config(cls, name: str, cfg: ModelConfig) -> "CostShape":
        return cls(name=name, n_layers=cfg.n_layers, d=cfg.d, h=cfg.h,
                   h_kv=cfg.h_kv, d_k=cfg.d_k, d_ff=cfg.d_ff)


COST_PRESETS: dict[str, CostShape] = {
    "opt-175b": CostShape("opt-175b", 96, 12288, 96, 96, 128, 4 * 12288, "relu2"),
    "llama-65b": CostShape("llama-65b", 80, 8192, 64, 64, 128, 22016),
    "llama3-70b": CostShape("llama3-70b", 80, 8192, 64, 8, 128, 28672),
    "llama2-7b": CostShape("llama2-7b", 32, 4096, 32, 32, 128, 11008),
    "llama3-8b": CostShape("llama3-8b", 32, 4096, 32, 8, 128, 14336),
}
for _name, _cfg in MODEL_PRESETS.items():
    COST_PRESETS[_name] = CostShape.from_model_config(_name, _cfg)


# ---------------------------------------------------------------------------
# memory
# ---------------------------------------------------------------------------

@dataclass
class MemoryReport:
    kv_cache_bytes: int
    k_savings_bytes: int
    prefill_score_bytes: int
    decode_score_bytes: int
    prefill_net_savings_bytes: int
    decode_net_savings_bytes: int
    break_even_length: float
    dtype_bytes: int
    l: int
    batch: int
    n_lisa: int
    rank: int | None

    @property
    def kv_cache_gib(self) -> float:
        return self.kv_cache_bytes / GIB

    def to_json(self) -> dict:
        out = asdict(self)
        out["kv_cache_gib"] = self.kv_cache_gib
        return out


def break_even_length(n_lisa: int, d_k: int, r: int, h: int, h_kv: int) -> float:
    """Sequence length where the stored score matrix cancels the key-cache
    savings of n_lisa sharing layers; n_lisa*(d_k-r) when h == h_kv."""
    return n_lisa * (d_k - r) * h_kv / h


def memory_report(shape: CostShape, l: int, batch: int = 1, n_lisa: int = 0,
                  r: int | None = None, dtype_bytes: int = 2) -> MemoryReport:
    """Decode-time memory accounting at context length l.

    kv_cache_bytes is the baseline full cache (K and V for every layer).
    With n_lisa sharing layers at uniform rank r, the K cache shrinks by
    h_kv*l*(d_k-r) per layer while one score matrix (prefill) or score row
    (per decode step) of h query heads is kept for the sharing chain.
    """
    if n_lisa and r is None:
        raise ConfigError("n_lisa layers need a rank r")
    if r is not None and not 1 <= r <= shape.d_k:
        raise ConfigError(f"rank {r} outside 1..{shape.d_k}")
    if n_lisa > shape.n_layers:
        raise ConfigError("more sharing layers than layers")
    kv = 2 * shape.n_layers * shape.h_kv * shape.d_k * l * batch * dtype_bytes
    if n_lisa:
        ksave = n_lisa * shape.h_kv * l * (shape.d_k - r) * dtype_bytes * batch
        be = break_even_length(n_lisa, shape.d_k, r, shape.h, shape.h_kv)
    else:
        ksave = 0
        be = 0.0
    prefill_score = shape.h * l * l * dtype_bytes * batch
    decode_score = shape.h * l * dtype_bytes * batch
    return MemoryReport(
        kv_cache_bytes=kv,
        k_savings_bytes=ksave,
        prefill_score_bytes=prefill_score,
        decode_score_bytes=decode_score,
        prefill_net_savings_bytes=ksave - (prefill_score if n_lisa else 0),
        decode_net_savings_bytes=ksave - (decode_score if n_lisa else 0),
        break_even_length=be,
        dtype_bytes=dtype_bytes, l=l, batch=batch, n_lisa=n_lisa, rank=r,
    )


# ---------------------------------------------------------------------------
# FLOPs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LayerKind:
    """Per-layer descriptor for variant-aware FLOP accounting."""

    mode: str = "standard"          # standard | ds | avg | lisa
    r_q: int = 0
    r_k: int = 0
    variant: str = "dl"             # alignment structure for lisa layers
    m: int = 0                      # dl hidden width


def layer_kinds(model) -> list[LayerKind]:
    """Descriptors for an actual Model's sharing configuration."""
    kinds = []
    for i in range(model.config.n_layers):
        mode = model.sharing.mode_of(i)
        if mode == "lisa":
            lc = model.sharing.lisa_config_of(i)
            kinds.append(LayerKind("lisa", lc.r_q, lc.r_k, lc.variant,
                                   lc.ffn_hidden))
        else:
            kinds.append(LayerKind(mode))
    return kinds


def _attn_layer_flops(shape: CostShape, kind: LayerKind, l_proj: int,
                      l_score: int) -> int:
    """One layer's attention FLOPs with projections over l_proj positions
    and score/value products over an l_proj x l_score extent."""
    h, h_kv, d_k, d = shape.h, shape.h_kv, shape.d_k, shape.d
    v_dim, o_dim = h_kv * d_k, h * d_k
    pv = 2 * l_proj * l_score * h * d_k
    if kind.mode == "standard":
        q_dim, k_dim = h * d_k, h_kv * d_k
        score = 2 * l_proj * l_score * h * d_k
        align = 0
    elif kind.mode in ("ds", "avg"):
        q_dim = k_dim = 0
        score = 0
        align = 0
    elif kind.mode == "lisa":
        q_dim, k_dim = h * kind.r_q, h_kv * kind.r_k
        score = 2 * l_proj * l_score * h * kind.r_q
        per_pos = {"dl": 2 * (2 * h * kind.m + kind.m * h),
                   "sl": 2 * (2 * h * h),
                   "plus": h}[kind.variant]
        align = l_proj * l_score * per_pos
    else:
        raise ConfigError(f"unknown layer mode {kind.mode!r}")
    proj = 2 * l_proj * d * (q_dim + k_dim + v_dim + o_dim)
    return proj + score + pv + align


@dataclass
class FlopsReport:
    prefill_attn_flops: int
    prefill_ffn_flops: int
    decode_attn_flops: int
    decode_ffn_flops: int
    decode_attn_per_token: int
    decode_ffn_per_token: int
    l_in: int
    l_out: int
    batch: int

    def to_json(self) -> dict:
        return asdict(self)


def flops_report(shape: CostShape, l_in: int, l_out: int, batch: int = 1,
                 kinds: list[LayerKind] | None = None) -> FlopsReport:
    """Prefill plus decode-last-step FLOPs.

    The decode stage reports the final step: one token's projections with
    score/value products over the whole l_in + l_out context.
    """
    if kinds is None:
        kinds = [LayerKind()] * shape.n_layers
    if len(kinds) != shape.n_layers:
        raise ConfigError("per-layer kinds must cover every layer")
    ctx = l_in + l_out
    pre_attn = sum(_attn_layer_flops(shape, k, l_in, l_in) for k in kinds)
    dec_attn = sum(_attn_layer_flops(shape, k, 1, ctx) for k in kinds)
    pre_ffn = 2 * l_in * shape.d * shape.ffn_width_sum * shape.n_layers
    dec_ffn = 2 * 1 * shape.d * shape.ffn_width_sum * shape.n_layers
    return FlopsReport(
        prefill_attn_flops=pre_attn * batch,
        prefill_ffn_flops=pre_ffn * batch,
        decode_attn_flops=dec_attn * batch,
        decode_ffn_flops=dec_ffn * batch,
        decode_attn_per_token=dec_attn,
        decode_ffn_per_token=dec_ffn,
        l_in=l_in, l_out=l_out, batch=batch,
    )


def decode_flops_per_token(shape: CostShape, ctx: int,
                           kinds: list[LayerKind] | None = None) -> int:
    """FLOPs of one next-token step at context length ctx (batch 1)."""
    if kinds is None:
        kinds = [LayerKind()] * shape.n_layers
    attn = sum(_attn_layer_flops(shape, k, 1, ctx) for k in kinds)
    ffn = 2 * shape.d * shape.ffn_width_sum * shape.n_layers
    return attn + ffn
