"""KV-cached prefill/decode generation for every attention variant.

Prefill runs the full forward pass (optionally in NF mode: original
attention everywhere while the compressed keys of lisa layers are computed
and cached). Decode extends the caches one position at a time; standard
layers store rotated K, lisa layers store only the rank-r K_LR, ds/avg
layers store no keys at all. During a decode step each layer leaves its
current score row behind for the next layer's sharing chain.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CapacityError, ConfigError, InputError
from .model import RMS_EPS, Model, model_forward
from .rope import rope_tables


@dataclass
class LayerCacheEntry:
    mode: str
    k: np.ndarray | None      # [h_kv, max_len, d_k] (standard only)
    k_lr: np.ndarray | None   # [h_kv, max_len, r_k] (lisa only)
    v: np.ndarray             # [h_kv, max_len, d_k]


class KVCache:
    """Per-layer decode-time storage plus the transient score-row chain."""

    def __init__(self, model: Model):
        cfg = model.config
        dtype = model.weights.token_emb.dtype
        self.layers: list[LayerCacheEntry] = []
        self.length = 0
        for i in range(cfg.n_layers):
            mode = model.sharing.mode_of(i)
            k = k_lr = None
            if mode == "standard":
                k = np.zeros((cfg.h_kv, cfg.max_len, cfg.d_k), dtype=dtype)
            elif mode == "lisa":
                r_k = model.sharing.lisa_config_of(i).r_k
                k_lr = np.zeros((cfg.h_kv, cfg.max_len, r_k), dtype=dtype)
            v = np.zeros((cfg.h_kv, cfg.max_len, cfg.d_k), dtype=dtype)
            self.layers.append(LayerCacheEntry(mode, k, k_lr, v))


def _check_nf_possible(model: Model) -> None:
    for i in range(model.config.n_layers):
        mode = model.sharing.mode_of(i)
        lw = model.weights.layers[i]
        if mode != "standard" and (lw.wq is None or lw.wk is None):
            raise ConfigError(
                f"NF prefill needs original projections at layer {i}")
        if mode == "lisa" and not model.sharing.lisa_config_of(i).nf_keep_original:
            raise ConfigError(
                f"layer {i} is configured without retained projections (NF off)")


def prefill(model: Model, tokens, nf: bool = False):
    """Full forward over the prompt, filling the caches.

    Returns (cache, logits[l, vocab]). With nf=True every layer runs the
    original standard attention for this pass (hidden states match the
    no-sharing model's bit for bit) while lisa layers' K_LR caches are
    still populated for the decode steps that follow.
    """
    tokens = np.asarray(tokens)
    if nf:
        _check_nf_possible(model)
    sink: list = []
    res = model_forward(tokens, model, kv_sink=sink, nf=nf)
    cache = KVCache(model)
    l = len(tokens)
    for entry, lc in zip(sink, cache.layers):
        if lc.mode == "standard":
            lc.k[:, :l] = entry["k"]
        elif lc.mode == "lisa":
            lc.k_lr[:, :l] = entry["k_lr"]
        lc.v[:, :l] = entry["v"]
    cache.length = l
    return cache, res.logits.data


def _rms(x: np.ndarray, gain: np.ndarray) -> np.ndarray:
    return x / np.sqrt((x * x).mean(-1, keepdims=True) + RMS_EPS) * gain


def _rope_row(x: np.ndarray, position: int, base: float) -> np.ndarray:
    """Rotate one position's per-head vectors [heads, dim]."""
    cos, sin = rope_tables(np.array([position]), x.shape[-1], base)
    out = np.empty_like(x)
    out[..., 0::2] = x[..., 0::2] * cos[0] - x[..., 1::2] * sin[0]
    out[..., 1::2] = x[..., 0::2] * sin[0] + x[..., 1::2] * cos[0]
    return out


def _softmax_rows(a: np.ndarray) -> np.ndarray:
    e = np.exp(a - a.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


def decode_step(model: Model, cache: KVCache, token: int) -> np.ndarray:
    """Append one token; returns the next-token logits [vocab]."""
    cfg = model.config
    t = cache.length
    if t >= cfg.max_len:
        raise CapacityError(f"cache is full at max_len={cfg.max_len}")
    if not 0 <= int(token) < cfg.vocab:
        raise InputError(f"token id {token} out of range")
    groups = cfg.groups
    ctx = t + 1

    x = model.weights.token_emb.data[int(token)].copy()
    a_row_prev: np.ndarray | None = None
    for i, (lw, lc) in enumerate(zip(model.weights.layers, cache.layers)):
        hn = _rms(x, lw.attn_norm.data)
        mode = lc.mode
        p_row = None
        a_row = None
        if mode == "standard":
            q = _rope_row((hn @ lw.wq.data).reshape(cfg.h, cfg.d_k), t,
                          cfg.rope_base)
            k_new = _rope_row((hn @ lw.wk.data).reshape(cfg.h_kv, cfg.d_k), t,
                              cfg.rope_base)
            lc.k[:, t] = k_new
            keys = np.repeat(lc.k[:, :ctx], groups, axis=0) if groups > 1 \
                else lc.k[:, :ctx]
            a_row = np.einsum("hd,htd->ht", q, keys) / np.sqrt(cfg.d_k)
        elif mode == "ds":
            if a_row_prev is None:
                raise ConfigError(f"layer {i} shares scores but none exist")
            a_row = a_row_prev
        elif mode == "avg":
            p_row = np.full((cfg.h, ctx), 1.0 / ctx)
        elif mode == "lisa":
            lcfg = model.sharing.lisa_config_of(i)
            params = model.lisa_params[i]
            if a_row_prev is None:
                raise ConfigError(f"layer {i} shares scores but none exist")
            q_lr = _rope_row((hn @ params.w_lr_q.data).reshape(cfg.h, lcfg.r_q),
                             t, cfg.rope_base)
            k_lr_new = _rope_row(
                (hn @ params.w_lr_k.data).reshape(cfg.h_kv, lcfg.r_k), t,
                cfg.rope_base)
            lc.k_lr[:, t] = k_lr_new
            keys = np.repeat(lc.k_lr[:, :ctx], groups, axis=0) if groups > 1 \
                else lc.k_lr[:, :ctx]
            a_delta = np.einsum("hd,htd->ht", q_lr, keys) / np.sqrt(lcfg.r_q)
            if lcfg.variant == "plus":
                a_row = a_row_prev + a_delta
            else:
                stacked = np.concatenate([a_row_prev, a_delta], axis=0)
                if lcfg.variant == "sl":
                    a_row = params.align_w.data.T @ stacked
                else:
                    hidden = np.maximum(params.align_w1.data.T @ stacked, 0.0)
                    a_row = params.align_w2.data.T @ hidden
        else:  # pragma: no cover - config validation precludes this
            raise ConfigError(f"unknown cache mode {mode!r}")

        if p_row is None:
            p_row = _softmax_rows(a_row)

        lc.v[:, t] = (hn @ lw.wv.data).reshape(cfg.h_kv, cfg.d_k)
        vals = np.repeat(lc.v[:, :ctx], groups, axis=0) if groups > 1 \
            else lc.v[:, :ctx]
        pv = np.einsum("ht,htd->hd", p_row, vals)
        x = x + pv.reshape(cfg.h * cfg.d_k) @ lw.wo.data

        hf = _rms(x, lw.ffn_norm.data)
        gate = hf @ lw.gate.data
        act = gate / (1.0 + np.exp(-gate))
        x = x + (act * (hf @ lw.up.data)) @ lw.down.data
        a_row_prev = a_row

    cache.length = t + 1
    return _rms(x, model.weights.final_norm.data) @ model.weights.lm_head.data


def sharing_break_even(model: Model) -> float:
    """Prompt length where lisa's score-matrix storage cancels its key-cache
    savings; 0 when no layer is lisa."""
    cfg = model.config
    total = 0.0
    for i in model.sharing.lisa_layers():
        lcfg = model.sharing.lisa_config_of(i)
        total += (cfg.d_k - lcfg.r_k) * cfg.h_kv / cfg.h
    return total


def resolve_nf(model: Model, prompt_len: int, nf: str) -> bool:
    if nf == "on":
        return True
    if nf == "off":
        return False
    if nf != "auto":
        raise ConfigError(f"nf must be auto/on/off, got {nf!r}")
    if not model.sharing.lisa_layers():
        return False
    return prompt_len > sharing_break_even(model)


def generate(model: Model, prompt, n_tokens: int, nf: str = "off") -> np.ndarray:
    """Greedy generation: prefill the prompt, then decode n_tokens steps."""
    prompt = np.asarray(prompt)
    if prompt.ndim != 1 or len(prompt) == 0:
        raise InputError("prompt must be a non-empty token sequence")
    if len(prompt) + n_tokens > model.config.max_len:
        raise CapacityError(
            f"prompt {len(prompt)} + {n_tokens} new tokens exceeds "
            f"max_len {model.config.max_len}")
    use_nf = resolve_nf(model, len(prompt), nf)
    cache, logits = prefill(model, prompt, nf=use_nf)
    out = list(prompt)
    if n_tokens == 0:
        return np.array(out)
    token = int(np.argmax(logits[-1]))
    out.append(token)
    for _ in range(n_tokens - 1):
        row = decode_step(model, cache, token)
        token = int(np.argmax(row))
        out.append(token)
    return np.array(out)
