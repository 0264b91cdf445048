"""Score producers for the four attention variants.

A layer's pre-softmax score matrix A [h, l, l] can come from:

  * standard  - scaled dot product of this layer's rotated Q and K
    (computed in model.py);
  * ds        - the previous layer's A, reused verbatim;
  * avg       - no scores at all: the post-softmax weights are uniform over
    the causal prefix;
  * lisa      - the previous layer's A passed through a per-position head
    alignment map, plus a low-rank difference term A_delta computed from
    rank-r projections of the hidden state.

All maps here are bias-free, so masked score entries (stored as exact 0)
stay exactly 0 through alignment; the mask is still re-applied on output as
a hard guarantee. The alignment map concatenates the shared scores first and
the difference term second along the head channel axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import LisaLayerConfig, ModelConfig
from .errors import ConfigError
from .rope import apply_rope
from .tensor import (Tensor, concat, mask_fill_zero, matmul, relu, repeat,
                     reshape, transpose)


@dataclass
class LisaParams:
    """Trainable parameters of one lisa layer.

    w_lr_q: [d, h*r], w_lr_k: [d, h_kv*r]. The alignment net is
    align_w1 [2h, m] and align_w2 [m, h] for the dl variant,
    align_w [2h, h] for sl, and absent for plus.
    """

    w_lr_q: Tensor
    w_lr_k: Tensor
    align_w1: Tensor | None = None
    align_w2: Tensor | None = None
    align_w: Tensor | None = None

    def tensors(self) -> list[tuple[str, Tensor]]:
        out = [("w_lr_q", self.w_lr_q), ("w_lr_k", self.w_lr_k)]
        for name in ("align_w1", "align_w2", "align_w"):
            t = getattr(self, name)
            if t is not None:
                out.append((name, t))
        return out

    def set_requires_grad(self, flag: bool) -> None:
        for _, t in self.tensors():
            t.requires_grad = flag


def init_lisa_params(model: ModelConfig, cfg: LisaLayerConfig,
                     rng: np.random.Generator, dtype=np.float64) -> LisaParams:
    """Initialize so the layer starts out approximately reproducing ds.

    The low-rank projections are small-normal. For sl, the alignment map is
    identity on the shared-score block and small noise on the difference
    block. For dl, the shared-score block is passed exactly through a
    +x/-x ReLU pair per head (needs ffn_hidden >= 2h); remaining hidden
    units start as small noise with zeroed output rows.
    """
    cfg.validate_for(model)
    h, h_kv, d = model.h, model.h_kv, model.d
    sigma = 0.02
    w_lr_q = rng.normal(0.0, sigma, size=(d, h * cfg.r_q)).astype(dtype)
    w_lr_k = rng.normal(0.0, sigma, size=(d, h_kv * cfg.r_k)).astype(dtype)
    params = LisaParams(Tensor(w_lr_q), Tensor(w_lr_k))
    if cfg.variant == "sl":
        w = rng.normal(0.0, sigma, size=(2 * h, h)).astype(dtype)
        w[:h] = np.eye(h, dtype=dtype)
        params.align_w = Tensor(w)
    elif cfg.variant == "dl":
        m = cfg.ffn_hidden
        w1 = rng.normal(0.0, sigma, size=(2 * h, m)).astype(dtype)
        w2 = np.zeros((m, h), dtype=dtype)
        if m >= 2 * h:
            # identity via relu(x) - relu(-x) on the shared-score block;
            # difference rows keep small noise so their gradient is live
            w1[:h, :2 * h] = 0.0
            for c in range(h):
                w1[c, 2 * c] = 1.0
                w1[c, 2 * c + 1] = -1.0
            w2[np.arange(0, 2 * h, 2), np.arange(h)] = 1.0
            w2[np.arange(1, 2 * h, 2), np.arange(h)] = -1.0
        params.align_w1 = Tensor(w1)
        params.align_w2 = Tensor(w2)
    return params


def project_low_rank(h_state: Tensor, weight: Tensor, heads: int, rank: int,
                     cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """H [l, d] -> rotated per-head low-rank states [heads, l, rank]."""
    l = h_state.shape[0]
    proj = matmul(h_state, weight)                      # [l, heads*rank]
    proj = transpose(reshape(proj, (l, heads, rank)), (1, 0, 2))
    return apply_rope(proj, cos, sin)


def compute_delta(h_state: Tensor, params: LisaParams, cfg: LisaLayerConfig,
                  model: ModelConfig, cos: np.ndarray, sin: np.ndarray,
                  mask: np.ndarray) -> Tensor:
    """Low-rank difference scores A_delta [h, l, l], causally masked to 0.

    Rotary encoding is applied to the low-rank states with the same
    positions as the base model, and the dot product is scaled by the
    square root of the rank.
    """
    q_lr = project_low_rank(h_state, params.w_lr_q, model.h, cfg.r_q, cos, sin)
    k_lr = project_low_rank(h_state, params.w_lr_k, model.h_kv, cfg.r_k, cos, sin)
    if model.groups > 1:
        k_lr = repeat(k_lr, model.groups, axis=0)
    scores = matmul(q_lr, transpose(k_lr, (0, 2, 1))) * (1.0 / np.sqrt(cfg.r_q))
    return mask_fill_zero(scores, mask)


def _channel_map(x: Tensor, weight: Tensor, l: int) -> Tensor:
    """Apply weight [c_in, c_out] across the head-channel axis of x [c_in, l, l]."""
    c_in = x.shape[0]
    flat = reshape(x, (c_in, l * l))
    mixed = matmul(transpose(weight, (1, 0)), flat)     # [c_out, l*l]
    return reshape(mixed, (weight.shape[1], l, l))


def align_and_integrate(a_prev: Tensor, a_delta: Tensor, params: LisaParams | None,
                        cfg: LisaLayerConfig, mask: np.ndarray) -> Tensor:
    """Fuse the shared scores with the difference term.

    plus: A = a_prev + a_delta. sl/dl: each unmasked position's 2h-channel
    vector [a_prev; a_delta] is mixed into h output channels by the
    alignment map (dl interposes a ReLU hidden layer). Masked positions
    remain exactly 0.
    """
    if a_prev is None:
        raise ConfigError("sharing layer has no predecessor scores")
    if cfg.variant == "plus":
        return mask_fill_zero(a_prev + a_delta, mask)
    l = a_prev.shape[-1]
    stacked = concat([a_prev, a_delta], axis=0)         # [2h, l, l]
    if cfg.variant == "sl":
        out = _channel_map(stacked, params.align_w, l)
    else:
        hidden = relu(_channel_map(stacked, params.align_w1, l))
        out = _channel_map(hidden, params.align_w2, l)
    return mask_fill_zero(out, mask)


def lisa_scores(h_state: Tensor, a_prev: Tensor, params: LisaParams,
                cfg: LisaLayerConfig, model: ModelConfig, cos: np.ndarray,
                sin: np.ndarray, mask: np.ndarray) -> Tensor:
    """Full variant-lisa score producer: difference term, then integration."""
    a_delta = compute_delta(h_state, params, cfg, model, cos, sin, mask)
    return align_and_integrate(a_prev, a_delta, params, cfg, mask)


def ds_scores(a_prev: Tensor) -> Tensor:
    """Reuse the previous layer's scores verbatim (same object is fine)."""
    if a_prev is None:
        raise ConfigError("ds layer has no predecessor scores")
    return a_prev


def uniform_attention(l: int, dtype=np.float64) -> np.ndarray:
    """Post-softmax weights of the averaging variant: row t is 1/(t+1) over
    positions 0..t and exactly 0 beyond."""
    p = np.tril(np.ones((l, l), dtype=dtype))
    p /= np.arange(1, l + 1, dtype=dtype)[:, None]
    return p
