"""Losses, the Adam loop, and the two training modes.

Uptraining installs sharing modules into a frozen base model: only the
newly added parameters receive gradient, supervised by a Huber regression
onto the unmodified model's attention scores (recomputed per batch) mixed
with the language-modeling loss by weight beta. Pretraining trains
everything from scratch with the language-modeling loss alone.

All randomness flows from integer seeds; a batch depends only on
(corpus bytes, seed, step), so runs are bit-reproducible.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .config import ModelConfig, SharingConfig
from .errors import ConfigError, ContractError, InputError
from .model import Model, causal_mask, init_weights, model_forward
from .sharing import init_lisa_params
from .tensor import (Tape, Tensor, cross_entropy_next_token, huber_elem,
                     mask_fill_zero, tensor_mean, tensor_sum)
from .util import parallel_map


@dataclass
class TrainConfig:
    mode: str = "uptrain"
    beta: float = 0.25
    delta: float = 1.0
    lr: float = 3e-4
    warmup_steps: int = 150
    total_steps: int = 500
    batch_size: int = 16
    seq_len: int = 256
    weight_decay: float = 0.1
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    kd_target: str = "pre"   # supervise pre-softmax scores; "post" for weights
    eval_every: int = 0      # 0 disables periodic held-out evaluation
    eval_windows: int = 16

    def __post_init__(self):
        if self.mode not in ("uptrain", "pretrain"):
            raise ConfigError(f"unknown training mode {self.mode!r}")
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError("beta must lie in [0, 1]")
        if self.delta <= 0:
            raise ConfigError("delta must be positive")
        if self.warmup_steps > self.total_steps:
            raise ConfigError("warmup_steps must not exceed total_steps")
        if self.kd_target not in ("pre", "post"):
            raise ConfigError(f"kd_target must be pre/post, got {self.kd_target!r}")


class Corpus:
    """Byte-level token stream with deterministic windowing.

    The stream is split into a train region and a trailing held-out region.
    Training batches are windows of seq_len+1 ids drawn at starts that
    depend only on (seed, step); held-out windows are fixed, contiguous and
    non-overlapping.
    """

    def __init__(self, ids: np.ndarray, seq_len: int,
                 holdout_fraction: float = 0.1, seed: int = 0):
        ids = np.asarray(ids)
        if ids.ndim != 1 or ids.size == 0:
            raise InputError("corpus must be a non-empty 1-d id stream")
        self.ids = ids.astype(np.int64)
        self.seq_len = int(seq_len)
        self.seed = int(seed)
        split = int(len(ids) * (1.0 - holdout_fraction))
        self.train_ids = self.ids[:split]
        self.holdout_ids = self.ids[split:]
        window = self.seq_len + 1
        if len(self.train_ids) < window or len(self.holdout_ids) < window:
            raise InputError(
                f"corpus too small for seq_len={seq_len}: train {len(self.train_ids)}"
                f" / holdout {len(self.holdout_ids)} ids")

    @classmethod
    def from_file(cls, path: str, seq_len: int, holdout_fraction: float = 0.1,
                  seed: int = 0) -> "Corpus":
        with open(path, "rb") as fh:
            raw = fh.read()
        return cls(np.frombuffer(raw, dtype=np.uint8), seq_len,
                   holdout_fraction, seed)

    def corpus_hash(self) -> str:
        return hashlib.sha256(self.ids.tobytes()).hexdigest()[:16]

    def batch(self, step: int, batch_size: int) -> np.ndarray:
        """[batch_size, seq_len+1] windows; a pure function of (seed, step)."""
        window = self.seq_len + 1
        rng = np.random.default_rng([self.seed, step])
        starts = rng.integers(0, len(self.train_ids) - window + 1,
                              size=batch_size)
        return np.stack([self.train_ids[s:s + window] for s in starts])

    def holdout_windows(self, max_windows: int | None = None) -> np.ndarray:
        window = self.seq_len + 1
        n = len(self.holdout_ids) // window
        if max_windows is not None:
            n = min(n, max_windows)
        return self.holdout_ids[:n * window].reshape(n, window)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def huber(a: Tensor, b: Tensor, delta: float) -> Tensor:
    """Mean elementwise Huber penalty."""
    return tensor_mean(huber_elem(a, b, delta))


def masked_huber(a: Tensor, b: Tensor, delta: float, mask: np.ndarray) -> Tensor:
    """Mean Huber penalty over mask-true entries only."""
    m = np.broadcast_to(np.asarray(mask, bool), a.shape)
    count = int(m.sum())
    if count == 0:
        raise ContractError("mask selects no entries")
    total = tensor_sum(mask_fill_zero(huber_elem(a, b, delta), m))
    return total * (1.0 / count)


def kd_loss(student: dict[int, Tensor], teacher: dict[int, np.ndarray],
            delta: float, mask: np.ndarray) -> Tensor:
    """Mean over supervised layers of the masked Huber regression onto the
    teacher's scores. The teacher side is plain data: no gradient flows."""
    if set(student) != set(teacher):
        raise ConfigError(f"layer sets differ: student {sorted(student)} vs "
                          f"teacher {sorted(teacher)}")
    if not student:
        raise ConfigError("no supervised layers")
    terms = [masked_huber(student[i], Tensor(teacher[i]), delta, mask)
             for i in sorted(student)]
    acc = terms[0]
    for t in terms[1:]:
        acc = acc + t
    return acc * (1.0 / len(terms))


def lm_loss(logits: Tensor, tokens: np.ndarray) -> Tensor:
    return cross_entropy_next_token(logits, tokens)


def combined_loss(kd: Tensor, lm: Tensor, beta: float) -> Tensor:
    return kd * beta + lm * (1.0 - beta)


def eval_perplexity(model: Model, corpus: Corpus,
                    max_windows: int | None = None,
                    overrides: dict[int, str] | None = None) -> float:
    """exp(mean token-level LM loss) on the held-out split."""
    windows = corpus.holdout_windows(max_windows)
    if len(windows) == 0:
        raise InputError("held-out split has no full window")

    def one(w):
        res = model_forward(w, model, overrides=overrides)
        return lm_loss(res.logits, w).item()

    losses = parallel_map(one, windows)
    return float(math.exp(np.mean(losses)))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class Adam:
    """Adam with linear warmup handled by the caller; decoupled weight decay
    is applied to matrices only (norm gains and other vectors are skipped)."""

    def __init__(self, params: list[tuple[str, Tensor]], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(t.data) for _, t in params]
        self.v = [np.zeros_like(t.data) for _, t in params]
        self.t = 0

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def step(self, lr: float, weight_decay: float = 0.0) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for i, (_, p) in enumerate(self.params):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            m_hat = self.m[i] / bc1
            v_hat = self.v[i] / bc2
            p.data -= lr * m_hat / (np.sqrt(v_hat) + self.eps)
            if weight_decay and p.data.ndim >= 2:
                p.data -= lr * weight_decay * p.data


def warmup_lr(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to cfg.lr, then constant."""
    if cfg.warmup_steps <= 0:
        return cfg.lr
    return cfg.lr * min(1.0, (step + 1) / cfg.warmup_steps)


# ---------------------------------------------------------------------------
# training modes
# ---------------------------------------------------------------------------

@dataclass
class LogRow:
    step: int
    lm: float
    kd: float
    combined: float
    lr: float


@dataclass
class TrainResult:
    model: Model
    log: list[LogRow] = field(default_factory=list)
    eval_curve: list[tuple[int, float]] = field(default_factory=list)
    base_checksum_before: str = ""
    base_checksum_after: str = ""


def uptrain(model: Model, corpus: Corpus, cfg: TrainConfig) -> TrainResult:
    """Train only the sharing-module parameters against the frozen base.

    The teacher signal is recomputed per batch by running the same weights
    with original attention everywhere. The base weights are checksummed
    before and after; any change is an internal invariant failure.
    """
    lisa_layers = model.sharing.lisa_layers()
    if not lisa_layers:
        raise ConfigError("uptraining needs at least one lisa layer")
    teacher = model.teacher_view()

    model.weights.set_requires_grad(False)
    for _, t in model.weights.named_tensors():
        t.grad = None  # drop any stale gradients from earlier training
    params: list[tuple[str, Tensor]] = []
    for i in lisa_layers:
        for name, t in model.lisa_params[i].tensors():
            t.requires_grad = True
            params.append((f"lisa.{i}.{name}", t))

    before = model.weights.checksum()
    opt = Adam(params, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    mask = causal_mask(corpus.seq_len + 1)
    result = TrainResult(model=model, base_checksum_before=before)
    use_pre = cfg.kd_target == "pre"

    for step in range(cfg.total_steps):
        lr = warmup_lr(step, cfg)
        batch = corpus.batch(step, cfg.batch_size)
        opt.zero_grad()

        def teacher_scores(seq):
            res = model_forward(seq, teacher, capture_scores=lisa_layers)
            return {i: (a if use_pre else p).data
                    for i, (a, p) in res.scores.items()}

        teacher_batch = parallel_map(teacher_scores, batch)

        kd_total = lm_total = comb_total = 0.0
        for seq, t_scores in zip(batch, teacher_batch):
            with Tape() as tape:
                res = model_forward(seq, model, capture_scores=lisa_layers)
                s_scores = {i: (a if use_pre else p)
                            for i, (a, p) in res.scores.items()}
                kd = kd_loss(s_scores, t_scores, cfg.delta, mask)
                lm = lm_loss(res.logits, seq)
                loss = combined_loss(kd, lm, cfg.beta) * (1.0 / len(batch))
            tape.backward(loss)
            kd_total += kd.item()
            lm_total += lm.item()
            comb_total += cfg.beta * kd.item() + (1 - cfg.beta) * lm.item()

        opt.step(lr, weight_decay=0.0)
        result.log.append(LogRow(step, lm_total / len(batch),
                                 kd_total / len(batch),
                                 comb_total / len(batch), lr))
        if cfg.eval_every and (step + 1) % cfg.eval_every == 0:
            ppl = eval_perplexity(model, corpus, max_windows=cfg.eval_windows)
            result.eval_curve.append((step + 1, math.log(ppl)))

    result.base_checksum_after = model.weights.checksum()
    if result.base_checksum_after != before:
        raise ContractError("frozen base weights changed during uptraining")
    for name, t in model.weights.named_tensors():
        if t.grad is not None:
            raise ContractError(f"gradient reached frozen weight {name}")
    return result


def pretrain(config: ModelConfig, sharing: SharingConfig, corpus: Corpus,
             cfg: TrainConfig) -> TrainResult:
    """Joint from-scratch training with the language-modeling loss only.

    Sharing layers configured from step 0 never get wq/wk; lisa layers
    (typically the plus variant here) train their low-rank projections and
    alignment weights together with everything else.
    """
    sharing.validate_for(config)
    weights = init_weights(config, seed=cfg.seed, sharing=sharing)
    lisa_params = {}
    for i in sharing.lisa_layers():
        rng = np.random.default_rng([cfg.seed, 7, i])
        lisa_params[i] = init_lisa_params(config, sharing.lisa_config_of(i), rng)
    model = Model(config, weights, sharing, lisa_params)

    params = list(weights.named_tensors())
    for i in sorted(lisa_params):
        params += [(f"lisa.{i}.{n}", t) for n, t in lisa_params[i].tensors()]
    for _, t in params:
        t.requires_grad = True

    opt = Adam(params, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    result = TrainResult(model=model)

    for step in range(cfg.total_steps):
        lr = warmup_lr(step, cfg)
        batch = corpus.batch(step, cfg.batch_size)
        opt.zero_grad()
        lm_total = 0.0
        for seq in batch:
            with Tape() as tape:
                res = model_forward(seq, model)
                lm = lm_loss(res.logits, seq)
                loss = lm * (1.0 / len(batch))
            tape.backward(loss)
            lm_total += lm.item()
        opt.step(lr, weight_decay=cfg.weight_decay)
        mean_lm = lm_total / len(batch)
        result.log.append(LogRow(step, mean_lm, 0.0, mean_lm, lr))
        if cfg.eval_every and (step + 1) % cfg.eval_every == 0:
            ppl = eval_perplexity(model, corpus, max_windows=cfg.eval_windows)
            result.eval_curve.append((step + 1, math.log(ppl)))
    return result
