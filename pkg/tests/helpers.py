"""Shared test utilities: an independent reference forward pass and a
deterministic synthetic byte corpus with word/bigram structure."""

import numpy as np


def reference_forward(tokens, cfg, w):
    """Straight-line numpy decoder forward, written from the layer math
    independently of the package implementation. `w` holds plain arrays."""
    l = len(tokens)
    eps = 1e-6
    pos = np.arange(l)
    half = cfg.d_k // 2
    freqs = cfg.rope_base ** (-2.0 * np.arange(half) / cfg.d_k)
    ang = pos[:, None] * freqs[None, :]
    cos, sin = np.cos(ang), np.sin(ang)

    def norm(x, g):
        return x / np.sqrt((x * x).mean(-1, keepdims=True) + eps) * g

    def rot(x):
        y = np.empty_like(x)
        y[..., 0::2] = x[..., 0::2] * cos - x[..., 1::2] * sin
        y[..., 1::2] = x[..., 0::2] * sin + x[..., 1::2] * cos
        return y

    x = w["emb"][tokens]
    for i in range(cfg.n_layers):
        hn = norm(x, w[f"g1.{i}"])
        q = rot((hn @ w[f"wq.{i}"]).reshape(l, cfg.h, cfg.d_k).transpose(1, 0, 2))
        k = rot((hn @ w[f"wk.{i}"]).reshape(l, cfg.h_kv, cfg.d_k).transpose(1, 0, 2))
        v = (hn @ w[f"wv.{i}"]).reshape(l, cfg.h_kv, cfg.d_k).transpose(1, 0, 2)
        rep = cfg.h // cfg.h_kv
        k = np.repeat(k, rep, axis=0)
        v = np.repeat(v, rep, axis=0)
        scores = q @ k.transpose(0, 2, 1) / np.sqrt(cfg.d_k)
        p = np.zeros_like(scores)
        for head in range(cfg.h):
            for t in range(l):
                row = scores[head, t, :t + 1]
                e = np.exp(row - row.max())
                p[head, t, :t + 1] = e / e.sum()
        pv = p @ v
        merged = pv.transpose(1, 0, 2).reshape(l, cfg.h * cfg.d_k)
        x = x + merged @ w[f"wo.{i}"]
        hf = norm(x, w[f"g2.{i}"])
        gate = hf @ w[f"gate.{i}"]
        act = gate / (1.0 + np.exp(-gate))
        x = x + (act * (hf @ w[f"up.{i}"])) @ w[f"down.{i}"]
    return norm(x, w["gf"]) @ w["head"]


def weights_as_dict(mw):
    out = {"emb": mw.token_emb.data, "gf": mw.final_norm.data,
           "head": mw.lm_head.data}
    for i, lw in enumerate(mw.layers):
        for src, dst in (("wq", "wq"), ("wk", "wk"), ("wv", "wv"), ("wo", "wo"),
                         ("attn_norm", "g1"), ("ffn_norm", "g2"),
                         ("gate", "gate"), ("up", "up"), ("down", "down")):
            t = getattr(lw, src)
            if t is not None:
                out[f"{dst}.{i}"] = t.data
    return out


def synth_corpus_bytes(n_bytes: int, seed: int = 0) -> bytes:
    """Deterministic byte text: a seeded vocabulary of short words chained
    by a sparse word-bigram so both local (in-word) and longer-range
    (word-transition) structure is learnable."""
    rng = np.random.default_rng(seed)
    alphabet = np.frombuffer(b"abcdefghijklmnopqrstuvwxyz", dtype=np.uint8)
    n_words = 48
    words = [bytes(rng.choice(alphabet, size=int(rng.integers(2, 7))))
             for _ in range(n_words)]
    successors = {i: rng.choice(n_words, size=3, replace=False)
                  for i in range(n_words)}
    out = bytearray()
    w = 0
    while len(out) < n_bytes:
        out += words[w] + b" "
        w = int(successors[w][int(rng.integers(0, 3))])
    return bytes(out[:n_bytes])


def structured_corpus_bytes(n_bytes: int, seed: int = 0, n_topics: int = 3,
                            n_words: int = 60, stay: float = 0.99,
                            bigram: bool = True) -> bytes:
    """Topic-mixture byte text: word choice depends on a slowly-switching
    latent topic (diffuse long-range structure) and, when bigram is on, on
    the previous word within the topic (sharp local structure). Shallow
    layers of a model trained on this do local decoding; deep layers
    aggregate the smooth topic context."""
    rng = np.random.default_rng(seed)
    alphabet = np.frombuffer(b"abcdefghijklmnopqrstuvwxyz", dtype=np.uint8)
    words = [bytes(rng.choice(alphabet, size=int(rng.integers(2, 7))))
             for _ in range(n_words)]
    prefs = []
    for _ in range(n_topics):
        order = rng.permutation(n_words)
        p = np.full(n_words, 0.02)
        p[order[:12]] = 1.0
        prefs.append(p / p.sum())
    succ = None
    if bigram:
        succ = [[rng.choice(np.flatnonzero(prefs[t] > 0.01), size=3)
                 for _ in range(n_words)] for t in range(n_topics)]
    out = bytearray()
    topic, w = 0, 0
    while len(out) < n_bytes:
        if rng.random() > stay:
            topic = int(rng.integers(0, n_topics))
            w = int(rng.choice(n_words, p=prefs[topic]))
        if bigram:
            w = int(succ[topic][w][int(rng.integers(0, 3))])
        else:
            w = int(rng.choice(n_words, p=prefs[topic]))
        out += words[w] + b" "
    return bytes(out[:n_bytes])
