"""Command-line surface tying the lab together.

Subcommands: pretrain, uptrain, eval, analyze, deviate, generate, bench,
cost, report. Exit codes: 0 success, 1 usage error, 2 configuration/input
error, 3 numeric-invariant failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import __version__
from .analysis import deviation_sweep, run_analysis
from .bench import bench as run_bench
from .checkpoint import load_checkpoint, save_checkpoint
from .config import (MODEL_PRESETS, LisaLayerConfig, ModelConfig,
                     SharingConfig, load_sharing)
from .costs import (COST_PRESETS, CostShape, LayerKind, flops_report,
                    layer_kinds, memory_report)
from .engine import generate as engine_generate
from .errors import (AttnShareError, CapacityError, ConfigError,
                     ContractError, InputError, NumericDomainError,
                     ShapeError)
from .model import Model
from .report import (config_hash, render_report, write_csv, write_json,
                     write_matrix_csv)
from .sharing import init_lisa_params
from .training import Corpus, TrainConfig, eval_perplexity, pretrain, uptrain


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _corpus(args) -> Corpus:
    return Corpus.from_file(args.data, seq_len=args.seq_len,
                            holdout_fraction=args.holdout, seed=args.seed)


def _model_meta(model: Model, seed: int) -> dict:
    return {"config_hash": config_hash({"model": model.config.to_json(),
                                        "sharing": model.sharing.to_json()}),
            "seed": seed}


def _load_model(path: str):
    model, provenance = load_checkpoint(path)
    return model, provenance


def _sharing_from_args(args, model_config: ModelConfig) -> SharingConfig:
    """Either an explicit JSON config or a default built from --variant,
    --rank and --share-layers (latter half of the stack when unset)."""
    if args.config:
        return load_sharing(args.config)
    if args.share_layers:
        layers = [int(x) for x in args.share_layers.split(",")]
    else:
        layers = list(range(model_config.n_layers // 2, model_config.n_layers))
    lcfg = LisaLayerConfig(variant=args.variant, ffn_hidden=args.ffn_hidden,
                           r_q=args.rank, r_k=args.rank)
    return SharingConfig.uniform(layers, "lisa", lcfg, nf=args.nf)


def _write_train_outputs(out_dir: str, result, model: Model, seed: int,
                         provenance: dict) -> None:
    os.makedirs(out_dir, exist_ok=True)
    meta = _model_meta(model, seed)
    save_checkpoint(out_dir, model, provenance)
    write_csv(os.path.join(out_dir, "train_log.csv"),
              ["step", "lm", "kd", "combined", "lr"],
              [[r.step, r.lm, r.kd, r.combined, r.lr] for r in result.log],
              meta)
    if result.eval_curve:
        write_csv(os.path.join(out_dir, "eval_curve.csv"),
                  ["step", "eval_loss"],
                  [[s, v] for s, v in result.eval_curve], meta)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_pretrain(args) -> int:
    config = MODEL_PRESETS[args.preset]
    sharing = (load_sharing(args.config) if args.config
               else SharingConfig.all_standard())
    corpus = _corpus(args)
    tc = TrainConfig(mode="pretrain", total_steps=args.steps,
                     warmup_steps=args.warmup, batch_size=args.batch,
                     seq_len=args.seq_len, lr=args.lr, seed=args.seed,
                     weight_decay=args.weight_decay,
                     eval_every=args.eval_every)
    result = pretrain(config, sharing, corpus, tc)
    provenance = {"seed": args.seed, "steps": args.steps,
                  "corpus_hash": corpus.corpus_hash(), "mode": "pretrain"}
    _write_train_outputs(args.out, result, result.model, args.seed, provenance)
    print(f"pretrained {args.preset} for {args.steps} steps; "
          f"final lm loss {result.log[-1].lm:.4f}" if result.log else
          "pretrained with zero steps")
    return 0


def cmd_uptrain(args) -> int:
    base, base_prov = _load_model(args.ckpt)
    sharing = _sharing_from_args(args, base.config)
    sharing.validate_for(base.config)
    params = {}
    for layer in sharing.lisa_layers():
        rng = np.random.default_rng([args.seed, 11, layer])
        params[layer] = init_lisa_params(base.config,
                                         sharing.lisa_config_of(layer), rng)
    model = Model(base.config, base.weights, sharing, params)
    corpus = _corpus(args)
    tc = TrainConfig(mode="uptrain", total_steps=args.steps,
                     warmup_steps=args.warmup, batch_size=args.batch,
                     seq_len=args.seq_len, lr=args.lr, beta=args.beta,
                     delta=args.delta, seed=args.seed,
                     kd_target=args.kd_target, eval_every=args.eval_every)
    result = uptrain(model, corpus, tc)
    provenance = {"seed": args.seed, "steps": args.steps,
                  "corpus_hash": corpus.corpus_hash(), "mode": "uptrain",
                  "base_checksum": result.base_checksum_after,
                  "base_provenance": base_prov}
    _write_train_outputs(args.out, result, model, args.seed, provenance)
    if result.log:
        print(f"uptrained {len(sharing.lisa_layers())} layers for "
              f"{args.steps} steps; kd {result.log[-1].kd:.5f} "
              f"lm {result.log[-1].lm:.4f}")
    else:
        print("uptrained with zero steps; parameters freshly initialized")
    return 0


def cmd_eval(args) -> int:
    model, _ = _load_model(args.ckpt)
    corpus = _corpus(args)
    ppl = eval_perplexity(model, corpus, max_windows=args.max_windows)
    print(f"held-out perplexity: {ppl:.6f}")
    return 0


def cmd_analyze(args) -> int:
    model, _ = _load_model(args.ckpt)
    corpus = _corpus(args)
    windows = corpus.holdout_windows(args.samples)
    base = 2.0 if args.base == "2" else np.e
    strategies = (("direct", "random", "most_similar")
                  if args.strategy == "all" else (args.strategy,))
    rep = run_analysis(model, windows, strategies=strategies, seed=args.seed,
                       base=base)
    os.makedirs(args.out, exist_ok=True)
    meta = _model_meta(model, args.seed)
    write_matrix_csv(os.path.join(args.out, "layer_js.csv"),
                     rep.layer_pair_js, meta)
    pairs = list(range(len(rep.head_matching[strategies[0]])))
    write_csv(os.path.join(args.out, "head_matching.csv"),
              ["pair"] + list(strategies),
              [[p] + [float(rep.head_matching[s][p]) for s in strategies]
               for p in pairs], meta)
    cos = rep.submodule_cosine
    names = list(cos.values)
    write_csv(os.path.join(args.out, "submodule_cosine.csv"),
              ["pair"] + names,
              [[p] + [float(cos.values[n][p]) for n in names]
               for p in range(len(next(iter(cos.values.values()))))], meta)
    write_json(os.path.join(args.out, "analysis.json"), {
        "samples": rep.samples,
        "log_base": "2" if args.base == "2" else "e",
        "mean_adjacent_js": float(np.mean(np.diag(rep.layer_pair_js, k=1))),
        "skipped_tokens": cos.skipped,
    }, meta)
    print(f"analysis written to {args.out}")
    return 0


def cmd_deviate(args) -> int:
    model, _ = _load_model(args.ckpt)
    corpus = _corpus(args)
    patterns = ("ds", "avg") if args.pattern == "both" else (args.pattern,)
    os.makedirs(args.out, exist_ok=True)
    meta = _model_meta(model, args.seed)
    for pattern in patterns:
        res = deviation_sweep(model, corpus, pattern,
                              max_windows=args.max_windows)
        write_csv(os.path.join(args.out, f"deviation_{pattern}.csv"),
                  ["layer", "perplexity", "baseline"],
                  [[layer, ppl, res.baseline]
                   for layer, ppl in sorted(res.metric.items())], meta)
        print(f"{pattern}: baseline {res.baseline:.4f}; "
              f"worst layer {max(res.metric, key=res.metric.get)}")
    return 0


def cmd_generate(args) -> int:
    model, _ = _load_model(args.ckpt)
    try:
        prompt = np.frombuffer(args.prompt.encode("latin-1"), dtype=np.uint8)
    except UnicodeEncodeError as e:
        raise InputError("prompt must be latin-1 encodable bytes") from e
    out = engine_generate(model, prompt, args.n_tokens, nf=args.nf)
    generated = out[len(prompt):]
    text = bytes(int(t) for t in generated if t < 256).decode(
        "latin-1", errors="replace")
    print(text)
    if args.show_ids:
        print("ids:", " ".join(str(int(t)) for t in out))
    return 0


def cmd_bench(args) -> int:
    model, _ = _load_model(args.ckpt)
    shapes = []
    for part in args.shapes.split(","):
        l_in, l_out = part.strip().split("x")
        shapes.append((int(l_in), int(l_out)))
    rows = run_bench(model, shapes, int(args.budget_mib * 2 ** 20),
                     repeats=args.repeats, seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    meta = _model_meta(model, args.seed)
    write_csv(os.path.join(args.out, "bench.csv"),
              ["row", "l_in", "l_out", "config", "batch", "tokens_per_s",
               "latency_s", "decode_flops_per_token", "kv_bytes_per_stream"],
              [[i, r.l_in, r.l_out, r.config, r.batch, r.tokens_per_s,
                r.latency_s, r.decode_flops_per_token, r.kv_bytes_per_stream]
               for i, r in enumerate(rows)], meta)
    write_json(os.path.join(args.out, "bench.json"),
               {"rows": [r.to_json() for r in rows]}, meta)
    for r in rows:
        print(f"[{r.l_in},{r.l_out}] {r.config:<8} batch={r.batch} "
              f"{r.tokens_per_s:10.1f} tok/s  latency {r.latency_s:.3f}s")
    return 0


def cmd_cost(args) -> int:
    if args.ckpt:
        model, _ = _load_model(args.ckpt)
        shape = CostShape.from_model_config("checkpoint", model.config)
        kinds = layer_kinds(model)
        lisa_layers = model.sharing.lisa_layers()
        n_lisa = len(lisa_layers)
        rank = (min(model.sharing.lisa_config_of(i).r_k for i in lisa_layers)
                if lisa_layers else None)
    else:
        shape = COST_PRESETS[args.preset]
        n_lisa, rank = args.n_lisa, args.rank if args.n_lisa else None
        kinds = None
        if n_lisa:
            kinds = ([LayerKind()] * (shape.n_layers - n_lisa)
                     + [LayerKind("lisa", rank, rank, args.variant,
                                  args.ffn_hidden)] * n_lisa)
    l = args.l if args.l is not None else args.l_in + args.l_out
    mem = memory_report(shape, l, batch=args.batch, n_lisa=n_lisa, r=rank,
                        dtype_bytes=args.dtype_bytes)
    fl = flops_report(shape, args.l_in, args.l_out, batch=args.batch,
                      kinds=kinds)
    print(f"shape {shape.name}: {shape.n_layers} layers, d={shape.d}, "
          f"h={shape.h}, h_kv={shape.h_kv}, d_k={shape.d_k}")
    print(f"KV cache: {mem.kv_cache_gib:g} GiB ({mem.kv_cache_bytes} bytes) "
          f"at l={l} batch={args.batch}")
    if n_lisa:
        print(f"K-cache savings: {mem.k_savings_bytes} bytes; prefill net "
              f"{mem.prefill_net_savings_bytes}; decode net "
              f"{mem.decode_net_savings_bytes}; break-even l="
              f"{mem.break_even_length:g}")
    print(f"prefill attention: {fl.prefill_attn_flops:.3e} FLOPs; "
          f"prefill FFN: {fl.prefill_ffn_flops:.3e}")
    print(f"decode last step attention: {fl.decode_attn_flops:.3e}; "
          f"FFN: {fl.decode_ffn_flops:.3e}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        meta = {"config_hash": config_hash({"shape": shape.name, "l": l,
                                            "batch": args.batch,
                                            "n_lisa": n_lisa, "rank": rank}),
                "seed": args.seed}
        write_json(os.path.join(args.out, "cost.json"),
                   {"memory": mem.to_json(), "flops": fl.to_json()}, meta)
    return 0


def cmd_report(args) -> int:
    written = render_report(args.out)
    for path in written:
        print(f"wrote {path}")
    if not written:
        print(f"no renderable reports found in {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_corpus_args(p, seq_len=128):
    p.add_argument("--data", required=True, help="raw byte corpus file")
    p.add_argument("--seq-len", type=int, default=seq_len)
    p.add_argument("--holdout", type=float, default=0.1,
                   help="held-out fraction of the corpus")


def _add_train_args(p):
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--warmup", type=int, default=20)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--lr", type=float, default=3e-4)
    p.add_argument("--eval-every", type=int, default=0)


def build_parser() -> _Parser:
    parser = _Parser(prog="attnshare",
                     description="cross-layer attention-sharing lab")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="train a model from scratch")
    p.add_argument("--preset", choices=sorted(MODEL_PRESETS), default="tiny-6l")
    p.add_argument("--config", help="sharing config JSON (optional)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--weight-decay", type=float, default=0.1)
    _add_corpus_args(p)
    _add_train_args(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("uptrain", help="install sharing modules into a "
                                       "frozen checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--config", help="sharing config JSON")
    p.add_argument("--share-layers", help="comma list of 0-based layers "
                                          "(default: latter half)")
    p.add_argument("--variant", choices=("dl", "sl", "plus"), default="dl")
    p.add_argument("--rank", type=int, default=4)
    p.add_argument("--ffn-hidden", type=int, default=32)
    p.add_argument("--nf", choices=("auto", "on", "off"), default="auto")
    p.add_argument("--beta", type=float, default=0.25)
    p.add_argument("--delta", type=float, default=1.0)
    p.add_argument("--kd-target", choices=("pre", "post"), default="pre")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    _add_corpus_args(p)
    _add_train_args(p)
    p.set_defaults(func=cmd_uptrain)

    p = sub.add_parser("eval", help="held-out perplexity")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--max-windows", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    _add_corpus_args(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="layer similarity analyses")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--samples", type=int, default=4)
    p.add_argument("--strategy",
                   choices=("all", "direct", "random", "most_similar"),
                   default="all")
    p.add_argument("--base", choices=("e", "2"), default="e")
    p.add_argument("--seed", type=int, default=0)
    _add_corpus_args(p)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("deviate", help="single-layer replacement sweep")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--pattern", choices=("ds", "avg", "both"), default="both")
    p.add_argument("--max-windows", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    _add_corpus_args(p)
    p.set_defaults(func=cmd_deviate)

    p = sub.add_parser("generate", help="greedy generation")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--n-tokens", type=int, default=64)
    p.add_argument("--nf", choices=("auto", "on", "off"), default="auto")
    p.add_argument("--show-ids", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("bench", help="throughput/latency grid")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--shapes", default="16x32,32x32,64x16")
    p.add_argument("--budget-mib", type=float, default=1.0)
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("cost", help="analytic memory/FLOP model")
    p.add_argument("--preset", choices=sorted(COST_PRESETS),
                   default="llama2-7b")
    p.add_argument("--ckpt", help="derive the shape from a checkpoint")
    p.add_argument("--l", type=int, default=None,
                   help="context length for memory (default l_in+l_out)")
    p.add_argument("--l-in", type=int, default=2048)
    p.add_argument("--l-out", type=int, default=1024)
    p.add_argument("--batch", type=int, default=128)
    p.add_argument("--n-lisa", type=int, default=0)
    p.add_argument("--rank", type=int, default=20)
    p.add_argument("--variant", choices=("dl", "sl", "plus"), default="dl")
    p.add_argument("--ffn-hidden", type=int, default=256)
    p.add_argument("--dtype-bytes", type=int, default=2)
    p.add_argument("--out")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_cost)

    p = sub.add_parser("report", help="render figures for a run directory")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except (ConfigError, InputError, CapacityError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (NumericDomainError, ContractError, ShapeError) as e:
        print(f"numeric invariant failure: {e}", file=sys.stderr)
        return 3
    except FileNotFoundError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run_cli())
