"""Report emission: delimited tables with a reproducibility header and
matplotlib figures rendered next to them.

Every CSV starts with a `# config_hash=... seed=...` comment line followed
by an RFC-4180 body; every JSON report carries the same two fields inline.
`render_report` re-reads the delimited outputs found in a run directory
and draws the matching figures.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def config_hash(payload) -> str:
    return hashlib.sha256(
        json.dumps(payload, sort_keys=True, separators=(",", ":"),
                   default=str).encode()).hexdigest()[:16]


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)  # shortest exact round-trip representation
    return str(v)


def write_csv(path: str, header: list[str], rows, meta: dict) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(f"# config_hash={meta.get('config_hash', '')} "
                 f"seed={meta.get('seed', '')}\n")
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def write_matrix_csv(path: str, matrix: np.ndarray, meta: dict) -> None:
    """Square matrix with layer indices as header row and first column."""
    n = matrix.shape[0]
    header = ["layer"] + [str(i) for i in range(n)]
    rows = [[str(i)] + [_fmt(float(v)) for v in matrix[i]] for i in range(n)]
    write_csv(path, header, rows, meta)


def write_json(path: str, payload: dict, meta: dict) -> None:
    out = {"config_hash": meta.get("config_hash", ""),
           "seed": meta.get("seed", "")}
    out.update(payload)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(out, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


def read_csv(path: str) -> tuple[list[str], list[list[str]]]:
    """Read back a report CSV, skipping comment lines."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        rows = [r for r in csv.reader(
            line for line in fh if not line.startswith("#"))]
    return rows[0], rows[1:]


# ---------------------------------------------------------------------------
# figures
# ---------------------------------------------------------------------------

def fig_heatmap(matrix: np.ndarray, title: str, path: str) -> None:
    fig, ax = plt.subplots(figsize=(5, 4))
    im = ax.imshow(matrix, cmap="Reds_r", origin="lower")
    ax.set_xlabel("layer")
    ax.set_ylabel("layer")
    ax.set_title(title)
    fig.colorbar(im, ax=ax)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)


def fig_lines(x, series: dict[str, np.ndarray], xlabel: str, ylabel: str,
              title: str, path: str) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, ys in series.items():
        ax.plot(x, ys, marker="o", markersize=3, label=name)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.grid(alpha=0.3)
    if len(series) > 1:
        ax.legend()
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)


def _render_matrix(out_dir, fname, title):
    path = os.path.join(out_dir, fname)
    header, rows = read_csv(path)
    mat = np.array([[float(v) for v in r[1:]] for r in rows])
    png = path.replace(".csv", ".png")
    fig_heatmap(mat, title, png)
    return png


def _render_lines(out_dir, fname, xcol, title, ylabel):
    path = os.path.join(out_dir, fname)
    header, rows = read_csv(path)
    xi = header.index(xcol)
    x = [float(r[xi]) for r in rows]
    series = {}
    for j, name in enumerate(header):
        if j == xi:
            continue
        try:
            series[name] = np.array([float(r[j]) for r in rows])
        except ValueError:
            continue  # non-numeric column
    png = path.replace(".csv", ".png")
    fig_lines(x, series, xcol, ylabel, title, png)
    return png


_RENDERERS = [
    ("layer_js.csv", lambda d: _render_matrix(d, "layer_js.csv",
                                              "layer-pair JS divergence")),
    ("head_matching.csv", lambda d: _render_lines(
        d, "head_matching.csv", "pair", "head matching strategies", "mean JS")),
    ("submodule_cosine.csv", lambda d: _render_lines(
        d, "submodule_cosine.csv", "pair", "sub-module cosine similarity",
        "cosine")),
    ("deviation_ds.csv", lambda d: _render_lines(
        d, "deviation_ds.csv", "layer", "single-layer ds replacement",
        "held-out perplexity")),
    ("deviation_avg.csv", lambda d: _render_lines(
        d, "deviation_avg.csv", "layer", "single-layer avg replacement",
        "held-out perplexity")),
    ("train_log.csv", lambda d: _render_lines(
        d, "train_log.csv", "step", "training losses", "loss")),
    ("eval_curve.csv", lambda d: _render_lines(
        d, "eval_curve.csv", "step", "held-out loss", "eval loss")),
    ("bench.csv", lambda d: _render_lines(
        d, "bench.csv", "row", "bench cells", "value")),
]


def render_report(out_dir: str) -> list[str]:
    """Render figures for every known delimited report in out_dir."""
    written = []
    for fname, renderer in _RENDERERS:
        if os.path.exists(os.path.join(out_dir, fname)):
            written.append(renderer(out_dir))
    cost_path = os.path.join(out_dir, "cost.json")
    if os.path.exists(cost_path):
        with open(cost_path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
        flat = []
        for section, values in payload.items():
            if isinstance(values, dict):
                flat += [[section, k, v] for k, v in values.items()]
        table = os.path.join(out_dir, "cost_table.csv")
        write_csv(table, ["section", "quantity", "value"], flat,
                  {"config_hash": payload.get("config_hash", ""),
                   "seed": payload.get("seed", "")})
        written.append(table)
    return written
