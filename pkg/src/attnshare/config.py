"""Architecture and per-layer attention-variant configuration.

SharingConfig maps layer indices (0-based) to one of four attention modes:
standard, ds (reuse the previous layer's scores), avg (uniform prefix
weights), or lisa (aligned sharing with low-rank difference compensation).
Config files are JSON; a compact form using 1-based layer lists is accepted
and re-emitted unchanged.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict

from .errors import ConfigError

# byte-level vocabulary: raw bytes plus two specials
BYTE_VOCAB = 258
BOS_ID = 256
EOS_ID = 257

MODES = ("standard", "ds", "avg", "lisa")
LISA_VARIANTS = ("dl", "sl", "plus")


@dataclass(frozen=True)
class ModelConfig:
    """Decoder-only transformer shape."""

    n_layers: int
    d: int
    h: int
    h_kv: int
    d_k: int
    d_ff: int
    vocab: int = BYTE_VOCAB
    max_len: int = 512
    rope_base: float = 10000.0

    def __post_init__(self):
        if self.h_kv < 1 or self.h % self.h_kv != 0:
            raise ConfigError(f"h_kv={self.h_kv} must divide h={self.h}")
        if self.d != self.h * self.d_k:
            raise ConfigError(f"d={self.d} must equal h*d_k={self.h * self.d_k}")
        if self.d_k % 2 != 0:
            raise ConfigError(f"d_k={self.d_k} must be even for rotary encoding")
        if self.max_len < 2:
            raise ConfigError("max_len must be at least 2")
        if self.vocab < 2:
            raise ConfigError("vocab must be at least 2")
        if self.n_layers < 1 or self.d_ff < 1:
            raise ConfigError("n_layers and d_ff must be positive")

    @property
    def groups(self) -> int:
        return self.h // self.h_kv

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        return cls(**obj)


@dataclass(frozen=True)
class LisaLayerConfig:
    """Shape of one layer's sharing modules.

    variant "dl" uses a two-layer alignment net with ReLU (hidden width
    ffn_hidden), "sl" a single linear map, "plus" adds the difference term
    directly with no alignment net. r_q/r_k are the per-head ranks of the
    low-rank score projections; the score dot product requires r_q == r_k.
    """

    variant: str = "dl"
    ffn_hidden: int = 256
    r_q: int = 20
    r_k: int = 20
    nf_keep_original: bool = True

    def __post_init__(self):
        if self.variant not in LISA_VARIANTS:
            raise ConfigError(f"unknown lisa variant {self.variant!r}")
        if self.r_q < 1 or self.r_k < 1:
            raise ConfigError("low-rank dimensions must be positive")
        if self.r_q != self.r_k:
            raise ConfigError(
                f"r_q={self.r_q} and r_k={self.r_k} must match for the score product")
        if self.r_q % 2 != 0:
            raise ConfigError(f"r_q={self.r_q} must be even for rotary encoding")
        if self.variant == "dl" and self.ffn_hidden < 1:
            raise ConfigError("dl variant needs ffn_hidden >= 1")

    def validate_for(self, model: ModelConfig) -> None:
        if self.r_q > model.d_k:
            raise ConfigError(f"rank {self.r_q} exceeds head dimension {model.d_k}")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "LisaLayerConfig":
        return cls(**obj)


@dataclass
class SharingConfig:
    """Per-layer attention-variant map plus the NF decoding switch.

    `entries` maps 0-based layer index -> (mode, LisaLayerConfig | None);
    unlisted layers are standard. Layer 0 must be standard: every sharing
    mode needs a front layer to borrow from.
    """

    entries: dict[int, tuple[str, LisaLayerConfig | None]] = field(default_factory=dict)
    nf: str = "auto"
    note: str = ""
    # compact source form, preserved verbatim for round-tripping
    _compact: dict | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.nf not in ("auto", "on", "off"):
            raise ConfigError(f"nf must be auto/on/off, got {self.nf!r}")
        for layer, (mode, lisa) in self.entries.items():
            if mode not in MODES:
                raise ConfigError(f"unknown attention mode {mode!r} at layer {layer}")
            if mode == "lisa" and lisa is None:
                raise ConfigError(f"layer {layer} is lisa but has no lisa config")
        if self.mode_of(0) != "standard":
            raise ConfigError("layer 0 must be standard: sharing needs a front layer")

    def mode_of(self, layer: int) -> str:
        entry = self.entries.get(layer)
        return entry[0] if entry else "standard"

    def lisa_config_of(self, layer: int) -> LisaLayerConfig | None:
        entry = self.entries.get(layer)
        return entry[1] if entry else None

    def lisa_layers(self) -> list[int]:
        return sorted(i for i, (m, _) in self.entries.items() if m == "lisa")

    def shared_layers(self) -> list[int]:
        return sorted(i for i, (m, _) in self.entries.items() if m != "standard")

    def validate_for(self, model: ModelConfig) -> None:
        for layer, (mode, lisa) in self.entries.items():
            if not 0 <= layer < model.n_layers:
                raise ConfigError(f"layer index {layer} outside 0..{model.n_layers - 1}")
            if lisa is not None:
                lisa.validate_for(model)
            if mode in ("ds", "lisa") and self.mode_of(layer - 1) == "avg":
                raise ConfigError(
                    f"layer {layer} shares scores but layer {layer - 1} is avg "
                    "and produces none")

    @classmethod
    def all_standard(cls) -> "SharingConfig":
        return cls()

    @classmethod
    def uniform(cls, layers, mode: str, lisa: LisaLayerConfig | None = None,
                nf: str = "auto", note: str = "") -> "SharingConfig":
        entries = {int(i): (mode, lisa if mode == "lisa" else None) for i in layers}
        return cls(entries=entries, nf=nf, note=note)

    # -- JSON ----------------------------------------------------------------
    def to_json(self) -> dict:
        if self._compact is not None:
            return self._compact
        layers = [
            {"layer": i, "mode": mode,
             **({"lisa": lisa.to_json()} if lisa is not None else {})}
            for i, (mode, lisa) in sorted(self.entries.items())
        ]
        return {"version": 1, "nf": self.nf, "note": self.note, "layers": layers}

    @classmethod
    def from_json(cls, obj: dict) -> "SharingConfig":
        nf = obj.get("nf", "auto")
        note = obj.get("note", "")
        if "share_layers_one_based" in obj:
            # compact form: a 1-based layer list sharing one mode/config
            mode = obj.get("share_mode", "lisa")
            lisa = None
            if mode == "lisa":
                lisa = LisaLayerConfig.from_json(obj.get("lisa", {}))
            entries = {int(i) - 1: (mode, lisa) for i in obj["share_layers_one_based"]}
            cfg = cls(entries=entries, nf=nf, note=note)
            cfg._compact = obj
            return cfg
        entries: dict[int, tuple[str, LisaLayerConfig | None]] = {}
        for item in obj.get("layers", []):
            lisa = (LisaLayerConfig.from_json(item["lisa"])
                    if "lisa" in item else None)
            entries[int(item["layer"])] = (item["mode"], lisa)
        return cls(entries=entries, nf=nf, note=note)

    def config_hash(self) -> str:
        payload = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


def load_sharing(path: str) -> SharingConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return SharingConfig.from_json(json.load(fh))


def save_sharing(cfg: SharingConfig, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(cfg.to_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")


# runnable desk-scale presets
MODEL_PRESETS: dict[str, ModelConfig] = {
    "tiny-4l": ModelConfig(n_layers=4, d=64, h=4, h_kv=4, d_k=16, d_ff=128,
                           vocab=BYTE_VOCAB, max_len=512),
    "tiny-6l": ModelConfig(n_layers=6, d=64, h=4, h_kv=4, d_k=16, d_ff=128,
                           vocab=BYTE_VOCAB, max_len=512),
    "tiny-12l": ModelConfig(n_layers=12, d=96, h=6, h_kv=2, d_k=16, d_ff=192,
                            vocab=BYTE_VOCAB, max_len=512),
}
