"""Run configuration: one flat key = value namespace for every tunable.

A run resolves its config from three layers (defaults, then a config file,
then --set overrides) and writes the fully-resolved result next to its
outputs so any artifact is reproducible from its own directory.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .models import ModelConfig
from .training import TrainSettings
from .util import ValidationError

# Desk-scale defaults keep CPU runs in seconds-to-minutes. Full-scale presets
# for the same knobs (recorded here so nothing hides in lore): d = 768,
# lr = 2e-5, batch_size = 1024, max_len = 512, d_p = 128, steps = one epoch
# over the pretraining corpus.


@dataclass
class RunConfig:
    # vocabulary
    vocab_min_count: int = 1
    # model
    d: int = 64
    n_blocks: int = 2
    n_heads: int = 4
    max_len: int = 64
    ffn_mult: int = 4
    gcn_layers: int = 3
    mlp_layers: int = 3
    d_p: int = 16
    n_anchors: int = 256
    dropout: float = 0.2
    memory_similarity: str = "dot"
    memory_tau: float = 1.0
    # training
    seed: int = 0
    steps: int = 500
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 1e-3
    warmup_frac: float = 0.10
    mask_rate: float = 0.5
    alpha: float = 0.15
    epsilon: float = 1e-4
    hop_budgets: tuple = (10, 20)
    weight_mask: float = 1.0
    weight_st: float = 1.0
    weight_me: float = 1.0
    no_mask_loss: bool = False
    no_st_loss: bool = False
    no_me_loss: bool = False
    no_gnn: bool = False
    no_ppr: bool = False
    st_stop_gradient: bool = True
    # inference / evaluation
    feature_eps: float = 1e-3
    embed_chunk: int = 256
    probe_lr: float = 1e-2
    probe_steps: int = 500
    probe_plateau: float = 1e-6
    probe_seeds: int = 5
    edge_mode: str = "hadamard"

    # -- typed assignment -----------------------------------------------------

    _FIELDS = None  # populated lazily

    @classmethod
    def _field_map(cls):
        if cls._FIELDS is None:
            cls._FIELDS = {f.name: f for f in dataclasses.fields(cls)}
        return cls._FIELDS

    def set_key(self, key: str, raw: str) -> None:
        fields = self._field_map()
        if key not in fields:
            raise ValidationError(f"unknown config key {key!r}")
        kind = fields[key].type
        raw = raw.strip()
        try:
            if kind == "bool":
                if raw.lower() in ("true", "1", "yes", "on"):
                    value = True
                elif raw.lower() in ("false", "0", "no", "off"):
                    value = False
                else:
                    raise ValueError(raw)
            elif kind == "int":
                value = int(raw)
            elif kind == "float":
                value = float(raw)
            elif kind == "tuple":
                value = tuple(int(part) for part in raw.split(",") if part.strip())
                if not value:
                    raise ValueError(raw)
            else:
                value = raw
        except ValueError as exc:
            raise ValidationError(f"config key {key!r}: cannot parse {raw!r}") from exc
        setattr(self, key, value)

    @classmethod
    def from_sources(cls, path=None, sets=()) -> "RunConfig":
        cfg = cls()
        if path is not None:
            cfg.apply_file(path)
        for item in sets:
            if "=" not in item:
                raise ValidationError(f"--set needs key=value, got {item!r}")
            key, raw = item.split("=", 1)
            cfg.set_key(key.strip(), raw)
        return cfg

    def apply_file(self, path) -> None:
        with open(path, encoding="utf-8") as fh:
            for ln, line in enumerate(fh, start=1):
                body = line.split("#", 1)[0].strip()
                if not body:
                    continue
                if "=" not in body:
                    raise ValidationError(f"{path}:{ln}: expected key = value")
                key, raw = body.split("=", 1)
                try:
                    self.set_key(key.strip(), raw)
                except ValidationError as exc:
                    raise ValidationError(f"{path}:{ln}: {exc}") from exc

    # -- views -----------------------------------------------------------------

    def resolved_text(self) -> str:
        lines = ["# fully resolved run configuration"]
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            elif isinstance(value, float):
                value = repr(value)
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(
            vocab_size=vocab_size,
            d=self.d,
            n_blocks=self.n_blocks,
            n_heads=self.n_heads,
            max_len=self.max_len,
            ffn_mult=self.ffn_mult,
            gcn_layers=self.gcn_layers,
            mlp_layers=self.mlp_layers,
            d_p=self.d_p,
            n_anchors=self.n_anchors,
            dropout=self.dropout,
            memory_similarity=self.memory_similarity,
            memory_tau=self.memory_tau,
        )

    def train_settings(self) -> TrainSettings:
        return TrainSettings(
            seed=self.seed,
            steps=self.steps,
            batch_size=self.batch_size,
            lr=self.lr,
            weight_decay=self.weight_decay,
            warmup_frac=self.warmup_frac,
            mask_rate=self.mask_rate,
            alpha=self.alpha,
            epsilon=self.epsilon,
            hop_budgets=tuple(self.hop_budgets),
            weight_mask=self.weight_mask,
            weight_st=self.weight_st,
            weight_me=self.weight_me,
            no_mask_loss=self.no_mask_loss,
            no_st_loss=self.no_st_loss,
            no_me_loss=self.no_me_loss,
            no_gnn=self.no_gnn,
            no_ppr=self.no_ppr,
            st_stop_gradient=self.st_stop_gradient,
        )
