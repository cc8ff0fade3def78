"""Strict INI-style experiment configuration.

Every section and key is declared in ``SCHEMA`` with a type and default;
unknown sections or keys and unparsable values are rejected.
"""
from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from ..prompts import COMBINATIONS

METHODS = ("baseline",) + COMBINATIONS + ("FT-C", "FT-B", "FT-F")


class ConfigError(ValueError):
    pass


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in _str_list(text))


def _str_list(text: str) -> tuple[str, ...]:
    items = tuple(x.strip() for x in text.split(",") if x.strip())
    if not items:
        raise ValueError("empty list")
    return items


def _budget_list(text: str) -> tuple[str, ...]:
    out = []
    for item in _str_list(text):
        if item.endswith("%"):
            frac = float(item[:-1]) / 100.0
            if not 0.0 < frac <= 1.0:
                raise ValueError(f"budget fraction {item} outside (0%, 100%]")
        elif int(item) < 1:
            raise ValueError(f"budget {item} must be >= 1")
        out.append(item)
    return tuple(out)


def _pad_layers(text: str) -> tuple[str, ...]:
    items = _str_list(text)
    for x in items:
        if x != "all" and int(x) < 1:
            raise ValueError(f"pad layer count {x} must be >= 1 or 'all'")
    return items


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "yes", "1"):
        return True
    if t in ("false", "no", "0"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


SCHEMA: dict[str, dict[str, tuple]] = {
    "corpus": {
        "num_speakers": (int, 10),
        "classes": (int, 10),
        "samples_per_speaker": (int, 100),
        "mode": (str, "ctc_sentence"),
        "num_test_speakers": (int, 2),
        "adapt_fraction": (float, 0.5),
        "frames": (int, 12),
        "height": (int, 16),
        "width": (int, 16),
        "word_frames": (int, 4),
        "noise": (float, 0.05),
    },
    "model": {
        "preset": (str, "grid-tiny"),
    },
    "pretrain": {
        "epochs": (int, 15),
        "batch_size": (int, 32),
        "lr": (float, 3e-3),
        "weight_decay": (float, 0.01),
        "warmup": (int, 50),
    },
    "adapt": {
        "epochs": (int, 30),
        "batch_size": (int, 16),
        "lr_add": (float, 0.01),
        "lr_pad": (float, 0.01),
        "lr_cat": (float, 0.1),
        "finetune_lr": (float, 1e-3),
        "weight_decay": (float, 0.0),
        "pad_layers": (_pad_layers, ("all",)),
        "cat_lengths": (_int_list, (5,)),
    },
    "experiment": {
        "methods": (_str_list, ("baseline", "A+P+C")),
        "budgets": (_budget_list, ("30",)),
        "seeds": (_int_list, (0,)),
        "output_dir": (str, ""),
        "export_prompts": (_bool, False),
    },
}


@dataclass(frozen=True)
class ExperimentConfig:
    values: dict  # section -> key -> parsed value

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    @property
    def methods(self) -> tuple[str, ...]:
        return self.values["experiment"]["methods"]

    @property
    def seeds(self) -> tuple[int, ...]:
        return self.values["experiment"]["seeds"]

    @property
    def budgets(self) -> tuple[str, ...]:
        return self.values["experiment"]["budgets"]

    def canonical(self) -> dict:
        """Everything that affects results (the output location does not)."""
        d = {s: dict(v) for s, v in self.values.items()}
        d["experiment"] = {k: v for k, v in d["experiment"].items() if k != "output_dir"}
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.canonical(), sort_keys=True).encode()).hexdigest()[:16]

    def replace(self, section: str, **kv) -> "ExperimentConfig":
        vals = {s: dict(v) for s, v in self.values.items()}
        for k, v in kv.items():
            if k not in SCHEMA[section]:
                raise ConfigError(f"unknown key {section}.{k}")
            vals[section][k] = v
        return ExperimentConfig(vals)


def defaults() -> ExperimentConfig:
    return ExperimentConfig({s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()})


def parse_config(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, strict=True, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str  # keys are case-sensitive
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"malformed config: {e}".replace("\n", " ")) from None
    if cp.defaults():
        raise ConfigError("keys outside a section are not allowed")
    vals = {s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()}
    for section in cp.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        for key, raw in cp.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key {section}.{key}")
            conv = SCHEMA[section][key][0]
            try:
                vals[section][key] = conv(raw)
            except ValueError as e:
                raise ConfigError(f"bad value for {section}.{key}: {raw!r} ({e})") from None
    cfg = ExperimentConfig(vals)
    validate(cfg)
    return cfg


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text(encoding="utf-8"))


def validate(cfg: ExperimentConfig) -> None:
    for m in cfg.methods:
        if m not in METHODS:
            raise ConfigError(f"unknown method {m!r}; expected one of {', '.join(METHODS)}")
    if cfg["corpus"]["mode"] not in ("ctc_sentence", "word_classification"):
        raise ConfigError(f"unknown corpus mode {cfg['corpus']['mode']!r}")
    if cfg["model"]["preset"] not in ("grid-tiny", "lrw-tiny"):
        raise ConfigError(f"unknown model preset {cfg['model']['preset']!r}")
    if not 0.0 < cfg["corpus"]["adapt_fraction"] < 1.0:
        raise ConfigError("corpus.adapt_fraction must lie in (0, 1)")


def dump_config(cfg: ExperimentConfig) -> str:
    """Render back to the text format; ``parse_config(dump_config(c)) == c``."""
    lines = []
    for section, keys in SCHEMA.items():
        lines.append(f"[{section}]")
        for key in keys:
            v = cfg[section][key]
            if isinstance(v, tuple):
                v = ", ".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = str(v).lower()
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{key} = {v}")
        lines.append("")
    return "\n".join(lines)
