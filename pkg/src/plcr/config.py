"""Experiment configuration stored as flat ``section.key = value`` text.

Values are JSON literals, so a config written by :func:`dump_config` reads
back to an equal object.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .backbone import BackboneConfig
from .model import PromptConfig
from .synthgen import SynthConfig
from .training import TrainConfig


@dataclass
class DataConfig:
    name: str = "synthetic"
    source: str = "synth"  # synth | files
    path_a: str = ""
    path_b: str = ""
    kcore: int = 5
    kcore_iterate: bool = True
    merge_validation: bool = False
    # fraction of each domain's training sequences kept (1.0 = all)
    train_fraction_a: float = 1.0
    train_fraction_b: float = 1.0
    split_seed: int = 0


@dataclass
class RunConfig:
    seeds: list = field(default_factory=lambda: [0])
    variant: str = "full"
    dtype: str = "float32"
    sweep_dropout: list = field(default_factory=lambda: [0.0, 0.1, 0.2, 0.3, 0.4, 0.5])
    sweep_m1: list = field(default_factory=lambda: [1, 2, 3, 4, 5])
    sweep_layout: list = field(default_factory=lambda: ["front", "middle", "end"])


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    prompt: PromptConfig = field(default_factory=PromptConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    run: RunConfig = field(default_factory=RunConfig)

    SECTIONS = ("data", "synth", "backbone", "prompt", "train", "run")

    def items(self):
        for section in self.SECTIONS:
            obj = getattr(self, section)
            for f in dataclasses.fields(obj):
                yield f"{section}.{f.name}", getattr(obj, f.name)

    def set(self, key: str, raw) -> None:
        """Assign ``section.key`` from a JSON literal or bare string."""
        if "." not in key:
            raise KeyError(f"config key {key!r} needs a section prefix")
        section, name = key.split(".", 1)
        if section not in self.SECTIONS:
            raise KeyError(f"unknown config section {section!r}")
        obj = getattr(self, section)
        fields = {f.name: f for f in dataclasses.fields(obj)}
        if name not in fields:
            raise KeyError(f"unknown config key {key!r}")
        value = _parse_value(raw) if isinstance(raw, str) else raw
        current = getattr(obj, name)
        if isinstance(current, bool):
            if not isinstance(value, bool):
                raise ValueError(f"{key} expects true/false, got {raw!r}")
        elif isinstance(current, float) and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        elif isinstance(current, int) and isinstance(value, float) and value.is_integer():
            value = int(value)
        elif isinstance(current, str) and not isinstance(value, str):
            value = str(raw)
        if name == "cluster_map" and value is not None:
            value = tuple(value)
        setattr(obj, name, value)
        if section == "train":
            obj.__post_init__()

    def fingerprint(self, sections=None) -> str:
        sections = sections or self.SECTIONS
        payload = [(k, v) for k, v in self.items() if k.split(".")[0] in sections]
        return hashlib.sha256(json.dumps(payload, default=list).encode()).hexdigest()[:16]

    def dataset_fingerprint(self) -> str:
        keys = ("data", "synth") if self.data.source == "synth" else ("data",)
        return self.fingerprint(keys)


def _parse_value(raw: str):
    text = raw.strip()
    lowered = text.lower()
    if lowered in ("true", "false"):
        return lowered == "true"
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def dump_config(cfg: ExperimentConfig) -> str:
    lines = []
    section = None
    for key, value in cfg.items():
        head = key.split(".")[0]
        if head != section:
            if section is not None:
                lines.append("")
            section = head
        if isinstance(value, tuple):
            value = list(value)
        lines.append(f"{key} = {json.dumps(value)}")
    return "\n".join(lines) + "\n"


def parse_config(text: str, cfg: ExperimentConfig | None = None) -> ExperimentConfig:
    cfg = cfg or ExperimentConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'section.key = value'")
        key, value = line.split("=", 1)
        cfg.set(key.strip(), value)
    return cfg


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def save_config(cfg: ExperimentConfig, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dump_config(cfg))
