"""Plain-text experiment configuration.

One `key = value` pair per line, `#` starts a comment. Every key has a
default, unknown keys are rejected, and all problems in a file are
reported in a single error. `to_text` emits a canonical form whose parse
is lossless, which also makes it suitable for embedding in checkpoints.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Optional

from .data import DOMAIN_PRESETS, SplitSpec
from .network import NetSpec
from .trainer import TrainConfig


class ConfigError(Exception):
    pass


_BOOL_WORDS = {"true": True, "false": False}


def _parse_bool(raw: str) -> bool:
    try:
        return _BOOL_WORDS[raw.lower()]
    except KeyError:
        raise ValueError(f"expected true/false, got {raw!r}")


def _parse_opt_float(raw: str) -> Optional[float]:
    return None if raw.lower() == "none" else float(raw)


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "none"
    return repr(value) if isinstance(value, float) else str(value)


# key -> (parser, default); declaration order is the canonical file order
SCHEMA = {
    # network
    "in_channels": (int, 1),
    "num_classes": (int, 3),
    "base_width": (int, 16),
    "depth": (int, 3),
    "instance_norm": (_parse_bool, False),
    # objective
    "beta": (float, 3.0),
    "lam": (float, 1.0),
    "alpha": (float, 0.1),
    "mix_mode": (str, "rectified"),
    "cacps_on_labeled": (_parse_bool, True),
    "detach_weight": (_parse_bool, False),
    "confidence_weighting": (_parse_bool, True),
    # optimization
    "lr": (float, 1e-4),
    "weight_decay": (float, 0.1),
    "epochs": (int, 20),
    "batch_size": (int, 32),
    "crop": (int, 64),
    "seed_data": (int, 0),
    "seed_net1": (int, 1),
    "seed_net2": (int, 2),
    "aug_flip": (_parse_bool, True),
    "aug_rotation": (_parse_bool, True),
    "aug_scaling": (_parse_bool, True),
    "aug_random_crop": (_parse_bool, True),
    # data
    "dataset": (str, "synthetic"),
    "n_subjects": (int, 10),
    "image_size": (int, 96),
    "dataset_seed": (int, 0),
    "held_out_domain": (str, "A"),
    "labeled_fraction": (float, 0.2),
    "split_seed": (int, 0),
    # output
    "output_dir": (str, "runs"),
    "checkpoint_every": (int, 5),
    "hd_percentile": (_parse_opt_float, None),
    "figures": (_parse_bool, True),
}

_SECTIONS = {
    "in_channels": "network",
    "beta": "objective",
    "lr": "optimization",
    "dataset": "data",
    "output_dir": "output",
}

_TRAIN_KEYS = (
    "beta", "lam", "alpha", "mix_mode", "lr", "weight_decay", "epochs",
    "batch_size", "labeled_fraction", "seed_data", "seed_net1", "seed_net2",
    "crop", "cacps_on_labeled", "detach_weight", "confidence_weighting",
    "aug_flip", "aug_rotation", "aug_scaling", "aug_random_crop",
)


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
    values: dict

    def __post_init__(self):
        problems = []
        unknown = set(self.values) - set(SCHEMA)
        missing = set(SCHEMA) - set(self.values)
        if unknown:
            problems.append(f"unknown keys: {', '.join(sorted(unknown))}")
        if missing:
            problems.append(f"missing keys: {', '.join(sorted(missing))}")
        if not problems:
            if self.values["mix_mode"] not in ("strict", "rectified"):
                problems.append(f"mix_mode must be strict or rectified, got {self.values['mix_mode']!r}")
            if self.values["dataset"] == "synthetic":
                if self.values["held_out_domain"] not in DOMAIN_PRESETS:
                    known = ", ".join(sorted(DOMAIN_PRESETS))
                    problems.append(
                        f"held_out_domain {self.values['held_out_domain']!r} is not a preset ({known})"
                    )
                if self.values["n_subjects"] < 1:
                    problems.append("n_subjects must be >= 1")
            if self.values["checkpoint_every"] < 1:
                problems.append("checkpoint_every must be >= 1")
            hd = self.values["hd_percentile"]
            if hd is not None and not (0.0 < hd <= 100.0):
                problems.append(f"hd_percentile must lie in (0, 100], got {hd}")
        if problems:
            raise ConfigError("; ".join(problems))

    def __getattr__(self, name):
        try:
            return self.values[name]
        except KeyError:
            raise AttributeError(name)

    def net_spec(self) -> NetSpec:
        v = self.values
        return NetSpec(
            in_channels=v["in_channels"], num_classes=v["num_classes"],
            base_width=v["base_width"], depth=v["depth"],
            instance_norm=v["instance_norm"],
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(**{k: self.values[k] for k in _TRAIN_KEYS})

    def split_spec(self) -> SplitSpec:
        v = self.values
        return SplitSpec(
            held_out_domain=v["held_out_domain"],
            labeled_fraction=v["labeled_fraction"], seed=v["split_seed"],
        )

    def validated(self) -> "ExperimentConfig":
        """Also run the downstream dataclass validators, merging their complaints."""
        problems = []
        for build in (self.net_spec, self.train_config, self.split_spec):
            try:
                build()
            except Exception as exc:
                problems.append(str(exc))
        if problems:
            raise ConfigError("; ".join(problems))
        return self

    def replace(self, **overrides) -> "ExperimentConfig":
        bad = set(overrides) - set(SCHEMA)
        if bad:
            raise ConfigError(f"unknown keys: {', '.join(sorted(bad))}")
        return ExperimentConfig({**self.values, **overrides})

    def to_text(self) -> str:
        lines = []
        for key in SCHEMA:
            if key in _SECTIONS:
                if lines:
                    lines.append("")
                lines.append(f"# {_SECTIONS[key]}")
            lines.append(f"{key} = {_fmt(self.values[key])}")
        return "\n".join(lines) + "\n"


def default_config() -> ExperimentConfig:
    return ExperimentConfig({k: d for k, (_, d) in SCHEMA.items()})


def parse_text(text: str) -> ExperimentConfig:
    values = {k: d for k, (_, d) in SCHEMA.items()}
    problems = []
    seen = set()
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            problems.append(f"line {lineno}: expected key = value, got {raw_line.strip()!r}")
            continue
        key, _, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if key not in SCHEMA:
            problems.append(f"line {lineno}: unknown key {key!r}")
            continue
        if key in seen:
            problems.append(f"line {lineno}: duplicate key {key!r}")
            continue
        seen.add(key)
        parser, _ = SCHEMA[key]
        try:
            values[key] = parser(raw)
        except ValueError as exc:
            problems.append(f"line {lineno}: {key}: {exc}")
    if problems:
        raise ConfigError("; ".join(problems))
    return ExperimentConfig(values)


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_text(p.read_text())


def parse_override(key: str, raw: str):
    """Parse one CLI-style override value using the schema's type."""
    if key not in SCHEMA:
        raise ConfigError(f"unknown key {key!r}")
    parser, _ = SCHEMA[key]
    try:
        return parser(raw)
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}")
