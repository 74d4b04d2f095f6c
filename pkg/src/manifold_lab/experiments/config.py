"""Experiment configuration: INI sections, typed fields, built-in defaults."""

from __future__ import annotations

import configparser
import hashlib
import re
from dataclasses import dataclass, field

from ..manifolds import ManifoldError, spec_from_kv, spec_to_kv

__all__ = ["ConfigError", "ExperimentConfig", "EXPERIMENTS", "default_config", "parse_config", "load_config"]


class ConfigError(ValueError):
    """Malformed configuration; the message names the section, field and line."""


def _floats(text: str) -> tuple:
    return tuple(float(x) for x in _split(text))


def _split(text: str) -> list:
    parts = [p.strip() for p in text.replace("\n", ",").split(",")]
    return [p for p in parts if p]


def _ints(text: str) -> tuple:
    """``"0-4, 9"`` style integer lists."""
    out = []
    for part in _split(text):
        m = re.fullmatch(r"(-?\d+)\s*-\s*(-?\d+)", part)
        if m:
            lo, hi = int(m.group(1)), int(m.group(2))
            if hi < lo:
                raise ValueError(f"empty range {part!r}")
            out.extend(range(lo, hi + 1))
        else:
            out.append(int(part))
    return tuple(out)


def _words(text: str) -> tuple:
    return tuple(_split(text))


def _choice(*allowed):
    def parse(text: str) -> str:
        text = text.strip()
        if text not in allowed:
            raise ValueError(f"expected one of {', '.join(allowed)}")
        return text

    return parse


def _positive(kind):
    def parse(text: str):
        v = kind(text)
        if not v > 0:
            raise ValueError("must be positive")
        return v

    return parse


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected true or false")


# field -> (parser, default text).  The defaults reproduce the acceptance runs.
EXPERIMENTS: dict = {
    "mcs-sweep": {
        "family": (_choice("nested", "concentrating"), "nested"),
        "box": (_floats, "0.0, 3.0"),
        "cells": (_positive(int), "300"),
        "support": (_floats, "0.0, 1.0"),
        "shared_lengths": (_floats, "1.0, 0.5, 0.25"),
        "disjoint": (_floats, "2.0, 2.5"),
        "rho_count": (_positive(int), "21"),
        "alpha_points": (_positive(int), "20"),
        "log2_tol": (float, "1e-9"),
    },
    "translate-density": {
        "pairs": (_words, "circles, arcs, segments"),
        "deltas": (_floats, "1e-2, 1e-3, 1e-4"),
        "resolutions": (_floats, "1e-2, 1e-3, 1e-4"),
        "tau_factor": (_positive(float), "0.1"),
        "overlap_factor": (_positive(float), "4.0"),
        "epsilon": (_positive(float), "1.5"),
        "samples": (_positive(int), "64"),
        "p": (_choice("1", "2"), "2"),
        "ground": (_choice("euclidean", "l1"), "euclidean"),
        "w_tol": (float, "1e-6"),
        "max_retries": (int, "20"),
    },
    "grad-audit": {
        "ot_formulas": (_words, "w2sq, w1_l1, w1_euclidean"),
        "points": (_positive(int), "50"),
        "dim": (_positive(int), "2"),
        "grid_box": (_floats, "-8.0, 9.0"),
        "grid_cells": (_positive(int), "4096"),
        "components": (_positive(int), "2"),
        "identity_draws": (int, "10"),
        "h_rel": (_positive(float), "1e-5"),
        "ot_tol": (float, "1e-3"),
        "grid_tol": (float, "1e-4"),
        "identity_tol": (float, "1e-6"),
        "atom_tol": (float, "1e-7"),
    },
    "toy-train": {
        "losses": (_words, "w1, w2sq, jsd, neg_log_d"),
        "modes": (_positive(int), "4"),
        "spread": (_positive(float), "0.15"),
        "samples": (_positive(int), "64"),
        "steps": (int, "150"),
        "lr_w1": (_positive(float), "0.05"),
        "lr_w2sq": (_positive(float), "0.05"),
        "lr_jsd": (_positive(float), "0.5"),
        "lr_neg_log_d": (_positive(float), "0.05"),
        "w1_ground": (_choice("l1", "euclidean"), "l1"),
        "grid_box": (_floats, "-3.5, 3.5"),
        "grid_cells": (_positive(int), "128"),
        "target_samples": (_positive(int), "4096"),
        "target_sigma": (_positive(float), "0.1"),
        "init": (_choice("random", "target"), "random"),
        "atom_steps": (int, "25"),
        "atom_lr": (_positive(float), "0.1"),
        "atom_tol": (float, "1e-6"),
    },
}

_SEEDS_DEFAULT = {"mcs-sweep": "0", "translate-density": "0-9", "grad-audit": "0-19", "toy-train": "0-4"}
_COMMON = ("seed", "seeds", "output")


@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment's typed settings.

    ``seed`` is the base seed mixed into every derived stream; ``seeds`` are
    replicate indices.
    """

    experiment_id: str
    settings: dict
    seeds: tuple
    seed: int = 0
    manifolds: dict = field(default_factory=dict)
    output: str | None = None

    def __getitem__(self, key):
        return self.settings[key]

    def canonical(self) -> str:
        lines = [f"experiment={self.experiment_id}", f"seed={self.seed}", f"seeds={list(self.seeds)}"]
        lines += [f"{k}={self.settings[k]!r}" for k in sorted(self.settings)]
        for name in sorted(self.manifolds):
            kv = spec_to_kv(self.manifolds[name])
            lines += [f"manifold {name}.{k}={kv[k]}" for k in sorted(kv)]
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return ExperimentConfig(self.experiment_id, dict(self.settings), self.seeds, int(seed), dict(self.manifolds), self.output)


def _line_of(text: str | None, section: str, key: str) -> str:
    if text is None:
        return ""
    current = None
    for no, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if s.startswith("[") and s.endswith("]"):
            current = s[1:-1].strip()
        elif current == section and re.match(rf"{re.escape(key)}\s*[=:]", s):
            return f" (line {no})"
    return ""


def _build(experiment_id: str, raw: dict, manifolds: dict, text: str | None, overrides: dict | None) -> ExperimentConfig:
    if experiment_id not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {experiment_id!r}")
    schema = EXPERIMENTS[experiment_id]
    merged = {k: d for k, (_, d) in schema.items()}
    merged.update({"seed": "0", "seeds": _SEEDS_DEFAULT[experiment_id], "output": ""})
    origin = {}
    for src, values in (("file", raw), ("override", overrides or {})):
        for key, val in values.items():
            if key not in merged:
                where = _line_of(text, experiment_id, key) if src == "file" else " (--set)"
                raise ConfigError(f"[{experiment_id}] unknown field {key!r}{where}")
            merged[key] = val
            origin[key] = src
    settings = {}
    for key, text_val in merged.items():
        try:
            if key == "seed":
                seed = int(text_val)
            elif key == "seeds":
                seeds = _ints(text_val)
                if not seeds:
                    raise ValueError("no seeds given")
            elif key == "output":
                output = text_val.strip() or None
            else:
                settings[key] = schema[key][0](text_val)
        except ValueError as exc:
            where = _line_of(text, experiment_id, key) if origin.get(key) == "file" else ""
            raise ConfigError(f"[{experiment_id}] field {key!r}{where}: {exc}") from None
    return ExperimentConfig(experiment_id, settings, seeds, seed, manifolds, output)


def default_config(experiment_id: str, **overrides) -> ExperimentConfig:
    """Built-in configuration; keyword overrides take config-file text values."""
    return _build(experiment_id, {}, {}, None, {k: str(v) for k, v in overrides.items()})


def parse_config(text: str, experiment_id: str, overrides: dict | None = None) -> ExperimentConfig:
    """Parse INI ``text``; a missing experiment section means all defaults.

    ``[manifold NAME]`` sections define charts that ``pairs`` can reference
    as ``NAME_A/NAME_B``.
    """
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    manifolds = {}
    for sec in cp.sections():
        if sec.startswith("manifold "):
            name = sec[len("manifold ") :].strip()
            try:
                manifolds[name] = spec_from_kv(dict(cp[sec]))
            except (ManifoldError, ValueError) as exc:
                raise ConfigError(f"[{sec}] {exc}") from None
        elif sec not in EXPERIMENTS:
            raise ConfigError(f"unknown section [{sec}]")
    raw = dict(cp[experiment_id]) if cp.has_section(experiment_id) else {}
    return _build(experiment_id, raw, manifolds, text, overrides)


def load_config(path, experiment_id: str, overrides: dict | None = None) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, experiment_id, overrides)
