"""Flat ``key = value`` run configuration.

One setting per line, ``#`` starts a comment. Keys cover dataset paths,
model, training, sampling and evaluation settings in a single namespace.
Unknown keys are rejected so that typos never pass silently. This module
only uses the standard library so the CLI can read a config (and apply the
thread setting) before numpy is loaded.
"""

from __future__ import annotations


class RunConfigError(ValueError):
    pass


def _int(text):
    return int(text)


def _float(text):
    return float(text)


def _bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _str(text):
    return text


def _list(text):
    return [t.strip() for t in text.split(",") if t.strip()]


def _weights(text):
    """``1p:4,2p:1`` -> ``{"1p": 4.0, "2p": 1.0}``."""
    out = {}
    for item in _list(text):
        tag, sep, value = item.partition(":")
        if not sep:
            raise ValueError(f"expected tag:value, got {item!r}")
        out[tag.strip()] = float(value)
    return out


def _counts(text):
    """A single count for every structure, or ``tag:count`` pairs."""
    text = text.strip()
    if ":" not in text:
        return int(text)
    return {k: int(v) for k, v in _weights(text).items()}


# key -> (parser, default, section)
SCHEMA = {
    # paths
    "data": (_str, "", "paths"),
    "graph": (_str, "", "paths"),
    "queries": (_str, "", "paths"),
    "checkpoint": (_str, "", "paths"),
    "resume": (_str, "", "paths"),
    # run
    "seed": (_int, 0, "run"),
    "threads": (_int, 1, "run"),
    # model
    "family": (_str, "mlp", "model"),
    "embed_dim": (_int, 800, "model"),
    "mlp_layers": (_int, 2, "model"),
    "hidden_dim": (_int, 0, "model"),
    "mixer_blocks": (_int, 2, "model"),
    "mixer_dropout": (_float, 0.1, "model"),
    "nln_regularizer_weight": (_float, 0.1, "model"),
    "entity_init": (_str, "uniform", "model"),
    "init_scale": (_float, 0.01, "model"),
    # training
    "margin": (_float, 24.0, "train"),
    "negatives": (_int, 128, "train"),
    "batch_size": (_int, 512, "train"),
    "learning_rate": (_float, 1e-4, "train"),
    "iterations": (_int, 300_000, "train"),
    "eval_every": (_int, 10_000, "train"),
    "checkpoint_every": (_int, 0, "train"),
    "structure_weights": (_weights, {}, "train"),
    "train_structures": (_list, ["1p", "2p", "3p", "2i", "3i"], "train"),
    # sampling
    "structures": (_list, ["1p", "2p", "3p", "2i", "3i", "ip", "pi", "2u", "up"], "sampler"),
    "count": (_counts, 1000, "sampler"),
    "splits": (_list, ["train", "valid", "test"], "sampler"),
    "max_answers": (_int, 100, "sampler"),
    "max_attempts": (_int, 0, "sampler"),
    "require_hard": (_bool, True, "sampler"),
    # evaluation
    "eval_split": (_str, "test", "eval"),
    "eval_structures": (_list, [], "eval"),
    "eval_batch_size": (_int, 256, "eval"),
    "top_n": (_int, 10, "eval"),
}

SECTIONS = ("paths", "run", "model", "train", "sampler", "eval")


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return ",".join(value)
    if isinstance(value, dict):
        return ",".join(f"{k}:{v:g}" if isinstance(v, float) else f"{k}:{v}" for k, v in value.items())
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_text(text, source="<config>"):
    """Parse config text into ``{key: raw string}``; rejects unknown keys."""
    raw = {}
    for line_no, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise RunConfigError(f"{source}:{line_no}: expected 'key = value'")
        if key not in SCHEMA:
            raise RunConfigError(f"{source}:{line_no}: unknown key {key!r}")
        if key in raw:
            raise RunConfigError(f"{source}:{line_no}: duplicate key {key!r}")
        raw[key] = value.strip()
    return raw


class RunConfig:
    """Resolved settings: defaults, then file values, then overrides."""

    def __init__(self, values=None):
        self.values = {k: _copy(default) for k, (_, default, _) in SCHEMA.items()}
        self.explicit = set()
        for key, value in (values or {}).items():
            self.set(key, value)

    def set(self, key, value):
        if key not in SCHEMA:
            raise RunConfigError(f"unknown key {key!r}")
        if isinstance(value, str):
            try:
                value = SCHEMA[key][0](value)
            except ValueError as e:
                raise RunConfigError(f"bad value for {key!r}: {e}") from None
        self.values[key] = value
        self.explicit.add(key)

    def update_raw(self, raw):
        for key, value in raw.items():
            self.set(key, value)

    @classmethod
    def load(cls, path=None, overrides=None):
        cfg = cls()
        if path:
            try:
                with open(path, encoding="utf-8") as f:
                    text = f.read()
            except OSError as e:
                raise RunConfigError(f"cannot read config {path}: {e.strerror}") from None
            cfg.update_raw(parse_text(text, path))
        for key, value in (overrides or {}).items():
            if value is not None:
                cfg.set(key, value)
        return cfg

    def __getitem__(self, key):
        return self.values[key]

    def section(self, name):
        return {k: self.values[k] for k, (_, _, s) in SCHEMA.items() if s == name}

    def resolved_text(self):
        """Every key with its final value, grouped by section, stable order."""
        lines = []
        for name in SECTIONS:
            lines.append(f"# {name}")
            for key, (_, _, section) in SCHEMA.items():
                if section == name:
                    lines.append(f"{key} = {_format(self.values[key])}")
        return "\n".join(lines) + "\n"


def _copy(value):
    if isinstance(value, (list, dict)):
        return type(value)(value)
    return value
