"""INI-style run configuration with typed keys and line-numbered errors."""

import configparser
import hashlib
import json
import re

from .errors import CacheFlowError


class ConfigError(CacheFlowError, ValueError):
    pass


def _bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _optional(kind):
    def parse(text):
        return None if text.strip().lower() in ("", "none") else kind(text)

    parse.__name__ = f"optional {kind.__name__}"
    return parse


def _tuple_of(kind):
    def parse(text):
        return tuple(kind(p) for p in re.split(r"[,\s]+", text.strip()) if p)

    parse.__name__ = f"list of {kind.__name__}"
    return parse


# section -> key -> (parser, default)
SCHEMA = {
    "data": {
        "path": (_optional(str), None),
        "manifest": (_optional(str), None),
        "generator": (str, "bimodal_pendulum"),
        "past_frames": (int, 10),
        "future_frames": (int, 20),
        "joints": (int, 1),
        "n_train": (int, 2000),
        "n_test": (int, 200),
        "n_modes": (int, 2),
        "noise": (float, 0.01),
        "seed": (int, 0),
        "mode_weights": (_tuple_of(float), (0.7, 0.3)),
        "weight_modulation": (float, 0.5),
        "speed_jitter": (float, 0.25),
        "latent_dim": (int, 2),
        "fps": (float, 25.0),
    },
    "model": {
        "latent_dim": (int, 8),
        "n_modes": (int, 50),
        "hidden_width": (int, 256),
        "n_hidden_layers": (int, 2),
        "rnn_hidden": (int, 128),
        "codec": (str, "linear"),
        "use_flow": (_bool, True),
        "sigma_floor": (float, 1e-3),
    },
    "train": {
        "steps": (_optional(int), None),
        "epochs": (int, 10),
        "batch_size": (int, 64),
        "lr": (float, 5e-4),
        "lambda_nll": (float, 1.0),
        "lambda_cfm": (float, 1.0),
        "scheme": (str, "euler"),
        "integrator_steps": (int, 8),
    },
    "cache": {
        "scheme": (str, "rk4"),
        "steps": (int, 32),
        "precision": (str, "f32"),
    },
    "predict": {
        "n": (int, 50),
        "strategy": (str, "nn"),
    },
    "eval": {
        "methods": (_tuple_of(str), ("cacheflow", "gmm-only", "kde", "random", "most-likely")),
        "n_samples": (int, 50),
        "threshold": (_optional(float), None),
        "n_conditions": (_optional(int), None),
    },
    "bench": {
        "n_triplets": (int, 10000),
        "repeats": (int, 30),
        "warmup": (int, 5),
        "scheme": (str, "rk4"),
        "steps": (int, 32),
    },
    "run": {
        "seed": (int, 0),
        "out": (str, "runs"),
    },
}


def defaults():
    return {sec: {k: v[1] for k, v in keys.items()} for sec, keys in SCHEMA.items()}


def _key_lines(text):
    """Map (section, key) to its 1-based line number."""
    lines, section = {}, None
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        m = re.match(r"^\[([^\]]+)\]$", line)
        if m:
            section = m.group(1).strip()
        elif section and line and not line.startswith(("#", ";")):
            key = re.split(r"[=:]", line, maxsplit=1)[0].strip().lower()
            lines.setdefault((section, key), no)
    return lines


def parse_config(text, source="<config>"):
    """Parse INI text into a nested dict filled with defaults."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    where = _key_lines(text)
    cfg = defaults()
    for section in parser.sections():
        if section not in SCHEMA:
            line = next((n for (s, _), n in where.items() if s == section), "?")
            raise ConfigError(f"{source}:{line}: unknown section [{section}]")
        for key, raw in parser.items(section):
            line = where.get((section, key), "?")
            if key not in SCHEMA[section]:
                raise ConfigError(f"{source}:{line}: unknown key '{section}.{key}'")
            kind = SCHEMA[section][key][0]
            try:
                cfg[section][key] = kind(raw)
            except ValueError as exc:
                raise ConfigError(f"{source}:{line}: bad value for '{section}.{key}': {exc}") from None
    return cfg


def load_config(path):
    if path is None:
        return defaults()
    try:
        with open(path) as f:
            text = f.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, source=str(path))


def config_hash(cfg):
    blob = json.dumps(cfg, sort_keys=True, default=list).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
