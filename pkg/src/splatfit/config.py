"""Key-value run configuration.

Config files hold one ``key = value`` assignment per line (# comments allowed).
Keys address TrainConfig fields, with dotted paths into the nested groups:

    stage1_epochs = 80
    lr_motion = 5e-3
    uv_res = 64,64
    net.feature_channels = 16
    weights.offset = 10

Values are parsed by the target field's current type: int, float, bool
(true/false), tuple (comma-separated), or string. Command-line overrides use
the same syntax and win over the file.
"""

import dataclasses

from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


def parse_config_file(path):
    """Returns {dotted key: raw string value}."""
    out = {}
    with open(path) as f:
        for lineno, ln in enumerate(f, 1):
            ln = ln.split("#", 1)[0].strip()
            if not ln:
                continue
            if "=" not in ln:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, val = ln.split("=", 1)
            out[key.strip()] = val.strip()
    return out


def _convert(raw, current):
    if raw.lower() in ("none", "auto"):
        return None
    if isinstance(current, bool):
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"expected a boolean, got '{raw}'")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float) or current is None:
        return float(raw)
    if isinstance(current, tuple):
        parts = [p for p in raw.replace("(", "").replace(")", "").split(",") if p]
        elem = current[0] if current else 0.0
        conv = int if isinstance(elem, int) else float
        return tuple(conv(p) for p in parts)
    if isinstance(current, str):
        return raw
    raise ConfigError(f"cannot assign to a field of type {type(current).__name__}")


def apply_overrides(cfg: TrainConfig, overrides):
    """New TrainConfig with the dotted-key overrides applied."""
    d = cfg.to_dict()
    for key, raw in overrides.items():
        parts = key.split(".")
        node = d
        for p in parts[:-1]:
            if p not in node or not isinstance(node[p], dict):
                raise ConfigError(f"unknown config group '{p}' in '{key}'")
            node = node[p]
        leaf = parts[-1]
        if leaf not in node:
            raise ConfigError(f"unknown config key '{key}'")
        current = node[leaf]
        if isinstance(current, list):  # asdict turns tuples into lists
            current = tuple(current)
        try:
            node[leaf] = _convert(raw, current)
        except (ValueError, TypeError) as e:
            raise ConfigError(f"config key '{key}': {e}") from e
    return TrainConfig.from_dict(d)


def format_config(cfg: TrainConfig):
    """Printable (and reparseable) view of the effective configuration."""
    lines = []

    def emit(prefix, obj):
        for f in dataclasses.fields(obj):
            v = getattr(obj, f.name)
            if dataclasses.is_dataclass(v):
                emit(f"{prefix}{f.name}.", v)
            elif isinstance(v, tuple):
                lines.append(f"{prefix}{f.name} = " + ",".join(str(x) for x in v))
            elif v is None:
                lines.append(f"{prefix}{f.name} = none")
            else:
                lines.append(f"{prefix}{f.name} = {v}")

    emit("", cfg)
    return "\n".join(lines) + "\n"
