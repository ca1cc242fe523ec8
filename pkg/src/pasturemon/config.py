"""Flat ``key = value`` run configuration.

Every tunable has a default below; a config file and ``key=value`` command
line overrides replace them.  Values are parsed to the type of the default.
Unknown keys are rejected.
"""

from __future__ import annotations

import os
from pathlib import Path

DEFAULTS: dict[str, object] = {
    # shared
    "seed": 0,
    "rows": 16,
    "cols": 16,
    "width": 10.0,
    "height": 10.0,
    # field synthesis
    "series_path": "",          # one height per line; empty = built-in seasonal curve
    "days": 730,                # length of the built-in curve
    "noise_std": 2.0,
    "length_scale_factor": 10.0,
    "weight_scale": 10.0,
    "gp_length_scale": 0.0,     # 0 = 10% of the horizon
    # predictor
    "dataset_dir": "",
    "stride": 2,
    "alpha": 15,
    "channels": "8,16",
    "kernel": 3,
    "dropout": 0.4,
    "lr": 1e-3,
    "momentum": 0.9,
    "batch_size": 8,
    "max_epochs": 30,
    "patience": 10,
    "train_end": 292,
    "val_end": 365,
    "model_path": "",
    "K": 100,
    "p": 0.4,
    "input_start": 0,
    "horizon": 0,               # 0 = alpha
    "threads": 1,
    # planner
    "variance_dir": "",
    "w1": 5.0,
    "w2": 0.1,
    "w3": 1.0,
    "per_day": 4,
    "total_days": 5,
    "t1": 0,
    "robots": 1,
    "robot_weights": "",        # comma list; empty = all 1.0
    # perception
    "cloud_path": "",           # empty = sample a synthetic cloud
    "truth_path": "",           # HMAP for the sampler; empty = flat 100 mm
    "density": 500.0,
    "lidar_std": 4.0,
    "dropout_frac": 0.0,
    "band": 1.0,
    "statistic": "p95",
    "filtered": True,
    # evaluation
    "n_trials": 50,
    "meas_std": 4.0,
    "fold": "recent",
    "test_start": 365,
    "eval_horizon": 15,
    "repredict": 10,
}


class ConfigError(ValueError):
    pass


def _parse(key: str, raw: str):
    default = DEFAULTS[key]
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def parse_lines(lines, source: str = "<config>") -> dict[str, str]:
    out = {}
    for ln, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{ln}: expected key = value, got {line!r}")
        out[key.strip()] = value.strip()
    return out


def resolve(config_path: str | os.PathLike | None = None, overrides: dict[str, str] | None = None,
            **fixed) -> dict[str, object]:
    """Defaults, then the config file, then ``overrides``, then ``fixed`` (already typed)."""
    raw: dict[str, str] = {}
    if config_path:
        p = Path(config_path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        raw.update(parse_lines(p.read_text().splitlines(), str(p)))
    raw.update(overrides or {})
    cfg = dict(DEFAULTS)
    for key, value in raw.items():
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        cfg[key] = _parse(key, value)
    for key, value in fixed.items():
        if value is None:
            continue
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        cfg[key] = value
    return cfg


def format_config(cfg: dict[str, object]) -> str:
    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, float):
            return repr(v)
        return str(v)
    return "".join(f"{k} = {fmt(v)}\n" for k, v in sorted(cfg.items()))


def write_config(cfg: dict[str, object], path: str | os.PathLike) -> None:
    Path(path).write_text(format_config(cfg))


def int_list(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def float_list(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())
