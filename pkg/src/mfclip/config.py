"""Layered run configuration: defaults <- config file <- CLI overrides.

Keys live in a flat schema of "section.key" entries with declared types and
defaults.  Files use INI-style sections readable by configparser; overrides
use ``section.key=value``.  Unknown keys are rejected, and the fully resolved
configuration can be echoed back out as a file that reproduces the run.
"""

from __future__ import annotations

import configparser
import io

from .model import ModelConfig
from .trainer import TrainConfig
from .vision import DEFAULT_IE_STEM, DEFAULT_NE_STEM


class ConfigError(ValueError):
    pass


def _parse_bool(raw: str) -> bool:
    value = raw.strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _parse_int_tuple(raw: str) -> tuple[int, ...]:
    return tuple(int(part) for part in raw.split(",") if part.strip())


_PARSERS = {
    "int": int,
    "float": float,
    "str": str,
    "bool": _parse_bool,
    "ints": _parse_int_tuple,
}

# section.key -> (type name, default)
SCHEMA: dict[str, tuple[str, object]] = {
    "model.d": ("int", 512),
    "model.p": ("int", 112),
    "model.B": ("int", 3),
    "model.L": ("int", 6),
    "model.heads": ("int", 8),
    "model.mlp_ratio": ("int", 4),
    "ie.enabled": ("bool", True),
    "ie.blocks": ("int", 6),
    "ie.stem": ("ints", DEFAULT_IE_STEM),
    "ne.enabled": ("bool", True),
    "ne.stem": ("ints", DEFAULT_NE_STEM),
    "fle.enabled": ("bool", True),
    "fle.vocab_path": ("str", ""),
    "predictor.enabled": ("bool", True),
    "spa.enabled": ("bool", True),
    "spa.tau_init": ("float", 0.07),
    "glcm.levels": ("int", 8),
    "srm.q": ("float", 2.0),
    "loss.kl": ("bool", True),
    "loss.cmc": ("bool", True),
    "loss.w_ce": ("float", 1.0),
    "loss.w_kl": ("float", 1.0),
    "loss.w_cmc": ("float", 1.0),
    "train.lr": ("float", 1e-4),
    "train.weight_decay": ("float", 1e-3),
    "train.step_epochs": ("int", 15),
    "train.gamma": ("float", 0.1),
    "train.epochs": ("int", 1),
    "train.batch_size": ("int", 24),
    "train.seed": ("int", 0),
    "train.dtype": ("str", "float32"),
    "train.decoupled_wd": ("bool", True),
    "train.on_decode_error": ("str", "abort"),
    "train.eval_batch_size": ("int", 32),
    "train.stats_max_images": ("int", 256),
    "eval.threshold": ("float", 0.5),
}


def default_config() -> dict[str, object]:
    return {key: default for key, (_, default) in SCHEMA.items()}


def parse_value(key: str, raw: str) -> object:
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key: {key}")
    type_name, _ = SCHEMA[key]
    try:
        return _PARSERS[type_name](raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r} ({exc})") from exc


def load_config_file(path: str) -> dict[str, object]:
    parser = configparser.RawConfigParser()
    parser.optionxform = str  # keep key case
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config file {path}: {exc}") from exc
    values = {}
    for section in parser.sections():
        for key, raw in parser.items(section):
            values[f"{section}.{key}"] = parse_value(f"{section}.{key}", raw)
    return values


def apply_overrides(cfg: dict[str, object], overrides: list[str]) -> None:
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like section.key=value: {item!r}")
        key, raw = item.split("=", 1)
        cfg[key.strip()] = parse_value(key.strip(), raw.strip())


def resolve_config(
    config_path: str | None = None, overrides: list[str] | None = None
) -> dict[str, object]:
    cfg = default_config()
    if config_path:
        cfg.update(load_config_file(config_path))
    if overrides:
        apply_overrides(cfg, overrides)
    return cfg


def _format_value(value: object) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def format_config(cfg: dict[str, object]) -> str:
    """Render as an INI file; parsing it back yields the same values."""
    sections: dict[str, list[tuple[str, object]]] = {}
    for key in SCHEMA:
        section, leaf = key.split(".", 1)
        sections.setdefault(section, []).append((leaf, cfg[key]))
    out = io.StringIO()
    for section, items in sections.items():
        out.write(f"[{section}]\n")
        for leaf, value in items:
            out.write(f"{leaf} = {_format_value(value)}\n")
        out.write("\n")
    return out.getvalue()


def model_config(cfg: dict[str, object]) -> ModelConfig:
    """Model-side view; the pair gate is sized by the training batch."""
    try:
        return ModelConfig(
            d=cfg["model.d"],
            p=cfg["model.p"],
            not_blocks=cfg["model.B"],
            fle_blocks=cfg["model.L"],
            heads=cfg["model.heads"],
            mlp_ratio=cfg["model.mlp_ratio"],
            ie_blocks=cfg["ie.blocks"],
            ie_stem=tuple(cfg["ie.stem"]),
            ne_stem=tuple(cfg["ne.stem"]),
            batch_size=cfg["train.batch_size"],
            tau_init=cfg["spa.tau_init"],
            glcm_levels=cfg["glcm.levels"],
            srm_q=cfg["srm.q"],
            use_ie=cfg["ie.enabled"],
            use_ne=cfg["ne.enabled"],
            use_fle=cfg["fle.enabled"],
            use_predictor=cfg["predictor.enabled"],
            use_spa=cfg["spa.enabled"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def train_config(cfg: dict[str, object]) -> TrainConfig:
    if cfg["train.dtype"] not in ("float32", "float64"):
        raise ConfigError(f"train.dtype must be float32/float64, got {cfg['train.dtype']}")
    return TrainConfig(
        lr=cfg["train.lr"],
        weight_decay=cfg["train.weight_decay"],
        step_epochs=cfg["train.step_epochs"],
        gamma=cfg["train.gamma"],
        epochs=cfg["train.epochs"],
        batch_size=cfg["train.batch_size"],
        seed=cfg["train.seed"],
        dtype=cfg["train.dtype"],
        decoupled_wd=cfg["train.decoupled_wd"],
        use_kl=cfg["loss.kl"],
        use_cmc=cfg["loss.cmc"],
        w_ce=cfg["loss.w_ce"],
        w_kl=cfg["loss.w_kl"],
        w_cmc=cfg["loss.w_cmc"],
        eval_batch_size=cfg["train.eval_batch_size"],
        stats_max_images=cfg["train.stats_max_images"],
        on_decode_error=cfg["train.on_decode_error"],
    )
