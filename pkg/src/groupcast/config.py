"""Declarative run configuration.

INI-style text file with three sections: [dataset], [model], [training].
Unknown sections or keys are hard errors so stale configs fail loudly
instead of drifting.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field

from .data import ChargedConfig, HierSynthConfig
from .errors import ConfigError
from .training import TrainSettings

_DATASET_COMMON = {
    "kind": str,
    "seed": int,
}

_CHARGED_KEYS = {
    "n_particles": int, "t_in": int, "t_out": int,
    "train_scenes": int, "val_scenes": int, "test_scenes": int,
    "box_half_size": float, "strength": float, "step": float,
    "substeps": int, "softening": float, "noise": float,
    "charge_mode": str, "positive_prob": float, "initial_speed": float,
}

_HIER_KEYS = {
    "fanouts": str, "t_total": int, "horizon": int, "t_in": int,
    "class_level": int, "window_stride": int, "trend_scale": float,
    "season_period": float, "class_factor_scale": float, "noise": float,
}

_MODEL_KEYS = {
    "variant": str, "set_block": str, "inducing_points": int,
    "d_model": int, "n_heads": int, "n_layers": int, "d_kernel": int,
}

_TRAINING_KEYS = {
    "epochs": int, "batch_size": int, "lr": float, "loss": str,
    "precision": str, "seed": int,
}


@dataclass
class RunConfig:
    dataset_kind: str
    dataset_seed: int
    charged: ChargedConfig | None = None
    hier: HierSynthConfig | None = None
    counts: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)       # overrides for ModelConfig
    training: TrainSettings = field(default_factory=TrainSettings)
    precision: str = "f64"
    config_hash: str = ""

    def echo(self):
        out = {
            "dataset_kind": self.dataset_kind,
            "dataset_seed": self.dataset_seed,
            "counts": dict(self.counts),
            "model": dict(self.model),
            "training": self.training.to_dict(),
            "precision": self.precision,
            "config_hash": self.config_hash,
        }
        if self.charged is not None:
            out["charged"] = self.charged.to_dict()
        if self.hier is not None:
            out["hier"] = self.hier.to_dict()
        return out


def _typed(section, key, raw, caster):
    try:
        if caster is int:
            return int(raw)
        if caster is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as {caster.__name__}") from None


def _check_keys(parser, section, allowed):
    unknown = [k for k in parser[section] if k not in allowed]
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {', '.join(sorted(unknown))}")


def parse_config(path) -> RunConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        with open(path, encoding="utf-8") as fh:
            raw_text = fh.read()
        parser.read_string(raw_text)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from None

    known_sections = {"dataset", "model", "training"}
    unknown = set(parser.sections()) - known_sections
    if unknown:
        raise ConfigError(f"unknown config sections: {', '.join(sorted(unknown))}")
    if "dataset" not in parser:
        raise ConfigError("config needs a [dataset] section")

    ds = parser["dataset"]
    kind = ds.get("kind", "charged")
    counts = {}
    if kind == "charged":
        allowed = {**_DATASET_COMMON, **_CHARGED_KEYS}
        _check_keys(parser, "dataset", allowed)
        kwargs = {}
        for key, caster in _CHARGED_KEYS.items():
            if key in ds:
                val = _typed("dataset", key, ds[key], caster)
                if key.endswith("_scenes"):
                    counts[key[: -len("_scenes")]] = val
                else:
                    kwargs[key] = val
        charged, hier = ChargedConfig(**kwargs), None
    elif kind == "hier-synth":
        allowed = {**_DATASET_COMMON, **_HIER_KEYS}
        _check_keys(parser, "dataset", allowed)
        kwargs = {}
        for key, caster in _HIER_KEYS.items():
            if key in ds:
                val = _typed("dataset", key, ds[key], caster)
                if key == "fanouts":
                    try:
                        val = tuple(int(v) for v in str(val).split(","))
                    except ValueError:
                        raise ConfigError(f"[dataset] fanouts: expected comma-separated ints") from None
                kwargs[key] = val
        charged, hier = None, HierSynthConfig(**kwargs)
    else:
        raise ConfigError(f"unknown dataset kind {kind!r}; expected charged | hier-synth")
    dataset_seed = _typed("dataset", "seed", ds.get("seed", "0"), int)

    model = {}
    if "model" in parser:
        _check_keys(parser, "model", _MODEL_KEYS)
        for key, caster in _MODEL_KEYS.items():
            if key in parser["model"]:
                model[key] = _typed("model", key, parser["model"][key], caster)
        if model.get("n_layers", 1) < 1:
            raise ConfigError("[model] n_layers must be >= 1")

    training = TrainSettings()
    precision = "f64"
    if "training" in parser:
        _check_keys(parser, "training", _TRAINING_KEYS)
        tr = parser["training"]
        kwargs = {}
        for key, caster in _TRAINING_KEYS.items():
            if key in tr:
                val = _typed("training", key, tr[key], caster)
                if key == "precision":
                    if val not in ("f32", "f64"):
                        raise ConfigError("[training] precision must be f32 or f64")
                    precision = val
                else:
                    kwargs[key] = val
        training = TrainSettings(**kwargs)

    return RunConfig(
        dataset_kind=kind,
        dataset_seed=dataset_seed,
        charged=charged,
        hier=hier,
        counts=counts,
        model=model,
        training=training,
        precision=precision,
        config_hash=hashlib.sha256(raw_text.encode()).hexdigest()[:16],
    )
