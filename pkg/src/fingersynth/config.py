"""Run configuration: line-oriented key/value files with section headers.

A run file is INI-shaped. `[run] task` picks the pipeline; `[model] name`
may select one of the named model presets, which fills every published
hyperparameter row for that model as a default; explicit keys override
presets. Unknown sections or keys are rejected with field-level messages,
and the effective configuration (after presets and overrides) serializes
back to a frozen copy so every recorded value matches what ran.
"""

from __future__ import annotations

import configparser
import io
import os
from dataclasses import dataclass, field

from .errors import ConfigurationError

TASKS = (
    "train-ddpm",
    "train-wgan",
    "train-cycle",
    "sample",
    "translate",
    "evaluate",
    "far-analysis",
    "spoof-hist",
    "synth-data",
)

ENV_OUT_DIR = "FINGERSYNTH_OUT"


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(part) for part in text.split(",") if part.strip())


def _str_list(text: str) -> tuple[str, ...]:
    items = tuple(part.strip() for part in text.split(",") if part.strip())
    return () if items == ("none",) else items


def _float_list(text: str) -> tuple[float, ...]:
    return tuple(float(part) for part in text.split(",") if part.strip())


# Schema: section -> key -> (caster, default). None defaults mean "unset".
SCHEMA: dict[str, dict[str, tuple]] = {
    "run": {
        "task": (str, None),
        "seed": (int, 0),
        "out_dir": (str, None),
    },
    "model": {
        "name": (str, None),
        "variant": (str, "resnet_attention"),
        "image_size": (int, 112),
        "channels": (_int_list, (32, 64, 128)),
        "time_embed_dim": (int, 64),
        "blocks_per_level": (int, 2),
        "groups": (int, 8),
        "time_embedding": (str, "sinusoidal"),
    },
    "schedule": {
        "kind": (str, "linear"),
        "time_steps": (int, 1000),
        "noise_min": (float, 1e-5),
        "noise_max": (float, 1e-2),
        "cosine_offset": (float, 0.008),
    },
    "train": {
        "batch_size": (int, 64),
        "learning_rate": (float, 1e-4),
        "epochs": (int, 500),
        "loss": (str, "mse"),
        "huber_delta": (float, 1.0),
        "optimizer": (str, "adam"),
        "checkpoint_every": (int, 50),
        "augment": (_str_list, ()),
    },
    "gan": {
        "latent_dim": (int, 128),
        "gen_base": (int, 64),
        "critic_base": (int, 64),
        "lambda_gp": (float, 10.0),
        "n_critic": (int, 5),
        "beta1": (float, 0.5),
    },
    "cycle": {
        "base": (int, 64),
        "n_blocks": (int, 6),
        "critic_base": (int, 64),
        "lambda_cycle": (float, 10.0),
        "lambda_identity": (float, 0.5),
        "lambda_gp": (float, 10.0),
        "beta1": (float, 0.5),
        "epochs_constant": (int, 100),
        "epochs_decay": (int, 100),
        "n_critic": (int, 5),
    },
    "data": {
        "dataset": (str, "synthetic"),
        "dataset_b": (str, None),
        "pad_to": (int, None),
        "n": (int, 512),
        "n_fingers": (int, 64),
        "frequency": (float, 0.11),
        "orientation_scale": (float, 10.0),
        "n_singularities": (int, 0),
        "noise_level": (float, 0.08),
        "contrast": (float, 2.0),
        "holdout_fraction": (float, 0.2),
        "spoof_corruption": (_bool, False),
        "condition": (str, "live"),
    },
    "sample": {
        "checkpoint": (str, None),
        "n": (int, 64),
        "batch": (int, 64),
        "grid_cols": (int, 8),
    },
    "translate": {
        "checkpoint": (str, None),
        "direction": (str, "ab"),
    },
    "evaluate": {
        "extractor": (str, "pixel_pca"),
        "n_components": (int, 24),
        "k": (int, 5),
        "kid_subset_size": (int, 100),
        "kid_subsets": (int, 10),
    },
    "far": {
        "n_pairs": (int, 100_000),
        "baseline_fars": (_float_list, (1e-2, 1e-3, 1e-4)),
        "synthetic_dataset": (str, None),
        "max_shift": (int, 8),
        "max_rotation": (float, 15.0),
    },
    "spoof": {
        "live_dataset": (str, None),
        "spoof_dataset": (str, None),
        "eval_datasets": (_str_list, ()),
        "bins": (int, 20),
        "scorer_epochs": (int, 12),
    },
}

# Published per-model hyperparameter rows (appendix tables), keyed as
# (section, key) -> value strings fed through the normal casters.
MODEL_PRESETS: dict[str, dict[tuple[str, str], str]] = {
    "vDDPM-v1": {
        ("model", "variant"): "vanilla",
        ("model", "image_size"): "112",
        ("model", "time_embedding"): "sinusoidal",
        ("schedule", "kind"): "linear",
        ("schedule", "time_steps"): "1000",
        ("schedule", "noise_min"): "1e-5",
        ("schedule", "noise_max"): "1e-2",
        ("train", "batch_size"): "64",
        ("train", "learning_rate"): "1e-4",
        ("train", "epochs"): "500",
        ("train", "loss"): "mse",
        ("train", "optimizer"): "adam",
    },
    "DDPM-v2": {
        ("model", "variant"): "resnet_attention",
        ("model", "image_size"): "112",
        ("model", "time_embedding"): "sinusoidal",
        ("schedule", "kind"): "cosine",
        ("schedule", "time_steps"): "1000",
        ("schedule", "noise_min"): "1e-5",
        ("schedule", "noise_max"): "1e-2",
        ("train", "batch_size"): "64",
        ("train", "learning_rate"): "1e-4",
        ("train", "epochs"): "500",
        ("train", "loss"): "huber",
        ("train", "optimizer"): "adam",
    },
    "WGAN-GP-v1": {
        ("model", "image_size"): "112",
        ("gan", "latent_dim"): "128",
        ("gan", "lambda_gp"): "10.0",
        ("gan", "n_critic"): "5",
        ("gan", "beta1"): "0.5",
        ("train", "batch_size"): "64",
        ("train", "learning_rate"): "1e-4",
        ("train", "epochs"): "500",
        ("train", "optimizer"): "adam",
    },
    "CycleWGAN-GP": {
        ("model", "image_size"): "128",
        ("cycle", "lambda_cycle"): "10.0",
        ("cycle", "lambda_identity"): "0.5",
        ("cycle", "lambda_gp"): "10.0",
        ("cycle", "beta1"): "0.5",
        ("train", "batch_size"): "1",
        ("train", "learning_rate"): "2e-4",
        ("train", "epochs"): "500",
        ("train", "optimizer"): "adam",
    },
}
MODEL_PRESETS["DDPM-Conv"] = dict(MODEL_PRESETS["DDPM-v2"]) | {("model", "variant"): "convnext"}
MODEL_PRESETS["DDPM-Aug"] = dict(MODEL_PRESETS["DDPM-v2"]) | {
    ("train", "augment"): "hflip,rotate,jitter,translate",
}

_ALLOWED = {
    ("run", "task"): TASKS,
    ("model", "variant"): ("vanilla", "resnet_attention", "convnext"),
    ("model", "time_embedding"): ("sinusoidal",),
    ("schedule", "kind"): ("linear", "cosine"),
    ("train", "loss"): ("mse", "huber", "wasserstein"),
    ("train", "optimizer"): ("adam",),
    ("translate", "direction"): ("ab", "ba"),
    ("evaluate", "extractor"): ("pixel_pca", "small_cnn", "inception"),
}


@dataclass
class RunConfig:
    values: dict[str, dict[str, object]] = field(default_factory=dict)
    source_path: str | None = None

    def get(self, section: str, key: str):
        return self.values[section][key]

    @property
    def task(self) -> str:
        return self.values["run"]["task"]

    @property
    def seed(self) -> int:
        return self.values["run"]["seed"]

    @property
    def out_dir(self) -> str:
        return self.values["run"]["out_dir"]

    def to_ini(self) -> str:
        """Deterministic dump of every effective value (the frozen record)."""
        out = io.StringIO()
        for section in SCHEMA:
            out.write(f"[{section}]\n")
            for key in SCHEMA[section]:
                v = self.values[section][key]
                if v is None:
                    rendered = ""
                elif isinstance(v, tuple):
                    rendered = ",".join(repr(x) if isinstance(x, float) else str(x) for x in v)
                elif isinstance(v, bool):
                    rendered = "true" if v else "false"
                elif isinstance(v, float):
                    rendered = repr(v)
                else:
                    rendered = str(v)
                out.write(f"{key} = {rendered}\n")
            out.write("\n")
        return out.getvalue()


def _cast(section: str, key: str, raw: str):
    caster, _ = SCHEMA[section][key]
    try:
        value = caster(raw)
    except (ValueError, TypeError) as exc:
        raise ConfigurationError(f"[{section}] {key}: cannot parse {raw!r} ({exc})") from exc
    allowed = _ALLOWED.get((section, key))
    if allowed and value not in allowed:
        raise ConfigurationError(f"[{section}] {key}: {value!r} not one of {allowed}")
    return value


def parse_config(text_or_path, overrides: dict[tuple[str, str], str] | None = None,
                 default_task: str | None = None) -> RunConfig:
    """Parse, apply model presets and overrides, validate, and freeze defaults.

    `default_task` supplies [run] task when the file omits it (the CLI
    subcommand name); a conflicting explicit task is a configuration error.
    """
    source_path = None
    if os.path.exists(str(text_or_path)):
        source_path = str(text_or_path)
        with open(text_or_path, "r", encoding="utf-8") as f:
            text = f.read()
    else:
        text = str(text_or_path)

    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigurationError(f"config does not parse: {exc}") from exc

    raw: dict[tuple[str, str], str] = {}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigurationError(f"unknown section [{section}]; known: {tuple(SCHEMA)}")
        for key, value in parser.items(section):
            if key not in SCHEMA[section]:
                raise ConfigurationError(f"[{section}] {key}: unknown key; known: {tuple(SCHEMA[section])}")
            if value.strip() == "":  # blank = unset, so frozen dumps round-trip
                continue
            raw[(section, key)] = value

    if ("run", "task") not in raw:
        if default_task is None:
            raise ConfigurationError("[run] task: missing (required)")
        raw[("run", "task")] = default_task
    elif default_task is not None and raw[("run", "task")] != default_task:
        raise ConfigurationError(
            f"[run] task: config says {raw[('run', 'task')]!r} but the command requested {default_task!r}"
        )

    model_name = raw.get(("model", "name"))
    preset: dict[tuple[str, str], str] = {}
    if model_name:
        if model_name not in MODEL_PRESETS:
            raise ConfigurationError(f"[model] name: unknown model {model_name!r}; known: {tuple(MODEL_PRESETS)}")
        preset = MODEL_PRESETS[model_name]

    cfg = RunConfig(source_path=source_path)
    for section, keys in SCHEMA.items():
        cfg.values[section] = {}
        for key, (_, default) in keys.items():
            if overrides and (section, key) in overrides:
                cfg.values[section][key] = _cast(section, key, overrides[(section, key)])
            elif (section, key) in raw:
                cfg.values[section][key] = _cast(section, key, raw[(section, key)])
            elif (section, key) in preset:
                cfg.values[section][key] = _cast(section, key, preset[(section, key)])
            else:
                cfg.values[section][key] = default

    env_out = os.environ.get(ENV_OUT_DIR)
    if env_out and (overrides is None or ("run", "out_dir") not in overrides):
        cfg.values["run"]["out_dir"] = env_out
    if cfg.values["run"]["out_dir"] is None:
        cfg.values["run"]["out_dir"] = os.path.join("runs", cfg.task)
    if cfg.values["data"]["pad_to"] is None:
        cfg.values["data"]["pad_to"] = cfg.values["model"]["image_size"]

    _validate(cfg)
    return cfg


def _require(cfg: RunConfig, section: str, key: str):
    if cfg.values[section][key] in (None, ""):
        raise ConfigurationError(f"[{section}] {key}: required for task {cfg.task!r}")


def _validate(cfg: RunConfig) -> None:
    if cfg.task not in TASKS:
        raise ConfigurationError(f"[run] task: {cfg.task!r} not one of {TASKS}")
    if cfg.values["schedule"]["time_steps"] < 1:
        raise ConfigurationError("[schedule] time_steps: must be >= 1")
    if cfg.task == "sample":
        _require(cfg, "sample", "checkpoint")
    if cfg.task == "translate":
        _require(cfg, "translate", "checkpoint")
        _require(cfg, "data", "dataset")
    if cfg.task == "evaluate":
        _require(cfg, "data", "dataset")
        _require(cfg, "data", "dataset_b")
    if cfg.task == "far-analysis":
        _require(cfg, "far", "synthetic_dataset")
    if cfg.task == "train-cycle" and cfg.values["data"]["dataset"] != "synthetic":
        _require(cfg, "data", "dataset_b")
    if cfg.task == "spoof-hist":
        _require(cfg, "spoof", "live_dataset")
        _require(cfg, "spoof", "spoof_dataset")
