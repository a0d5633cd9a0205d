"""Run configuration: one JSON document, every field defaulted.

Section layout mirrors the pipeline: data synthesis, the two training
stages, decoding policy, editing knobs, and evaluation. Unknown keys
are rejected loudly (typos in config files must not silently fall back
to defaults). The resolved document's hash is stamped into every
artifact a run produces, so outputs are replayable byte-for-byte from
(config, seed).
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

from .evaluation import FeatureExtractorConfig
from .generate import SamplingStrategy, ScheduleConfig
from .motiondata import DataConfig
from .tokenizer import TokenizerConfig, TokenizerTrainConfig
from .transformer import TransformerConfig, TransformerTrainConfig


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "data": {
        "n_items": 2000,
        "n_joints": 4,
        "fps": 20.0,
        "min_len": 40,
        "max_len": 196,
        "downsample": 4,
        "max_verbs": 3,
        "noise": 0.02,
        "split": [0.8, 0.05, 0.15],
    },
    # desk-scale stage-1 defaults; the paper-scale codebook (8192 x 32)
    # is a config change away
    "tokenizer": {
        "K": 512,
        "d_lookup": 8,
        "d_model": 96,
        "downsample": 4,
        "beta_commit": 0.25,
        "ema_decay": 0.99,
        "reset_every": 20,
        "reset_threshold": 1,
        "ema_eps": 1e-5,
        "l2_normalize_lookup": False,
        "steps": 3000,
        "batch_size": 32,
        "window": 40,
        "lr": 2e-3,
        "diff_weight": 1.0,
        "log_every": 200,
    },
    "transformer": {
        "layers": 6,
        "n_cross_attn": 1,
        "heads": 4,
        "d_model": 128,
        "alpha": 0.5,
        "dropout": 0.0,
        "max_tokens": 49,
        "ffn_mult": 4,
        "max_words": 24,
        "steps": 3000,
        "batch_size": 32,
        "lr": 3e-4,
        "length_weight": 0.1,
        "loss_all_positions": False,
        "eval_every": 500,
        "eval_sequences": 128,
    },
    "schedule": {"kind": "cosine", "T": 10, "M": 49},
    "sampling": {
        "kind": "temperature",
        "beta": 1.0,
        "k_frac": 1.0,
        "p": 1.0,
        "confidence_noise": 0.0,
    },
    "editing": {
        "transition_tokens": 4,
        "transition_context": 6,
        "rho": 0.1,
        "lower_keep_fraction": 1.0,
    },
    "eval": {
        "max_items": 64,
        "mmodality_prompts": 4,
        "mmodality_pairs": 4,
        "feature_hidden": 48,
        "feature_dim": 32,
        "feature_kernel": 5,
        "feature_steps": 400,
    },
}


def _merge(base: dict, override: dict, path: str = ""):
    for key, value in override.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key: {here}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{here} must be a section object")
            _merge(base[key], value, here)
        else:
            base[key] = value


def resolve(config_path=None, overrides: dict | None = None) -> dict:
    """DEFAULTS <- config file <- dotted-path overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    if config_path:
        doc = json.loads(Path(config_path).read_text(encoding="utf-8"))
        if not isinstance(doc, dict):
            raise ConfigError("config file must hold a JSON object")
        _merge(cfg, doc)
    for dotted, value in (overrides or {}).items():
        section = cfg
        parts = dotted.split(".")
        for part in parts[:-1]:
            if part not in section or not isinstance(section[part], dict):
                raise ConfigError(f"unknown config key: {dotted}")
            section = section[part]
        if parts[-1] not in section:
            raise ConfigError(f"unknown config key: {dotted}")
        section[parts[-1]] = value
    return cfg


def config_hash(cfg: dict) -> str:
    canonical = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


# section -> dataclass adapters


def data_config(cfg: dict) -> DataConfig:
    d = cfg["data"]
    return DataConfig(
        n_joints=d["n_joints"], fps=d["fps"], min_len=d["min_len"],
        max_len=d["max_len"], downsample=d["downsample"],
        max_verbs=d["max_verbs"], noise=d["noise"], split=tuple(d["split"]),
    )


def tokenizer_config(cfg: dict) -> TokenizerConfig:
    t = cfg["tokenizer"]
    return TokenizerConfig(
        K=t["K"], d_lookup=t["d_lookup"], d_model=t["d_model"],
        downsample=t["downsample"], beta_commit=t["beta_commit"],
        ema_decay=t["ema_decay"], reset_every=t["reset_every"],
        reset_threshold=t["reset_threshold"], ema_eps=t["ema_eps"],
        l2_normalize_lookup=t["l2_normalize_lookup"],
    )


def tokenizer_train_config(cfg: dict) -> TokenizerTrainConfig:
    t = cfg["tokenizer"]
    return TokenizerTrainConfig(
        steps=t["steps"], batch_size=t["batch_size"], window=t["window"],
        lr=t["lr"], diff_weight=t["diff_weight"], log_every=t["log_every"],
    )


def transformer_config(cfg: dict) -> TransformerConfig:
    t = cfg["transformer"]
    return TransformerConfig(
        layers=t["layers"], n_cross_attn=t["n_cross_attn"], heads=t["heads"],
        d_model=t["d_model"], alpha=t["alpha"], dropout=t["dropout"],
        max_tokens=t["max_tokens"], ffn_mult=t["ffn_mult"],
        max_words=t["max_words"],
    )


def transformer_train_config(cfg: dict) -> TransformerTrainConfig:
    t = cfg["transformer"]
    return TransformerTrainConfig(
        steps=t["steps"], batch_size=t["batch_size"], lr=t["lr"],
        length_weight=t["length_weight"],
        loss_all_positions=t["loss_all_positions"],
        eval_every=t["eval_every"], eval_sequences=t["eval_sequences"],
    )


def schedule_config(cfg: dict) -> ScheduleConfig:
    s = cfg["schedule"]
    return ScheduleConfig(kind=s["kind"], T=s["T"], M=s["M"])


def sampling_strategy(cfg: dict) -> SamplingStrategy:
    s = cfg["sampling"]
    return SamplingStrategy(kind=s["kind"], beta=s["beta"], k_frac=s["k_frac"],
                            p=s["p"], confidence_noise=s["confidence_noise"])


def feature_extractor_config(cfg: dict) -> FeatureExtractorConfig:
    e = cfg["eval"]
    return FeatureExtractorConfig(hidden=e["feature_hidden"],
                                  feature_dim=e["feature_dim"],
                                  kernel=e["feature_kernel"])
