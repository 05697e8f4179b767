"""Run configuration: presets, YAML overrides, per-stage hashing."""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

PRESETS = ("desk", "paper")

_DESK = {
    "world": {"preset": "default"},
    "agents": {"client": "mock", "endpoint": None, "model": None, "sample_size": 8, "max_retries": 2,
               "max_workers": 4, "cache_dir": None},
    "encode": {"dim": 32, "encoder_seed": 0},
    "tokenizer": {"d_prime": 8, "levels": 3, "codebook_size": 64, "beta": 0.25, "epochs": 60,
                  "batch_size": 128, "learning_rate": 0.003},
    "locator": {"tau_time": "auto", "tau_time_quantile": 0.95, "n_rank": 50, "tau_coh": 0.02,
                "scheme": "TD_AND_CD", "cooc_window": 5, "cooc_decay": 0.8},
    "dllm": {"d_model": 32, "n_layers": 2, "n_heads": 4, "ff_mult": 2, "max_seq_len": 64, "temperature": 0.07,
             "batch_size": 64, "steps": 2000, "learning_rate": 0.0075, "warmup_steps": 100,
             "max_grad_norm": 1.0, "t_conditioning": "none", "loss_normalizer": "labeled",
             "variants": ["INFONCE_COS", "COS_POINTWISE", "MSE_POINTWISE"], "heldout_frac": 0.2},
    "ranker": {"d_e": 8, "d_f": 4, "d_s": 8, "n_heads": 2, "n_retrieve": 16, "n_anchors": 4,
               "mlp_hidden": [128, 64], "max_history": 64, "epochs": 8, "batch_size": 256,
               "learning_rate": 0.003, "test_frac": 0.2},
    "eval": {"hr_k": [1, 5, 10], "sm_hr_k": [1, 5]},
}

# values stated for the full-scale model; everything else inherits desk values
_PAPER = {
    "encode": {"dim": 128},
    "dllm": {"d_model": 128, "n_layers": 4, "n_heads": 8, "batch_size": 3200, "learning_rate": 0.0075,
             "temperature": 0.07},
    "ranker": {"max_history": 500},
}

# stage -> config sections it depends on
STAGE_SECTIONS = {
    "gen-world": ("world",),
    "agents": ("agents",),
    "encode": ("encode",),
    "tokenize": ("tokenizer",),
    "locate": ("locator",),
    "train-dllm": ("dllm",),
    "fill": (),
    "train-ranker": ("ranker",),
    "eval": ("eval",),
    "report": (),
}


class ConfigError(ValueError):
    pass


def _world_keys() -> set[str]:
    from .worldgen import WorldConfig
    return {f.name for f in fields(WorldConfig)} - {"seed"}


def _merge(base: dict, over: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        # world keys are sparse overrides of the chosen world preset
        if where == "world." and k in _world_keys():
            out[k] = v
            continue
        if k not in out:
            raise ConfigError(f"unknown config key {where}{k}")
        if isinstance(out[k], dict) and isinstance(v, dict):
            out[k] = _merge(out[k], v, f"{where}{k}.")
        else:
            out[k] = v
    return out


def preset_tree(name: str) -> dict:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {PRESETS}")
    tree = copy.deepcopy(_DESK)
    if name == "paper":
        tree = _merge(tree, _PAPER)
    return tree


@dataclass
class RunConfig:
    preset: str = "desk"
    seed: int = 0
    out: Path = Path("runs/default")
    sections: dict = field(default_factory=lambda: preset_tree("desk"))

    def __getitem__(self, section: str) -> dict:
        return self.sections[section]

    def stage_hash(self, stage: str) -> str:
        payload = {"seed": self.seed, "preset": self.preset,
                   "sections": {s: self.sections[s] for s in STAGE_SECTIONS[stage]}}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()

    def to_dict(self) -> dict:
        return {"preset": self.preset, "seed": self.seed, **copy.deepcopy(self.sections)}

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)


def load_config(path: str | Path | None = None, preset: str | None = None, seed: int | None = None,
                out: str | Path | None = None, overrides: dict | None = None) -> RunConfig:
    """Preset defaults, then the YAML file, then explicit arguments."""
    raw = {}
    if path is not None:
        with open(path, encoding="utf-8") as f:
            raw = yaml.safe_load(f) or {}
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    raw = dict(raw)
    name = preset or raw.pop("preset", None) or "desk"
    raw.pop("preset", None)
    file_seed = raw.pop("seed", 0)
    file_out = raw.pop("out", None)
    tree = _merge(preset_tree(name), raw)
    if overrides:
        tree = _merge(tree, overrides)
    cfg = RunConfig(preset=name, seed=int(file_seed if seed is None else seed),
                    out=Path(out or file_out or f"runs/{name}"), sections=tree)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    d = cfg["dllm"]
    if not d["variants"]:
        raise ConfigError("dllm.variants must name at least one loss variant")
    if d["d_model"] % d["n_heads"]:
        raise ConfigError(f"dllm.d_model {d['d_model']} not divisible by dllm.n_heads {d['n_heads']}")
    if not 0 < d["heldout_frac"] < 1:
        raise ConfigError("dllm.heldout_frac must lie in (0, 1)")
    loc = cfg["locator"]
    if loc["tau_time"] != "auto" and float(loc["tau_time"]) <= 0:
        raise ConfigError("locator.tau_time must be 'auto' or > 0")
    if cfg["agents"]["client"] not in ("mock", "http"):
        raise ConfigError("agents.client must be 'mock' or 'http'")
    if cfg["agents"]["client"] == "http" and not cfg["agents"]["endpoint"]:
        raise ConfigError("agents.client 'http' needs agents.endpoint")
