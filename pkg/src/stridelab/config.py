"""Run configuration: one TOML document covering every module's parameters.

Unknown sections or keys are rejected so typos fail fast, and each loaded
config carries a content hash that is stamped into all outputs for
reproducibility checks.
"""

from __future__ import annotations

import copy
import hashlib
import json

try:
    import tomllib
except ImportError:             # Python 3.10
    import tomli as tomllib

from . import obs, rewards, trainer


class ConfigError(Exception):
    pass


def _defaults():
    ppo = trainer.PpoConfig()
    return {
        "run": {
            "mode": "sts",
            "seed": 0,
            "out_dir": "runs/default",
        },
        "ppo": {
            "gamma": ppo.gamma, "lam": ppo.lam, "clip": ppo.clip,
            "lr": ppo.lr, "epochs": ppo.epochs,
            "minibatches": ppo.minibatches,
            "entropy_coef": ppo.entropy_coef,
            "value_coef": ppo.value_coef, "grad_clip": ppo.grad_clip,
            "n_envs": ppo.n_envs, "horizon": ppo.horizon,
            "iterations": ppo.iterations, "kl_stop": ppo.kl_stop,
            "mirror_weight": ppo.mirror_weight,
            "lambda_max": ppo.lambda_max,
            "rec_lr": ppo.rec_lr, "rec_steps": ppo.rec_steps,
        },
        "noise": {
            "joint_pos": 0.01, "joint_vel": 0.5, "pitch_rate": 0.2,
            "gravity": 0.05, "heightmap": 0.02, "shift_prob": 0.1,
        },
        "rewards": {
            "h_target": 0.85,
            "weights": dict(rewards.RewardConfig().weights),
        },
        "perception": {
            "epochs": 30, "lr": 1e-3, "batch_size": 64, "ablation": "full",
            "dataset_episodes": 200, "frames_per_episode": 100,
            "dataset_seed": 0, "holdout_frac": 0.1,
        },
        "eval": {
            "distance": 6.0, "max_time": 30.0, "trials": 50,
        },
        "serve": {
            "port": 8787, "terrain": "flat", "level": 0,
        },
    }


def _merge(base, override, path=""):
    for key, value in override.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key: {here}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{here} must be a table")
            _merge(base[key], value, here)
        else:
            if isinstance(base[key], bool) != isinstance(value, bool):
                raise ConfigError(f"{here} has the wrong type")
            if isinstance(base[key], (int, float)) \
                    and not isinstance(value, (int, float)):
                raise ConfigError(f"{here} must be a number")
            if isinstance(base[key], str) and not isinstance(value, str):
                raise ConfigError(f"{here} must be a string")
            base[key] = value


def config_hash(data: dict) -> str:
    canon = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


class RunConfig:
    """Validated parameter document plus its content hash."""

    def __init__(self, data: dict):
        self.data = data
        self.hash = config_hash(data)

    def __getitem__(self, key):
        return self.data[key]

    @classmethod
    def default(cls) -> "RunConfig":
        return cls(_defaults())

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path, "rb") as fh:
            try:
                doc = tomllib.load(fh)
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError(f"bad TOML in {path}: {exc}") from exc
        data = copy.deepcopy(_defaults())
        _merge(data, doc)
        return cls(data)

    def ppo(self) -> trainer.PpoConfig:
        return trainer.PpoConfig(**self.data["ppo"])

    def noise(self) -> obs.NoiseModel:
        return obs.NoiseModel(**self.data["noise"])

    def reward_config(self) -> rewards.RewardConfig:
        sect = self.data["rewards"]
        return rewards.RewardConfig(weights=dict(sect["weights"]),
                                    h_target=sect["h_target"])

    def snapshot(self, path):
        """JSON snapshot stamped with the hash, written next to run outputs."""
        with open(path, "w") as fh:
            json.dump({"hash": self.hash, "config": self.data}, fh, indent=2,
                      sort_keys=True)
            fh.write("\n")
