"""Training/evaluation configuration and keyed-file loading (JSON or TOML)."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

from .errors import ConfigError
from .losses import CircleLossParams
from .scenegen import SceneConfig


@dataclass(frozen=True)
class TrainConfig:
    """Everything the trainer needs; ablation flags toggle modules
    independently (BL / M1 / M2 / M3 / full)."""

    steps: int = 1200
    batch_size: int = 1
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    feat_dim: int = 16
    hidden_dim: int = 32
    n_nodes: int = 24

    gamma_sig: float | None = None  # None: half the initial entropy sum
    lambda_grl: float = 0.01
    variance_floor: float = 1e-6
    k: int = 3
    k_f: int = 2

    delta_p: float = 0.1
    delta_n: float = 1.4
    gamma_circle: float = 10.0
    lambda_p: float = 1.0
    lambda_n: float = 1.0
    neg_ratio: int = 4
    max_fine_anchors: int = 96

    dist_thresh: float = 0.05  # meters, supervision correspondences
    overlap_min: float = 0.3  # patch positivity fraction
    loss_weights: tuple = (1.0, 1.0, 1.0, 1.0)

    enable_uncertainty: bool = True
    enable_interaction: bool = True
    enable_amam: bool = True

    val_every: int = 200
    snapshot_every: int = 200

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("steps must be >= 0 and batch_size >= 1")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be nonnegative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("moment decays must lie in [0, 1)")
        if self.lambda_grl <= 0:
            raise ConfigError("lambda_grl must be positive")
        if self.n_nodes < 1 or self.k < 1 or self.k_f < 1:
            raise ConfigError("n_nodes, k and k_f must be >= 1")
        if len(self.loss_weights) != 4:
            raise ConfigError("loss_weights needs exactly four entries")
        object.__setattr__(self, "loss_weights", tuple(self.loss_weights))

    def circle_params(self):
        return CircleLossParams(
            delta_p=self.delta_p,
            delta_n=self.delta_n,
            gamma=self.gamma_circle,
            lambda_p=self.lambda_p,
            lambda_n=self.lambda_n,
        )

    def hash(self):
        payload = json.dumps(asdict(self), sort_keys=True).encode("utf-8")
        return hashlib.sha256(payload).hexdigest()


def _dataclass_from_dict(cls, data, where):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    return cls(**data)


def load_config_file(path):
    """Parse a JSON or TOML keyed config file into a plain dict."""
    path = str(path)
    if path.endswith(".json"):
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    if path.endswith(".toml"):
        try:
            import tomllib as toml_loader  # py >= 3.11
        except ModuleNotFoundError:
            import tomli as toml_loader
        with open(path, "rb") as fh:
            return toml_loader.load(fh)
    raise ConfigError(f"config file must be .json or .toml, got {path!r}")


@dataclass
class RunConfig:
    """Top-level keyed config: scene, train, and optional ransac sections."""

    scene: SceneConfig = field(default_factory=SceneConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ransac: dict = field(default_factory=dict)
    train_seeds: tuple = (0, 200)  # [start, stop) scene seeds
    val_seeds: tuple = (10_000, 10_025)
    test_seeds: tuple = (20_000, 20_050)

    @classmethod
    def from_file(cls, path):
        raw = load_config_file(path)
        return cls.from_dict(raw, where=str(path))

    @classmethod
    def from_dict(cls, raw, where="config"):
        scene = _dataclass_from_dict(SceneConfig, raw.get("scene", {}), "scene")
        train = _dataclass_from_dict(TrainConfig, raw.get("train", {}), "train")
        splits = {}
        for key in ("train_seeds", "val_seeds", "test_seeds"):
            if key in raw:
                lo, hi = raw[key]
                splits[key] = (int(lo), int(hi))
        cfg = cls(scene=scene, train=train, ransac=dict(raw.get("ransac", {})), **splits)
        cfg.validate_splits()
        return cfg

    def validate_splits(self):
        ranges = [self.train_seeds, self.val_seeds, self.test_seeds]
        for lo, hi in ranges:
            if hi <= lo:
                raise ConfigError(f"empty seed range {(lo, hi)}")
        for i, a in enumerate(ranges):
            for b in ranges[i + 1 :]:
                if a[0] < b[1] and b[0] < a[1]:
                    raise ConfigError(
                        f"seed ranges {a} and {b} overlap; splits must be disjoint"
                    )
