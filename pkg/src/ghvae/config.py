"""Run configuration: a strict JSON document validated up front.

Unknown keys are rejected everywhere and the latent ladder is validated before
any work starts, so a bad config fails fast instead of half-way into a phase.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .model import LatentSpec, StackConfig, build_ladder


class ConfigError(ValueError):
    pass


@dataclass
class ImageCfg:
    height: int = 32
    width: int = 32
    channels: int = 1


@dataclass
class ModelCfg:
    c_hidden: list = field(default_factory=lambda: [16, 24, 32])
    c_latent: list = field(default_factory=lambda: [8, 12, 16])
    kernel_size: int = 3
    gn_groups: int = 4
    sigma_post: float = 0.1
    sigma_dec: float = 1.0
    beta: float = 1.0


@dataclass
class DataCfg:
    root: str = "data"
    train_episodes: int = 2000
    test_episodes: int = 32
    episode_length: int = 12
    n_sprites: int = 2
    sprite_size: int = 6
    agent_size: int = 4
    stochastic: bool = True


@dataclass
class TrainCfg:
    batch: int = 4
    horizon: int = 10
    context: int = 2
    lr: float = 2e-3
    steps_per_phase: list = field(default_factory=lambda: [1000])
    mode: str = "greedy"


@dataclass
class EvalCfg:
    horizon: int = 5
    samples: int = 10
    episodes: int = 32
    prior: str = "learned"


@dataclass
class PlanCfg:
    batch: int = 140
    horizon: int = 10
    cap: int = 50
    trials: int = 20
    region_size: int = 8
    model: str = "oracle"


@dataclass
class RunConfig:
    seed: int = 0
    action_dim: int = 2
    image: ImageCfg = field(default_factory=ImageCfg)
    model: ModelCfg = field(default_factory=ModelCfg)
    data: DataCfg = field(default_factory=DataCfg)
    train: TrainCfg = field(default_factory=TrainCfg)
    eval: EvalCfg = field(default_factory=EvalCfg)
    plan: PlanCfg = field(default_factory=PlanCfg)

    @property
    def depth(self) -> int:
        return len(self.model.c_hidden)

    def ladder(self) -> list[LatentSpec]:
        return build_ladder(self.image.height, self.image.width,
                            self.model.c_hidden, self.model.c_latent)

    def stack_config(self) -> StackConfig:
        return StackConfig(sigma_post=self.model.sigma_post, sigma_dec=self.model.sigma_dec,
                           beta=self.model.beta, kernel_size=self.model.kernel_size,
                           gn_groups=self.model.gn_groups)

    def steps_for_phase(self, k: int) -> int:
        steps = self.train.steps_per_phase
        if len(steps) == 1:
            return int(steps[0])
        if len(steps) != self.depth:
            raise ConfigError(
                f"steps_per_phase has {len(steps)} entries for {self.depth} phases")
        return int(steps[k - 1])

    def to_dict(self) -> dict:
        return asdict(self)


_SECTIONS = {"image": ImageCfg, "model": ModelCfg, "data": DataCfg,
             "train": TrainCfg, "eval": EvalCfg, "plan": PlanCfg}


def _build_section(cls, raw: dict, where: str):
    allowed = set(cls.__dataclass_fields__)
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in {where}")
    return cls(**raw)


def config_from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config document must be a JSON object")
    allowed = {"seed", "action_dim"} | set(_SECTIONS)
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {sorted(unknown)}")
    kwargs = {}
    for name, cls in _SECTIONS.items():
        section = raw.get(name, {})
        if not isinstance(section, dict):
            raise ConfigError(f"section {name!r} must be an object")
        kwargs[name] = _build_section(cls, section, f"section {name!r}")
    cfg = RunConfig(seed=int(raw.get("seed", 0)),
                    action_dim=int(raw.get("action_dim", 2)), **kwargs)
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    if cfg.action_dim not in (0, 2):
        raise ConfigError(f"action_dim must be 0 (action-free) or 2, got {cfg.action_dim}")
    try:
        cfg.ladder()
    except ValueError as e:
        raise ConfigError(f"invalid latent ladder: {e}") from e
    for ch in cfg.model.c_hidden:
        if ch % cfg.model.gn_groups:
            raise ConfigError(f"c_hidden={ch} not divisible by gn_groups={cfg.model.gn_groups}")
    if cfg.train.mode not in ("greedy", "e2e", "e2e_finetune"):
        raise ConfigError(f"train.mode must be greedy|e2e|e2e_finetune, got {cfg.train.mode!r}")
    if cfg.train.context < 1 or cfg.train.horizon < 1:
        raise ConfigError("train.context and train.horizon must be >= 1")
    need = cfg.train.context + cfg.train.horizon
    if cfg.data.episode_length < need:
        raise ConfigError(
            f"episode_length {cfg.data.episode_length} < context+horizon = {need}")
    if cfg.train.context + cfg.eval.horizon > cfg.data.episode_length:
        raise ConfigError("eval horizon plus context exceeds episode length")
    if cfg.eval.prior not in ("learned", "uniform"):
        raise ConfigError(f"eval.prior must be learned|uniform, got {cfg.eval.prior!r}")
    if cfg.model.sigma_post <= 0 or cfg.model.sigma_dec <= 0:
        raise ConfigError("sigma_post and sigma_dec must be positive")
    cfg.steps_for_phase(1)


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from e
    return config_from_dict(raw)
