"""Stochastic sprite world: a pushable 2-D toy environment and its episode formats.

The world is a square frame with grayscale sprites that drift and an agent that
pushes anything it overlaps. It stands in for large robot-interaction corpora
at desk scale: actions are planar translations, stochasticity comes from each
sprite occasionally resampling its drift velocity.

Episode container on disk: a directory holding manifest.json, frames.bin
(rank-4 tensor, L x H x W x C) and, when action-conditioned, actions.bin
(rank-2, (L-1) x action_dim). A dataset is a directory of episode
subdirectories plus an index.json.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .rng import make_rng, splitmix64
from .tensor import FormatError, load_tensor, save_tensor

ACTION_LOW, ACTION_HIGH = -2.0, 2.0
DRIFT_RESAMPLE_PROB = 0.1
DRIFT_SCALE = 1.0


@dataclass(frozen=True)
class Sprite:
    x: float
    y: float
    size: int
    gray: float
    vx: float = 0.0
    vy: float = 0.0


@dataclass
class WorldState:
    """Value-semantics world snapshot; ``step`` returns a new state."""

    height: int
    width: int
    agent_x: float
    agent_y: float
    agent_size: int
    sprites: tuple[Sprite, ...]
    stochastic: bool
    rng_state: dict = field(default_factory=dict)

    def rng(self) -> np.random.Generator:
        g = np.random.Generator(np.random.PCG64())
        g.bit_generator.state = self.rng_state
        return g


def make_world(height: int, width: int, n_sprites: int, sprite_size: int, agent_size: int,
               stochastic: bool, rng: np.random.Generator, drift: bool = True) -> WorldState:
    """Random initial state. Sprites get distinct gray levels away from the background."""
    sprites = []
    grays = np.linspace(0.35, 0.75, max(n_sprites, 1))
    for i in range(n_sprites):
        sprites.append(Sprite(
            x=float(rng.uniform(0, width - sprite_size)),
            y=float(rng.uniform(0, height - sprite_size)),
            size=sprite_size,
            gray=float(grays[i]),
            vx=float(rng.uniform(-DRIFT_SCALE, DRIFT_SCALE)) if drift else 0.0,
            vy=float(rng.uniform(-DRIFT_SCALE, DRIFT_SCALE)) if drift else 0.0,
        ))
    return WorldState(
        height=height, width=width,
        agent_x=float(rng.uniform(0, width - agent_size)),
        agent_y=float(rng.uniform(0, height - agent_size)),
        agent_size=agent_size,
        sprites=tuple(sprites),
        stochastic=stochastic,
        rng_state=rng.bit_generator.state,
    )


def _overlap(ax, ay, asz, bx, by, bsz) -> bool:
    return ax < bx + bsz and bx < ax + asz and ay < by + bsz and by < ay + asz


def step(state: WorldState, action) -> WorldState:
    """Advance one tick: agent translates, pushes overlapped sprites, sprites drift."""
    dx = float(np.clip(action[0], ACTION_LOW, ACTION_HIGH))
    dy = float(np.clip(action[1], ACTION_LOW, ACTION_HIGH))
    w, h = state.width, state.height
    ax = float(np.clip(state.agent_x + dx, 0, w - 1))
    ay = float(np.clip(state.agent_y + dy, 0, h - 1))

    rng = state.rng()
    sprites = []
    for s in state.sprites:
        sx, sy, vx, vy = s.x, s.y, s.vx, s.vy
        if _overlap(ax, ay, state.agent_size, sx, sy, s.size):
            sx = float(np.clip(sx + dx, 0, w - 1))
            sy = float(np.clip(sy + dy, 0, h - 1))
        if state.stochastic and rng.random() < DRIFT_RESAMPLE_PROB:
            vx = float(rng.uniform(-DRIFT_SCALE, DRIFT_SCALE))
            vy = float(rng.uniform(-DRIFT_SCALE, DRIFT_SCALE))
        else:
            sx = float(np.clip(sx + vx, 0, w - 1))
            sy = float(np.clip(sy + vy, 0, h - 1))
        sprites.append(replace(s, x=sx, y=sy, vx=vx, vy=vy))

    return WorldState(height=h, width=w, agent_x=ax, agent_y=ay, agent_size=state.agent_size,
                      sprites=tuple(sprites), stochastic=state.stochastic,
                      rng_state=rng.bit_generator.state)


def _draw_square(frame: np.ndarray, x: float, y: float, size: int, value: float) -> None:
    h, w = frame.shape[:2]
    x0, y0 = int(round(x)), int(round(y))
    xs, xe = max(x0, 0), min(x0 + size, w)
    ys, ye = max(y0, 0), min(y0 + size, h)
    if xs < xe and ys < ye:
        frame[ys:ye, xs:xe, :] = value


def render(state: WorldState, channels: int = 1) -> np.ndarray:
    """Rasterize: zero background, sprites at their gray levels, agent last at 1.0."""
    frame = np.zeros((state.height, state.width, channels), dtype=np.float32)
    for s in state.sprites:
        _draw_square(frame, s.x, s.y, s.size, s.gray)
    _draw_square(frame, state.agent_x, state.agent_y, state.agent_size, 1.0)
    return frame


@dataclass
class Episode:
    frames: np.ndarray                 # [L, H, W, C] float32 in [0, 1]
    actions: Optional[np.ndarray]      # [L-1, action_dim] or None
    seed: int
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.actions is not None and len(self.actions) != len(self.frames) - 1:
            raise ValueError(
                f"episode has {len(self.frames)} frames but {len(self.actions)} actions")


@dataclass
class GenConfig:
    episodes: int
    length: int
    height: int = 32
    width: int = 32
    channels: int = 1
    n_sprites: int = 2
    sprite_size: int = 6
    agent_size: int = 4
    action_conditioned: bool = True
    stochastic: bool = True
    seed: int = 0


def simulate_episode(cfg: GenConfig, episode_seed: int) -> Episode:
    rng = make_rng(episode_seed)
    state = make_world(cfg.height, cfg.width, cfg.n_sprites, cfg.sprite_size,
                       cfg.agent_size, cfg.stochastic, rng)
    # actions are always sampled so the world moves; they are stored only in
    # action-conditioned mode (otherwise the agent's motion is pure stochasticity)
    action_rng = make_rng(episode_seed, index=7)
    frames = np.empty((cfg.length, cfg.height, cfg.width, cfg.channels), dtype=np.float32)
    actions = np.empty((cfg.length - 1, 2), dtype=np.float32)
    frames[0] = render(state, cfg.channels)
    for t in range(cfg.length - 1):
        a = action_rng.uniform(ACTION_LOW, ACTION_HIGH, size=2).astype(np.float32)
        actions[t] = a
        state = step(state, a)
        frames[t + 1] = render(state, cfg.channels)
    return Episode(frames=frames, actions=actions if cfg.action_conditioned else None,
                   seed=episode_seed, metadata={})


def save_episode(episode: Episode, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {
        "frames": int(len(episode.frames)),
        "height": int(episode.frames.shape[1]),
        "width": int(episode.frames.shape[2]),
        "channels": int(episode.frames.shape[3]),
        "action_dim": 0 if episode.actions is None else int(episode.actions.shape[1]),
        "seed": int(episode.seed),
        "metadata": episode.metadata,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    save_tensor(path / "frames.bin", episode.frames.astype(np.float32))
    if episode.actions is not None:
        save_tensor(path / "actions.bin", episode.actions.astype(np.float32))


def load_episode(path) -> Episode:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError:
        raise FormatError(f"no episode manifest under {path}")
    frames = load_tensor(path / "frames.bin")
    if frames.ndim != 4:
        raise FormatError(f"frames.bin has rank {frames.ndim}, expected 4")
    if len(frames) != manifest["frames"]:
        raise FormatError(
            f"manifest says {manifest['frames']} frames, file holds {len(frames)}")
    actions = None
    if manifest.get("action_dim", 0):
        actions = load_tensor(path / "actions.bin")
        if actions.shape != (len(frames) - 1, manifest["action_dim"]):
            raise FormatError(f"actions.bin shape {actions.shape} inconsistent with manifest")
    return Episode(frames=frames.astype(np.float32), actions=actions,
                   seed=manifest.get("seed", 0), metadata=manifest.get("metadata", {}))


def generate_dataset(cfg: GenConfig, out_dir, workers: int = 1) -> Path:
    """Write ``cfg.episodes`` episodes under ``out_dir``; per-episode seeds are
    derived with splitmix so generation is order-independent and reproducible."""
    if cfg.episodes < 1 or cfg.length < 1:
        raise ValueError("episodes and length must both be >= 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def build(i: int) -> None:
        ep = simulate_episode(cfg, splitmix64(cfg.seed, i))
        save_episode(ep, out / f"episode_{i:05d}")

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(build, range(cfg.episodes)))
    else:
        for i in range(cfg.episodes):
            build(i)

    index = {
        "episodes": [f"episode_{i:05d}" for i in range(cfg.episodes)],
        "config": {
            "episodes": cfg.episodes, "length": cfg.length,
            "height": cfg.height, "width": cfg.width, "channels": cfg.channels,
            "n_sprites": cfg.n_sprites, "sprite_size": cfg.sprite_size,
            "agent_size": cfg.agent_size,
            "action_conditioned": cfg.action_conditioned,
            "stochastic": cfg.stochastic, "seed": cfg.seed,
        },
    }
    (out / "index.json").write_text(json.dumps(index, sort_keys=True, indent=1) + "\n")
    return out


class Dataset:
    """All episodes of a dataset directory held in memory for batch sampling."""

    def __init__(self, frames: np.ndarray, actions: Optional[np.ndarray], config: dict):
        self.frames = frames            # [N, L, H, W, C]
        self.actions = actions          # [N, L-1, A] or None
        self.config = config

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def action_dim(self) -> int:
        return 0 if self.actions is None else self.actions.shape[-1]

    @classmethod
    def load(cls, root) -> "Dataset":
        root = Path(root)
        try:
            index = json.loads((root / "index.json").read_text())
        except FileNotFoundError:
            raise FormatError(f"no dataset index under {root}")
        episodes = [load_episode(root / name) for name in index["episodes"]]
        if not episodes:
            raise FormatError(f"dataset under {root} is empty")
        frames = np.stack([e.frames for e in episodes])
        actions = None
        if episodes[0].actions is not None:
            actions = np.stack([e.actions for e in episodes])
        return cls(frames, actions, index.get("config", {}))

    def sample_batch(self, batch: int, rng: np.random.Generator):
        idx = rng.integers(0, len(self.frames), size=batch)
        acts = None if self.actions is None else self.actions[idx]
        return self.frames[idx], acts

    def episode(self, i: int):
        acts = None if self.actions is None else self.actions[i]
        return self.frames[i], acts
