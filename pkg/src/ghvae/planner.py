"""Random-shooting visual foresight against a goal image.

Each replanning round samples a batch of candidate action sequences, predicts
their outcomes with either the learned video model or the simulator itself
(the perfect-dynamics oracle), picks the candidate/prefix-length pair whose
predicted frame has the lowest L1 distance to the goal image, executes that
prefix, and replans, until the goal predicate fires or the step cap runs out.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from . import sim
from .model import GhvaeStack, rollout
from .rng import make_rng, splitmix64
from .sim import WorldState, render


@dataclass
class PushTask:
    """Push the target sprite's center into a closed rectangular region."""

    region: tuple[float, float, float, float]  # x0, y0, x1, y1, inclusive
    target_sprite: int = 0
    tolerance: float = 1.0
    kind: str = "push_region"


def goal_predicate(state: WorldState, task: PushTask) -> bool:
    """True when the target sprite's center lies in the (closed) goal region."""
    if task.kind != "push_region":
        raise ValueError(f"unknown task kind {task.kind!r}")
    if not state.sprites or task.target_sprite >= len(state.sprites):
        return False
    s = state.sprites[task.target_sprite]
    cx, cy = s.x + s.size / 2.0, s.y + s.size / 2.0
    x0, y0, x1, y1 = task.region
    tol = task.tolerance
    return (x0 - tol <= cx <= x1 + tol) and (y0 - tol <= cy <= y1 + tol)


@dataclass
class PlanRequest:
    goal: np.ndarray                  # [H, W, C] goal image
    batch: int = 140
    horizon: int = 10
    cap: int = 50
    context: int = 2
    seed: int = 0
    bounds: tuple[float, float] = (sim.ACTION_LOW, sim.ACTION_HIGH)

    def __post_init__(self):
        if self.batch < 1 or self.horizon < 1:
            raise ValueError("batch and horizon must be >= 1")


@dataclass
class PlanResult:
    """Selected candidate for one replanning round (1-indexed provenance)."""

    actions: np.ndarray               # [T*, action_dim]
    b_star: int
    t_star: int
    loss: float
    predicted: np.ndarray             # [T*, H, W, C], for audit


@dataclass
class PlanTranscript:
    success: bool
    steps: int
    frames: list = field(default_factory=list)
    replans: list = field(default_factory=list)


def sample_actions(batch: int, horizon: int, bounds: tuple[float, float], seed: int) -> np.ndarray:
    """i.i.d. uniform candidates, [batch, horizon, 2]; prefix-stable in batch."""
    lo, hi = bounds
    if not (np.isfinite(lo) and np.isfinite(hi)):
        raise ValueError("action bounds must be finite")
    rng = make_rng(seed)
    return rng.uniform(lo, hi, size=(batch, horizon, 2)).astype(np.float32)


def select_from_losses(losses: np.ndarray) -> tuple[int, int, float]:
    """Argmin over a [B, T] loss table; ties broken by smaller T', then smaller b.

    Returns 1-indexed (b_star, t_star) and the winning loss.
    """
    losses = np.asarray(losses, dtype=np.float64)
    if losses.ndim != 2:
        raise ValueError(f"loss table must be [B, T], got shape {losses.shape}")
    best = np.inf
    b_star = t_star = 1
    n_b, n_t = losses.shape
    for t in range(n_t):
        for b in range(n_b):
            if losses[b, t] < best:
                best = losses[b, t]
                b_star, t_star = b + 1, t + 1
    return b_star, t_star, float(best)


def select_best(predicted: np.ndarray, goal: np.ndarray) -> tuple[int, int, float]:
    """Pick (b*, T*) minimizing mean |predicted[b, T'-1] - goal| over the table."""
    if predicted.ndim != 5:
        raise ValueError(f"predicted must be [B, T, H, W, C], got shape {predicted.shape}")
    if predicted.shape[2:] != goal.shape:
        raise ValueError(f"frame extents {predicted.shape[2:]} != goal extents {goal.shape}")
    if not np.all(np.isfinite(predicted)):
        raise ValueError("predictions contain non-finite values")
    diff = np.abs(predicted.astype(np.float64) - goal.astype(np.float64))
    losses = diff.mean(axis=(2, 3, 4))
    return select_from_losses(losses)


class PushEnv:
    """Executes actions against a live world and records the trajectory."""

    def __init__(self, state: WorldState, task: PushTask, channels: int = 1):
        self.state = state
        self.task = task
        self.channels = channels
        self.frames: list[np.ndarray] = [render(state, channels)]
        self.actions: list[np.ndarray] = []

    def step(self, action: np.ndarray) -> None:
        self.state = sim.step(self.state, action)
        self.actions.append(np.asarray(action, np.float32))
        self.frames.append(render(self.state, self.channels))

    def done(self) -> bool:
        return goal_predicate(self.state, self.task)


def _predict_oracle(env: PushEnv, actions: np.ndarray) -> np.ndarray:
    b, t = actions.shape[:2]
    out = np.empty((b, t) + env.frames[-1].shape, dtype=np.float32)
    for i in range(b):
        s = env.state  # value semantics: stepping never mutates the source state
        for j in range(t):
            s = sim.step(s, actions[i, j])
            out[i, j] = render(s, env.channels)
    return out


def _predict_learned(env: PushEnv, stack: GhvaeStack, actions: np.ndarray,
                     context: int, seed: int) -> np.ndarray:
    b, t = actions.shape[:2]
    frames = env.frames
    ctx = [frames[max(0, len(frames) - context + i)] for i in range(context)] \
        if len(frames) >= context else [frames[0]] * (context - len(frames)) + frames
    ctx_arr = np.broadcast_to(np.stack(ctx)[None], (b, context) + frames[0].shape).copy()
    past = env.actions[-(context - 1):] if context > 1 else []
    while len(past) < context - 1:
        past = [np.zeros(2, np.float32)] + past
    if past:
        warm = np.broadcast_to(np.stack(past)[None], (b, len(past), 2)).copy()
        acts = np.concatenate([warm, actions], axis=1)
    else:
        acts = actions
    return rollout(stack, ctx_arr, acts, t, make_rng(seed), mode="test")


def plan_episode(env: PushEnv, model: Union[str, GhvaeStack], request: PlanRequest) -> PlanTranscript:
    """Replanning loop; success means the goal predicate fired within the cap."""
    if isinstance(model, str) and model != "oracle":
        raise ValueError(f"model must be 'oracle' or a model stack, got {model!r}")
    if request.goal.shape != env.frames[-1].shape:
        raise ValueError(
            f"goal extents {request.goal.shape} != frame extents {env.frames[-1].shape}")
    transcript = PlanTranscript(success=env.done(), steps=0, frames=[env.frames[-1]])
    if transcript.success:
        return transcript

    replan = 0
    while transcript.steps < request.cap:
        actions = sample_actions(request.batch, request.horizon, request.bounds,
                                 seed=splitmix64(request.seed, replan))
        if model == "oracle":
            preds = _predict_oracle(env, actions)
        else:
            preds = _predict_learned(env, model, actions, request.context,
                                     seed=splitmix64(request.seed, 10_000 + replan))
        b_star, t_star, loss = select_best(preds, request.goal)
        chosen = actions[b_star - 1, :t_star]
        transcript.replans.append(PlanResult(
            actions=chosen.copy(), b_star=b_star, t_star=t_star, loss=loss,
            predicted=preds[b_star - 1, :t_star].copy()))
        for a in chosen:
            env.step(a)
            transcript.steps += 1
            transcript.frames.append(env.frames[-1])
            if env.done() or transcript.steps >= request.cap:
                break
        if env.done():
            transcript.success = True
            return transcript
        replan += 1
    transcript.success = env.done()
    return transcript


def make_task_instance(height: int, width: int, sprite_size: int, agent_size: int,
                       seed: int, region_size: int = 8,
                       max_push_distance: float = 14.0) -> tuple[PushEnv, np.ndarray]:
    """A reachable push task plus its goal image.

    The agent starts near the sprite and the goal region center is within
    ``max_push_distance`` of the sprite, so a short action sequence can solve
    the task; the world is drift-free so the oracle's predictions are exact.
    """
    rng = make_rng(seed)
    margin = region_size
    sx = float(rng.uniform(margin, width - margin - sprite_size))
    sy = float(rng.uniform(margin, height - margin - sprite_size))
    ang = rng.uniform(0, 2 * np.pi)
    dist = rng.uniform(6.0, max_push_distance)
    cx = float(np.clip(sx + sprite_size / 2 + dist * np.cos(ang), region_size / 2, width - region_size / 2))
    cy = float(np.clip(sy + sprite_size / 2 + dist * np.sin(ang), region_size / 2, height - region_size / 2))
    region = (cx - region_size / 2, cy - region_size / 2,
              cx + region_size / 2, cy + region_size / 2)

    # agent starts on the side of the sprite opposite the region, ready to push
    dirx, diry = cx - (sx + sprite_size / 2), cy - (sy + sprite_size / 2)
    norm = max(np.hypot(dirx, diry), 1e-6)
    ax = float(np.clip(sx + sprite_size / 2 - dirx / norm * (sprite_size + 2) - agent_size / 2, 0, width - 1))
    ay = float(np.clip(sy + sprite_size / 2 - diry / norm * (sprite_size + 2) - agent_size / 2, 0, height - 1))

    sprite = sim.Sprite(x=sx, y=sy, size=sprite_size, gray=0.55)
    state = WorldState(height=height, width=width, agent_x=ax, agent_y=ay,
                       agent_size=agent_size, sprites=(sprite,), stochastic=False,
                       rng_state=rng.bit_generator.state)
    task = PushTask(region=region)

    goal_sprite = sim.Sprite(x=cx - sprite_size / 2, y=cy - sprite_size / 2,
                             size=sprite_size, gray=0.55)
    gax = float(np.clip(cx - dirx / norm * (sprite_size + 1) - agent_size / 2, 0, width - 1))
    gay = float(np.clip(cy - diry / norm * (sprite_size + 1) - agent_size / 2, 0, height - 1))
    goal_state = WorldState(height=height, width=width, agent_x=gax, agent_y=gay,
                            agent_size=agent_size, sprites=(goal_sprite,), stochastic=False,
                            rng_state=rng.bit_generator.state)
    return PushEnv(state, task), render(goal_state)
