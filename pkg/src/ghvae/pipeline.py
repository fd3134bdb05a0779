"""End-to-end runs: data generation, staged training, evaluation, planning,
memory reports. Everything the CLI does lives here so tests can drive the same
paths in-process.

Artifact layout under the output directory:

    checkpoints/phase{k}/    one checkpoint per completed phase (all modules frozen)
    checkpoints/e2e*/        end-to-end variants, when configured
    logs/train_phase{k}.csv  step, recon, kl, elbo
    reports/*.json           deterministic, timestamp-free, config embedded
    media/*.png|*.gif        rollout strips and planner trials
    meta.json                wall-clock info only (excluded from determinism)
"""

from __future__ import annotations

import json
import os
import time
from pathlib import Path

import numpy as np

from . import checkpoint, memory, metrics, planner
from .config import RunConfig
from .model import GhvaeStack, TrainPhaseConfig, rollout
from .rng import make_rng, splitmix64
from .sim import Dataset, GenConfig
from .sim import generate_dataset as _generate_dataset
from .training import train_phase


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n")


def _write_meta(out: Path, **info) -> None:
    meta = {"wall_time_unix": time.time(), **info}
    _write_json(out / "meta.json", meta)


def worker_threads() -> int:
    try:
        return max(1, int(os.environ.get("GHVAE_THREADS", "1")))
    except ValueError:
        return 1


def dataset_paths(cfg: RunConfig) -> tuple[Path, Path]:
    root = Path(cfg.data.root)
    return root / "train", root / "test"


def gen_data(cfg: RunConfig) -> dict:
    train_dir, test_dir = dataset_paths(cfg)
    base = dict(length=cfg.data.episode_length, height=cfg.image.height,
                width=cfg.image.width, channels=cfg.image.channels,
                n_sprites=cfg.data.n_sprites, sprite_size=cfg.data.sprite_size,
                agent_size=cfg.data.agent_size,
                action_conditioned=cfg.action_dim > 0,
                stochastic=cfg.data.stochastic)
    workers = worker_threads()
    _generate_dataset(GenConfig(episodes=cfg.data.train_episodes, seed=cfg.seed, **base),
                      train_dir, workers=workers)
    _generate_dataset(GenConfig(episodes=cfg.data.test_episodes,
                                seed=splitmix64(cfg.seed, 999_001), **base),
                      test_dir, workers=workers)
    return {"train": str(train_dir), "test": str(test_dir),
            "train_episodes": cfg.data.train_episodes,
            "test_episodes": cfg.data.test_episodes}


def _phase_config(cfg: RunConfig, k: int, mode: str) -> TrainPhaseConfig:
    return TrainPhaseConfig(phase=k, batch=cfg.train.batch, horizon=cfg.train.horizon,
                            context=cfg.train.context, lr=cfg.train.lr,
                            steps=cfg.steps_for_phase(k), seed=cfg.seed, mode=mode)


def _write_curve(out: Path, k: int, curve) -> None:
    path = out / "logs" / f"train_phase{k}.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["step,recon,kl,elbo"]
    lines += [f"{s},{r:.8g},{kl:.8g},{e:.8g}" for s, r, kl, e in curve.rows()]
    path.write_text("\n".join(lines) + "\n")


class MissingPhaseError(RuntimeError):
    pass


def _load_phase(out: Path, k: int) -> GhvaeStack:
    ck = out / "checkpoints" / f"phase{k}"
    if not (ck / "manifest.json").exists():
        raise MissingPhaseError(f"phase {k} checkpoint not found under {ck.parent}")
    return checkpoint.load_stack(ck)


def train_one_phase(cfg: RunConfig, out: Path, k: int) -> dict:
    """Greedy phase k: build on the phase k-1 checkpoint (k=1 starts fresh)."""
    train_dir, _ = dataset_paths(cfg)
    dataset = Dataset.load(train_dir)
    specs = cfg.ladder()
    if not 1 <= k <= len(specs):
        raise ValueError(f"phase {k} out of range 1..{len(specs)}")
    if k == 1:
        stack = GhvaeStack((cfg.image.height, cfg.image.width, cfg.image.channels),
                           cfg.action_dim, cfg.stack_config())
    else:
        stack = _load_phase(out, k - 1)
    stack.add_module(specs[k - 1], seed=cfg.seed)

    before = stack.module_hashes()[:-1]
    curve = train_phase(stack, k, dataset, _phase_config(cfg, k, "greedy"))
    _write_curve(out, k, curve)
    after = stack.module_hashes()
    for m in stack.modules:
        m.set_frozen(True)
    checkpoint.save_stack(stack, out / "checkpoints" / f"phase{k}")
    return {
        "phase": k,
        "steps": cfg.steps_for_phase(k),
        "final_elbo_per_pixel": curve.elbo[-1],
        "frozen_hashes_before": before,
        "hashes_after": after,
        "frozen_invariant": before == after[:-1],
    }


def train_all(cfg: RunConfig, out: Path) -> dict:
    """The staged procedure: train each phase in turn, freezing as it goes."""
    out = Path(out)
    t0 = time.perf_counter()
    mode = cfg.train.mode
    report: dict = {"mode": mode, "phases": [], "config": cfg.to_dict()}
    if mode == "greedy":
        for k in range(1, cfg.depth + 1):
            report["phases"].append(train_one_phase(cfg, out, k))
        report["freeze_invariance"] = all(p["frozen_invariant"] for p in report["phases"])
    else:
        train_dir, _ = dataset_paths(cfg)
        dataset = Dataset.load(train_dir)
        if mode == "e2e_finetune":
            stack = _load_phase(out, cfg.depth)
            stack.unfreeze_all()
        else:
            stack = GhvaeStack.build((cfg.image.height, cfg.image.width, cfg.image.channels),
                                     cfg.action_dim, cfg.ladder(), seed=cfg.seed,
                                     cfg=cfg.stack_config())
            stack.unfreeze_all()
        k = cfg.depth
        curve = train_phase(stack, k, dataset, _phase_config(cfg, k, mode))
        _write_curve(out, k, curve)
        for m in stack.modules:
            m.set_frozen(True)
        checkpoint.save_stack(stack, out / "checkpoints" / mode)
        report["phases"].append({"phase": k, "mode": mode,
                                 "final_elbo_per_pixel": curve.elbo[-1]})
    _write_json(out / "reports" / "train.json", report)
    _write_meta(out, command="train", elapsed_s=time.perf_counter() - t0)
    return report


def _deepest_checkpoint(cfg: RunConfig, out: Path) -> GhvaeStack:
    if cfg.train.mode != "greedy":
        ck = out / "checkpoints" / cfg.train.mode
        if (ck / "manifest.json").exists():
            return checkpoint.load_stack(ck)
    for k in range(cfg.depth, 0, -1):
        ck = out / "checkpoints" / f"phase{k}"
        if (ck / "manifest.json").exists():
            return checkpoint.load_stack(ck)
    raise MissingPhaseError(f"phase {cfg.depth} checkpoint not found under {out / 'checkpoints'}")


def run_eval(cfg: RunConfig, out: Path, prior: str | None = None) -> dict:
    out = Path(out)
    t0 = time.perf_counter()
    stack = _deepest_checkpoint(cfg, out)
    _, test_dir = dataset_paths(cfg)
    dataset = Dataset.load(test_dir)
    prior_mode = prior or cfg.eval.prior
    reports = metrics.evaluate(stack, dataset, horizon=cfg.eval.horizon,
                               samples=cfg.eval.samples, seed=cfg.seed,
                               context=cfg.train.context, episodes=cfg.eval.episodes,
                               prior_mode=prior_mode)
    payload = {
        "metrics": {name: rep.to_dict() for name, rep in reports.items()},
        "summary": {name: f"{rep.mean:.4f} +/- {rep.stderr:.4f}" for name, rep in reports.items()},
        "config": cfg.to_dict(),
    }
    suffix = "" if prior_mode == "learned" else f"_{prior_mode}"
    _write_json(out / "reports" / f"eval{suffix}.json", payload)
    _write_meta(out, command="eval", elapsed_s=time.perf_counter() - t0)
    return payload


def run_memory_report(cfg: RunConfig, out: Path) -> dict:
    out = Path(out)
    try:
        stack = _deepest_checkpoint(cfg, out)
    except MissingPhaseError:
        stack = GhvaeStack.build((cfg.image.height, cfg.image.width, cfg.image.channels),
                                 cfg.action_dim, cfg.ladder(), seed=cfg.seed,
                                 cfg=cfg.stack_config())
    costs = memory.module_costs_from_stack(stack, horizon=cfg.train.horizon,
                                            context=cfg.train.context)
    b, t = cfg.train.batch, cfg.train.horizon
    breakdowns = [memory.estimate(costs, "greedy", phase=k, batch=b, horizon=t).to_dict()
                  for k in range(1, stack.depth + 1)]
    e2e = memory.estimate(costs, "e2e", batch=b, horizon=t)
    peak, peak_phase = memory.greedy_peak(costs, batch=b, horizon=t)
    curve = memory.default_savings_curve()
    payload = {
        "stack": {"greedy_phases": breakdowns, "e2e": e2e.to_dict(),
                  "greedy_peak_phase": peak_phase,
                  "savings_fraction": (e2e.total - peak.total) / e2e.total,
                  "batch": b, "horizon": t},
        "default_family_curve": curve,
        "config": cfg.to_dict(),
    }
    _write_json(out / "reports" / "memory.json", payload)
    return payload


def run_plan(cfg: RunConfig, out: Path, model: str | None = None) -> dict:
    out = Path(out)
    t0 = time.perf_counter()
    which = model or cfg.plan.model
    if which == "learned":
        dynamics = _deepest_checkpoint(cfg, out)
    elif which == "oracle":
        dynamics = "oracle"
    else:
        raise ValueError(f"plan model must be oracle|learned, got {which!r}")
    trials = []
    successes = 0
    for i in range(cfg.plan.trials):
        env, goal = planner.make_task_instance(
            cfg.image.height, cfg.image.width, cfg.data.sprite_size,
            cfg.data.agent_size, seed=splitmix64(cfg.seed, 500_000 + i),
            region_size=cfg.plan.region_size)
        request = planner.PlanRequest(goal=goal, batch=cfg.plan.batch,
                                      horizon=cfg.plan.horizon, cap=cfg.plan.cap,
                                      context=cfg.train.context,
                                      seed=splitmix64(cfg.seed, 600_000 + i))
        transcript = planner.plan_episode(env, dynamics, request)
        successes += transcript.success
        trials.append({"trial": i, "success": transcript.success,
                       "steps": transcript.steps,
                       "replans": [{"b_star": r.b_star, "t_star": r.t_star,
                                    "loss": r.loss} for r in transcript.replans]})
        _save_strip(out / "media" / f"plan_{which}_trial{i:02d}.png",
                    [goal] + transcript.frames[:: max(1, len(transcript.frames) // 10)])
    payload = {"model": which, "trials": trials,
               "successes": successes, "total": cfg.plan.trials,
               "config": cfg.to_dict()}
    _write_json(out / "reports" / f"plan_{which}.json", payload)
    _write_meta(out, command="plan", elapsed_s=time.perf_counter() - t0)
    return payload


def _to_image(frame: np.ndarray, upscale: int = 4) -> "np.ndarray":
    img = np.clip(frame, 0.0, 1.0)
    if img.shape[-1] == 1:
        img = np.repeat(img, 3, axis=-1)
    img = (img * 255).astype(np.uint8)
    return np.repeat(np.repeat(img, upscale, axis=0), upscale, axis=1)


def _save_strip(path: Path, frames, upscale: int = 4) -> None:
    from PIL import Image
    path.parent.mkdir(parents=True, exist_ok=True)
    row = np.concatenate([_to_image(f, upscale) for f in frames], axis=1)
    Image.fromarray(row).save(path)


def _save_gif(path: Path, frames, upscale: int = 4, ms_per_frame: int = 160) -> None:
    from PIL import Image
    path.parent.mkdir(parents=True, exist_ok=True)
    imgs = [Image.fromarray(_to_image(f, upscale)) for f in frames]
    imgs[0].save(path, save_all=True, append_images=imgs[1:], duration=ms_per_frame, loop=0)


def run_rollout_media(cfg: RunConfig, out: Path, episode: int = 0,
                      gif: bool = False, strip: bool = True) -> dict:
    out = Path(out)
    stack = _deepest_checkpoint(cfg, out)
    _, test_dir = dataset_paths(cfg)
    dataset = Dataset.load(test_dir)
    frames, actions = dataset.episode(episode % len(dataset))
    n_ctx, horizon = cfg.train.context, cfg.eval.horizon
    ctx = frames[None, :n_ctx]
    acts = None if actions is None else actions[None, :n_ctx - 1 + horizon]
    preds = rollout(stack, ctx, acts, horizon, make_rng(cfg.seed, index=episode))[0]
    truth = frames[n_ctx:n_ctx + horizon]
    written = []
    if strip:
        p = out / "media" / f"rollout_ep{episode:03d}.png"
        _save_strip(p, list(frames[:n_ctx]) + list(preds))
        _save_strip(out / "media" / f"rollout_ep{episode:03d}_truth.png",
                    list(frames[:n_ctx]) + list(truth))
        written.append(str(p))
    if gif:
        p = out / "media" / f"rollout_ep{episode:03d}.gif"
        _save_gif(p, list(frames[:n_ctx]) + list(preds))
        written.append(str(p))
    return {"episode": episode, "files": written}
