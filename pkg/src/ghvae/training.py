"""Phase training loop: Adam on the negative per-pixel objective.

Greedy phases train exactly one module against the frozen stack below it.
The end-to-end modes reuse the same phase-K graph (single deepest latent)
with every module unfrozen, either from scratch or from greedily trained
weights, so comparisons between the regimes share one architecture.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .model import GhvaeStack, TrainPhaseConfig, greedy_phase_elbo
from .rng import make_rng
from .sim import Dataset


class TrainingDiverged(RuntimeError):
    """The loss went non-finite; training aborts with diagnostics."""


@dataclass
class LossCurve:
    steps: list[int] = field(default_factory=list)
    recon: list[float] = field(default_factory=list)
    kl: list[float] = field(default_factory=list)
    elbo: list[float] = field(default_factory=list)

    def append(self, step: int, recon: float, kl: float, elbo: float) -> None:
        self.steps.append(step)
        self.recon.append(recon)
        self.kl.append(kl)
        self.elbo.append(elbo)

    def rows(self):
        return zip(self.steps, self.recon, self.kl, self.elbo)


def train_phase(stack: GhvaeStack, k: int, dataset: Dataset, cfg: TrainPhaseConfig,
                log_every: int = 1) -> LossCurve:
    """Train phase k on the dataset, returning the per-step loss curve.

    mode=greedy freezes modules below k; the e2e modes unfreeze everything
    (k must be the deepest level). Frozen modules are bit-invariant across
    the call; Adam runs on -elbo / (batch * horizon * pixels).
    """
    if cfg.phase not in (None, k):
        raise ValueError(f"config says phase {cfg.phase} but train_phase was given k={k}")
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    if stack.action_dim and dataset.action_dim != stack.action_dim:
        raise ValueError(
            f"stack action_dim {stack.action_dim} != dataset action_dim {dataset.action_dim}")
    if cfg.mode == "greedy":
        stack.set_phase(k)
    else:
        if k != stack.depth:
            raise ValueError(f"{cfg.mode} trains the full stack; k must equal depth {stack.depth}")
        stack.unfreeze_all()

    frozen_hashes = {i: m.content_hash() for i, m in enumerate(stack.modules) if m.frozen}
    params = stack.trainable_parameters()
    batch_rng = make_rng(cfg.seed, index=11 * k + 1)
    noise_rng = make_rng(cfg.seed, index=11 * k + 2)
    h0, w0, c0 = stack.image_shape
    denom = cfg.batch * cfg.horizon * h0 * w0 * c0

    curve = LossCurve()
    for step_i in range(cfg.steps):
        frames, actions = dataset.sample_batch(cfg.batch, batch_rng)
        with T.Tape():
            terms = greedy_phase_elbo(stack, k, frames, actions, cfg, noise_rng)
            loss = T.scale(terms.elbo, -1.0 / denom)
            loss_val = loss.item()
            if not np.isfinite(loss_val):
                recon_v, kl_v, _ = terms.values
                raise TrainingDiverged(
                    f"non-finite loss at phase {k} step {step_i}: "
                    f"loss={loss_val}, recon={recon_v}, kl={kl_v}")
            T.backward(loss)
        T.adam_step(params, cfg.lr)
        if step_i % log_every == 0 or step_i == cfg.steps - 1:
            recon_v, kl_v, elbo_v = terms.values
            curve.append(step_i, recon_v / denom, kl_v / denom, elbo_v / denom)

    for i, digest in frozen_hashes.items():
        after = stack.modules[i].content_hash()
        if after != digest:
            raise RuntimeError(f"frozen module {i + 1} changed during phase {k} training")
    return curve
