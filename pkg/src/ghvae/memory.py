"""Static estimator of peak training memory: greedy phases vs end-to-end.

Greedy training keeps every module's weights for the forward pass but stores
gradients and optimizer state only for the trainable module. Per timestep and
batch element it retains the trainable module's encoder/decoder/prior/posterior
activations plus the frozen decoders' activations (they sit on the gradient
path from the latent down to pixels) and the frozen encoders' output maps (the
hand-off the decoders consume); the frozen encoders' *internal* layers are
never retained. End-to-end training retains every encoder and decoder layer
and trains all parameters, with only the deepest prior/posterior in the graph.

Costs are censused from dry runs of the real subnetworks, so the estimator
tracks the implementation rather than a hand-maintained table.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .model import GhvaeStack, StackConfig, TrainPhaseConfig, build_ladder, greedy_phase_elbo
from .tensor import Tape, Tensor


@dataclass
class ModuleCost:
    """Per-module element counts: parameters and per-timestep activation footprints.

    ``objective`` covers the latent sampling, likelihood and KL arithmetic that
    runs per timestep while this module is the trainable one.
    """

    params: int
    enc: int
    dec: int
    prior: int
    post: int
    enc_output: int = 0
    objective: int = 0


@dataclass
class MemBreakdown:
    mode: str
    params_bytes: int
    grads_bytes: int
    optimizer_bytes: int
    activations_bytes: int

    @property
    def total(self) -> int:
        return self.params_bytes + self.grads_bytes + self.optimizer_bytes + self.activations_bytes

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "params_bytes": self.params_bytes,
            "grads_bytes": self.grads_bytes,
            "optimizer_bytes": self.optimizer_bytes,
            "activations_bytes": self.activations_bytes,
            "total_bytes": self.total,
        }


def estimate(costs: Sequence[ModuleCost], mode: str, phase: Optional[int] = None,
             batch: int = 1, horizon: int = 1, width: int = 4) -> MemBreakdown:
    """Memory for one training configuration, in bytes at the given dtype width."""
    n = len(costs)
    if n < 1:
        raise ValueError("need at least one module cost")
    if mode == "greedy":
        if phase is None or not 1 <= phase <= n:
            raise ValueError(f"greedy mode needs a phase in 1..{n}, got {phase}")
        live = costs[:phase]
        trainable = costs[phase - 1]
        params = sum(c.params for c in live)
        grads = trainable.params
        acts = trainable.enc + trainable.dec + trainable.prior + trainable.post + trainable.objective
        acts += sum(c.dec + c.enc_output for c in live[:-1])
        label = f"greedy(phase {phase})"
    elif mode == "e2e":
        params = sum(c.params for c in costs)
        grads = params
        acts = (sum(c.enc + c.dec for c in costs)
                + costs[-1].prior + costs[-1].post + costs[-1].objective)
        label = "e2e"
    else:
        raise ValueError(f"mode must be 'greedy' or 'e2e', got {mode!r}")
    return MemBreakdown(
        mode=label,
        params_bytes=params * width,
        grads_bytes=grads * width,
        optimizer_bytes=2 * grads * width,
        activations_bytes=acts * batch * horizon * width,
    )


def greedy_peak(costs: Sequence[ModuleCost], batch: int = 1, horizon: int = 1,
                width: int = 4) -> tuple[MemBreakdown, int]:
    """Worst phase of a sequential greedy run (phases never coexist)."""
    best: Optional[MemBreakdown] = None
    best_phase = 1
    for k in range(1, len(costs) + 1):
        b = estimate(costs, "greedy", phase=k, batch=batch, horizon=horizon, width=width)
        if best is None or b.total > best.total:
            best, best_phase = b, k
    return best, best_phase


def savings_fraction(costs: Sequence[ModuleCost], batch: int = 1, horizon: int = 1,
                     width: int = 4) -> float:
    e2e = estimate(costs, "e2e", batch=batch, horizon=horizon, width=width)
    peak, _ = greedy_peak(costs, batch=batch, horizon=horizon, width=width)
    return (e2e.total - peak.total) / e2e.total


def savings_curve(cost_family, k_range: Sequence[int], batch: int = 1, horizon: int = 1,
                  width: int = 4) -> list[dict]:
    """Rows of {K, e2e, greedy peak, savings fraction} for K in ``k_range``.

    ``cost_family(K)`` must return the module costs of a valid K-module stack.
    """
    rows = []
    for k in k_range:
        costs = cost_family(k)
        e2e = estimate(costs, "e2e", batch=batch, horizon=horizon, width=width)
        peak, peak_phase = greedy_peak(costs, batch=batch, horizon=horizon, width=width)
        rows.append({
            "K": k,
            "e2e_bytes": e2e.total,
            "greedy_peak_bytes": peak.total,
            "greedy_peak_phase": peak_phase,
            "savings_fraction": (e2e.total - peak.total) / e2e.total,
        })
    return rows


def format_curve(rows: Sequence[dict]) -> str:
    lines = [f"{'K':>2} {'e2e_bytes':>14} {'greedy_peak':>14} {'peak_phase':>10} {'savings':>9}"]
    for r in rows:
        lines.append(f"{r['K']:>2d} {r['e2e_bytes']:>14d} {r['greedy_peak_bytes']:>14d} "
                     f"{r['greedy_peak_phase']:>10d} {r['savings_fraction']:>8.1%}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# cost construction from real stacks
# ---------------------------------------------------------------------------


def _dry_run_elements(fn) -> int:
    tape = Tape()
    with tape:
        fn()
    return tape.retained_elements()


def _objective_elements(stack: GhvaeStack, level: int) -> int:
    """Per-timestep footprint of the latent/likelihood/KL arithmetic at a level."""
    from .distributions import DiagonalGaussian, gaussian_log_prob, kl_divergence, sample_reparam

    s = stack.modules[level - 1].spec
    h0, w0, c0 = stack.image_shape
    dt = stack.dtype
    latent = (1, s.height, s.width, s.c_latent)

    def run():
        q_mean = Tensor(np.zeros(latent, dt), requires_grad=True)
        p_mean = Tensor(np.zeros(latent, dt), requires_grad=True)
        p_ls = Tensor(np.zeros(latent, dt), requires_grad=True)
        q = DiagonalGaussian(mean=T.concat_batch(q_mean), fixed_std=stack.cfg.sigma_post)
        p = DiagonalGaussian(mean=T.concat_batch(p_mean), log_std=T.concat_batch(p_ls))
        z = sample_reparam(q, Tensor(np.zeros(latent, dt)))
        xhat = Tensor(np.zeros((1, h0, w0, c0), dt), requires_grad=True)
        recon = gaussian_log_prob(Tensor(np.zeros((1, h0, w0, c0), dt)), xhat, stack.cfg.sigma_dec)
        kl = kl_divergence(q, p)
        T.scale(T.sub(recon, T.scale(kl, stack.cfg.beta)), -1.0)
        return z

    return _dry_run_elements(run)


def module_costs_from_stack(stack: GhvaeStack, horizon: Optional[int] = None,
                            context: Optional[int] = None) -> list[ModuleCost]:
    """Census each subnetwork's per-timestep activation footprint with dry runs.

    When the training schedule is given, the encoder and recurrent buckets are
    amortized onto objective timesteps: a window of T objective terms touches
    T + n_ctx frames (one encoder pass each) and runs the recurrent cells
    T + n_ctx - 1 times, so those buckets carry factors (T + n_ctx) / T and
    (T + n_ctx - 1) / T respectively.
    """
    enc_factor = rec_factor = 1.0
    if horizon is not None and context is not None:
        enc_factor = (horizon + context) / horizon
        rec_factor = (horizon + context - 1) / horizon
    saved = [m.frozen for m in stack.modules]
    for m in stack.modules:
        m.set_frozen(False)
    try:
        costs = []
        h0, w0, c0 = stack.image_shape
        dt = stack.dtype
        prev_h, prev_w, prev_c = h0, w0, c0
        for m in stack.modules:
            s = m.spec
            # inputs mirror live-phase gradient participation: encoder inputs are
            # data or frozen hand-offs (no grad); hidden maps, top-down signals
            # and steady-state recurrent states all carry gradients
            enc_in = Tensor(np.zeros((1, prev_h, prev_w, prev_c), dt))
            h = Tensor(np.zeros((1, s.height, s.width, s.c_hidden), dt), requires_grad=True)
            u = Tensor(np.zeros((1, s.height, s.width, s.c_latent), dt), requires_grad=True)
            action = Tensor(np.zeros((1, stack.action_dim), dt)) if stack.action_dim else None
            prior_state = m.prior.gru.init_state(1, s.height, s.width, dt)
            prior_state.requires_grad = True
            post_state = m.posterior.gru.init_state(1, s.height, s.width, dt)
            post_state.requires_grad = True
            costs.append(ModuleCost(
                params=sum(p.data.size for p in m.parameters),
                enc=round(enc_factor * _dry_run_elements(lambda: m.encoder.forward(enc_in))),
                dec=_dry_run_elements(lambda: m.decoder.forward(h, u)),
                prior=round(rec_factor * _dry_run_elements(lambda: m.prior.step(prior_state, h, action))),
                post=round(rec_factor * _dry_run_elements(lambda: m.posterior.step(post_state, h, stack.cfg.sigma_post))),
                enc_output=round(enc_factor * s.height * s.width * s.c_hidden),
                objective=_objective_elements(stack, s.level),
            ))
            prev_h, prev_w, prev_c = s.height, s.width, s.c_hidden
        return costs
    finally:
        for m, f in zip(stack.modules, saved):
            m.set_frozen(f)


# accounting protocol for the default curve: one sample, ten-step horizon
DEFAULT_CURVE_BATCH = 1
DEFAULT_CURVE_HORIZON = 10

# channel schedule for the default 64x64 ladder; widths grow fast enough that
# deeper modules carry real weight (that is what makes freezing pay off), and
# the level-1 latent stays narrow so the shallow recurrent cells stay cheap
_DEFAULT_C_HIDDEN = [16, 32, 56, 88, 128, 176]
_DEFAULT_C_LATENT = [4, 16, 28, 44, 64, 88]


def default_cost_family(k: int, image: int = 64, action_dim: int = 2, seed: int = 0) -> list[ModuleCost]:
    """Reference ladder family used for the savings curve: 64x64 frames, up to K=6."""
    if not 1 <= k <= len(_DEFAULT_C_HIDDEN):
        raise ValueError(f"default family supports K=1..{len(_DEFAULT_C_HIDDEN)}, got {k}")
    specs = build_ladder(image, image, _DEFAULT_C_HIDDEN[:k], _DEFAULT_C_LATENT[:k])
    stack = GhvaeStack.build((image, image, 1), action_dim, specs, seed=seed, cfg=StackConfig())
    return module_costs_from_stack(stack)


def default_savings_curve(k_range=range(1, 7), width: int = 4) -> list[dict]:
    return savings_curve(default_cost_family, k_range,
                         batch=DEFAULT_CURVE_BATCH, horizon=DEFAULT_CURVE_HORIZON, width=width)


def census_phase_activations(stack: GhvaeStack, k: int, frames: np.ndarray,
                             actions: Optional[np.ndarray], cfg: TrainPhaseConfig) -> int:
    """Elements actually alive across one training forward: recorded op outputs
    plus the non-parameter leaf buffers backward still needs (data batches and
    frozen-encoder hand-offs)."""
    stack.set_phase(k)
    tape = Tape()
    noise = np.random.Generator(np.random.PCG64(0))
    with tape:
        terms = greedy_phase_elbo(stack, k, frames, actions, cfg, noise)
        T.scale(terms.elbo, -1.0)
    return tape.retained_elements() + tape.retained_leaf_elements()
