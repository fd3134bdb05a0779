"""Oracle suites: independent checks the implementation must pass.

Everything here avoids the code path it certifies. Gradients are checked
against central finite differences at f64; the closed-form KL against a
Monte Carlo estimate; the assembled variational objective against direct
numerical integration of the generative model's evidence; the metric units
against hand-computed constants.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .distributions import DiagonalGaussian, kl_divergence, sample_reparam
from .model import GhvaeStack, LatentSpec, StackConfig
from .rng import make_rng
from .tensor import GruWeights, Tensor


# ---------------------------------------------------------------------------
# finite-difference gradient oracle
# ---------------------------------------------------------------------------


@dataclass
class OpCheckResult:
    op: str
    instances: int
    max_rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def _rand(rng, shape, lo=-2.0, hi=2.0):
    return rng.uniform(lo, hi, size=shape)


def _rand_away(rng, shape, points, gap=0.05, lo=-2.0, hi=2.0):
    """Uniform samples kept at least ``gap`` away from each kink in ``points``."""
    x = rng.uniform(lo, hi, size=shape)
    for p in points:
        near = np.abs(x - p) < gap
        while near.any():
            x[near] = rng.uniform(lo, hi, size=near.sum())
            near = np.abs(x - p) < gap
    return x


def _gradcheck_cases() -> list[tuple[str, Callable]]:
    """Each case builds (inputs, forward_fn) on fresh f64 leaves."""

    def tensors(*arrays):
        return [Tensor(a.astype(np.float64), requires_grad=True) for a in arrays]

    def case_add(rng):
        xs = tensors(_rand(rng, (3, 4)), _rand(rng, (4,)))
        return xs, lambda a, b: T.add(a, b)

    def case_sub(rng):
        xs = tensors(_rand(rng, (2, 3)), _rand(rng, (2, 3)))
        return xs, lambda a, b: T.sub(a, b)

    def case_mul(rng):
        xs = tensors(_rand(rng, (3, 4)), _rand(rng, (4,)))
        return xs, lambda a, b: T.mul(a, b)

    def case_scale(rng):
        xs = tensors(_rand(rng, (5,)))
        return xs, lambda a: T.scale(a, 1.7)

    def case_add_scalar(rng):
        xs = tensors(_rand(rng, (5,)))
        return xs, lambda a: T.add_scalar(a, -0.3)

    def case_leaky_relu(rng):
        xs = tensors(_rand_away(rng, (4, 5), [0.0]))
        return xs, lambda a: T.leaky_relu(a, 0.2)

    def case_sigmoid(rng):
        xs = tensors(_rand(rng, (4, 5)))
        return xs, lambda a: T.sigmoid(a)

    def case_tanh(rng):
        xs = tensors(_rand(rng, (4, 5)))
        return xs, lambda a: T.tanh(a)

    def case_softplus(rng):
        xs = tensors(_rand(rng, (4, 5)))
        return xs, lambda a: T.softplus(a)

    def case_exp(rng):
        xs = tensors(_rand(rng, (4, 5)))
        return xs, lambda a: T.exp(a)

    def case_log(rng):
        xs = tensors(_rand(rng, (4, 5), 0.2, 3.0))
        return xs, lambda a: T.log(a)

    def case_clamp(rng):
        xs = tensors(_rand_away(rng, (4, 5), [-0.5, 0.5], gap=0.02, lo=-1.0, hi=1.0))
        return xs, lambda a: T.clamp(a, -0.5, 0.5)

    def case_concat(rng):
        xs = tensors(_rand(rng, (2, 3, 3, 2)), _rand(rng, (2, 3, 3, 1)), _rand(rng, (2, 3, 3, 3)))
        return xs, lambda a, b, c: T.concat_channels(a, b, c)

    def case_tile(rng):
        xs = tensors(_rand(rng, (2, 3)))
        return xs, lambda a: T.tile_spatial(a, 3, 2)

    def case_group_norm(rng):
        xs = tensors(_rand(rng, (2, 3, 3, 4)), _rand(rng, (4,), 0.5, 1.5), _rand(rng, (4,)))
        return xs, lambda x, g, b: T.group_norm(x, g, b, groups=2)

    def case_mean(rng):
        xs = tensors(_rand(rng, (3, 4)))
        return xs, lambda a: T.mean(a)

    def case_sum(rng):
        xs = tensors(_rand(rng, (3, 4)))
        return xs, lambda a: T.tsum(a)

    def case_l1(rng):
        a = _rand(rng, (3, 4))
        b = a + np.sign(_rand(rng, (3, 4))) * rng.uniform(0.2, 1.0, (3, 4))
        xs = tensors(a, b)
        return xs, lambda x, y: T.l1(x, y)

    def case_mse(rng):
        xs = tensors(_rand(rng, (3, 4)), _rand(rng, (3, 4)))
        return xs, lambda x, y: T.mse(x, y)

    def conv_case(stride, padding):
        def build(rng):
            xs = tensors(_rand(rng, (1, 4, 4, 2)), _rand(rng, (3, 3, 2, 2)), _rand(rng, (2,)))
            return xs, lambda x, w, b: T.conv2d(x, w, b, stride=stride, padding=padding)
        return build

    def deconv_case(stride):
        def build(rng):
            xs = tensors(_rand(rng, (1, 3, 3, 2)), _rand(rng, (3, 3, 2, 2)), _rand(rng, (2,)))
            return xs, lambda x, w, b: T.conv2d_transpose(x, w, b, stride=stride)
        return build

    def case_gru(rng):
        xs = tensors(
            _rand(rng, (1, 2, 2, 1)),            # state
            _rand(rng, (1, 2, 2, 1)),            # input
            _rand(rng, (3, 3, 2, 2)), _rand(rng, (2,)),   # fused reset/update gates
            _rand(rng, (3, 3, 2, 1)), _rand(rng, (1,)),   # candidate
        )
        return xs, lambda s, x, gw, gb, cw, cb: T.conv_gru_step(
            s, x, GruWeights(gw, gb, cw, cb))

    def case_slice_channels(rng):
        xs = tensors(_rand(rng, (2, 3, 3, 4)))
        return xs, lambda a: T.slice_channels(a, 1, 3)

    def case_batch_slice(rng):
        xs = tensors(_rand(rng, (6, 2, 2, 2)))
        return xs, lambda a: T.batch_slice(a, 1, 4)

    def case_concat_batch(rng):
        xs = tensors(_rand(rng, (2, 3, 2)), _rand(rng, (1, 3, 2)), _rand(rng, (3, 3, 2)))
        return xs, lambda a, b, c: T.concat_batch(a, b, c)

    return [
        ("add", case_add), ("sub", case_sub), ("mul", case_mul),
        ("scale", case_scale), ("add_scalar", case_add_scalar),
        ("leaky_relu", case_leaky_relu), ("sigmoid", case_sigmoid),
        ("tanh", case_tanh), ("softplus", case_softplus),
        ("exp", case_exp), ("log", case_log), ("clamp", case_clamp),
        ("concat_channels", case_concat), ("slice_channels", case_slice_channels),
        ("batch_slice", case_batch_slice), ("concat_batch", case_concat_batch),
        ("tile_spatial", case_tile),
        ("group_norm", case_group_norm), ("mean", case_mean), ("sum", case_sum),
        ("l1", case_l1), ("mse", case_mse),
        ("conv2d_s1_same", conv_case(1, "same")),
        ("conv2d_s2_same", conv_case(2, "same")),
        ("conv2d_valid", conv_case(1, "valid")),
        ("conv2d_transpose_s1", deconv_case(1)),
        ("conv2d_transpose_s2", deconv_case(2)),
        ("conv_gru_step", case_gru),
    ]


def _check_instance(builder, rng, h: float) -> float:
    inputs, fn = builder(rng)
    with T.Tape():
        out = fn(*inputs)
        proj = rng.normal(size=out.shape)
        s = T.tsum(T.mul(out, Tensor(proj)))
        T.backward(s)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    def value(datas) -> float:
        with T.no_grad():
            y = fn(*[Tensor(d) for d in datas])
        return float((y.data * proj).sum())

    worst = 0.0
    base = [t.data for t in inputs]
    for i, t in enumerate(inputs):
        flat = t.data.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            plus = [d.copy() if idx == i else d for idx, d in enumerate(base)]
            plus[i].reshape(-1)[j] = orig + h
            minus = [d.copy() if idx == i else d for idx, d in enumerate(base)]
            minus[i].reshape(-1)[j] = orig - h
            numeric = (value(plus) - value(minus)) / (2 * h)
            a = analytic[i].reshape(-1)[j]
            rel = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, rel)
    return worst


def gradient_check(instances_per_op: int = 100, h: float = 1e-5, tol: float = 1e-4,
                   seed: int = 20240, ops: Optional[list[str]] = None) -> list[OpCheckResult]:
    """Analytic vs central finite-difference gradients for every registered op."""
    results = []
    for name, builder in _gradcheck_cases():
        if ops is not None and name not in ops:
            continue
        rng = make_rng(seed, index=hash(name) % (2 ** 31))
        worst = 0.0
        for _ in range(instances_per_op):
            worst = max(worst, _check_instance(builder, rng, h))
        results.append(OpCheckResult(op=name, instances=instances_per_op,
                                     max_rel_err=worst, tol=tol))
    return results


# ---------------------------------------------------------------------------
# distribution oracles
# ---------------------------------------------------------------------------


def kl_monte_carlo_gap(seed: int = 7, dims: int = 8, n_samples: int = 100_000) -> dict:
    """Closed-form KL vs the Monte Carlo estimate E_q[log q - log p].

    Returns the gap and the Monte Carlo standard error; the closed form must
    sit within 3 standard errors.
    """
    rng = make_rng(seed)
    mq = rng.normal(0, 1, dims)
    mp = rng.normal(0, 1, dims)
    lsq = rng.uniform(-1.0, 0.5, dims)
    lsp = rng.uniform(-1.0, 0.5, dims)
    q = DiagonalGaussian(Tensor(mq), log_std=Tensor(lsq))
    p = DiagonalGaussian(Tensor(mp), log_std=Tensor(lsp))
    closed = kl_divergence(q, p).item()

    sq, sp = np.exp(lsq), np.exp(lsp)
    eps = rng.standard_normal((n_samples, dims))
    z = mq + sq * eps
    log_q = (-0.5 * np.log(2 * np.pi * sq ** 2) - (z - mq) ** 2 / (2 * sq ** 2)).sum(axis=1)
    log_p = (-0.5 * np.log(2 * np.pi * sp ** 2) - (z - mp) ** 2 / (2 * sp ** 2)).sum(axis=1)
    diffs = log_q - log_p
    mc = float(diffs.mean())
    se = float(diffs.std(ddof=1) / math.sqrt(n_samples))
    return {"closed": closed, "mc": mc, "stderr": se, "gap": abs(closed - mc)}


def kl_nonneg_min(n_pairs: int = 1000, seed: int = 11) -> float:
    """Smallest KL over random parameter pairs (must be >= 0)."""
    rng = make_rng(seed)
    worst = np.inf
    for _ in range(n_pairs):
        dims = int(rng.integers(1, 12))
        q = DiagonalGaussian(Tensor(rng.normal(0, 2, dims)), log_std=Tensor(rng.uniform(-2, 1, dims)))
        if rng.random() < 0.5:
            p = DiagonalGaussian(Tensor(rng.normal(0, 2, dims)), log_std=Tensor(rng.uniform(-2, 1, dims)))
        else:
            p = DiagonalGaussian(Tensor(rng.normal(0, 2, dims)), fixed_std=float(rng.uniform(0.05, 3)))
        worst = min(worst, kl_divergence(q, p).item())
    return float(worst)


# ---------------------------------------------------------------------------
# variational bound vs quadrature evidence
# ---------------------------------------------------------------------------


def _miniature_stack(seed: int) -> GhvaeStack:
    spec = LatentSpec(level=1, height=1, width=1, c_hidden=4, c_latent=1)
    stack = GhvaeStack((2, 2, 1), action_dim=0, cfg=StackConfig(), dtype=np.float64)
    stack.add_module(spec, seed=seed)
    return stack


def _randomize_parameters(stack: GhvaeStack, rng: np.random.Generator, scale: float = 0.6) -> None:
    for p in stack.all_parameters():
        p.tensor.data = rng.normal(0.0, scale, p.data.shape)


def elbo_vs_quadrature(seed: int, n_points: int = 2048) -> dict:
    """One random miniature instance: exact-expectation objective vs evidence.

    The single-latent model (2x2 frame, 1x1 latent) keeps the latent scalar, so
    log p(x_next | x_t) is a 1-D integral over z handled by trapezoid quadrature
    on a wide grid. The objective's reconstruction expectation is integrated
    over the posterior on the same grid; its KL term is the closed form under
    test. The objective must lower-bound the evidence.
    """
    rng = make_rng(seed)
    stack = _miniature_stack(seed=0)
    _randomize_parameters(stack, rng)
    x_t = rng.uniform(0, 1, (1, 2, 2, 1))
    x_next = rng.uniform(0, 1, (1, 2, 2, 1))
    sigma_dec = stack.cfg.sigma_dec

    with T.no_grad():
        h_t = stack.encode_pyramid(Tensor(x_t), 1)[0]
        h_next = stack.encode_pyramid(Tensor(x_next), 1)[0]
        p_dist, _ = stack.prior_step(1, stack.init_prior_state(1, 1), h_t, None)
        q_dist, _ = stack.posterior_infer(1, stack.init_posterior_state(1, 1), h_next)
        kl = kl_divergence(q_dist, p_dist).item()

        mu_p = float(p_dist.mean.data.reshape(-1)[0])
        sd_p = float(p_dist.std_value().reshape(-1)[0])
        mu_q = float(q_dist.mean.data.reshape(-1)[0])
        sd_q = float(q_dist.std_value().reshape(-1)[0])

        lo = min(mu_p - 12 * sd_p, mu_q - 12 * sd_q)
        hi = max(mu_p + 12 * sd_p, mu_q + 12 * sd_q)
        z = np.linspace(lo, hi, n_points)
        dz = z[1] - z[0]
        w = np.full(n_points, dz)
        w[0] = w[-1] = dz / 2

        h_tiled = Tensor(np.broadcast_to(h_t.data, (n_points, 1, 1, 4)).copy())
        u = Tensor(z.reshape(n_points, 1, 1, 1))
        xhat = stack.decode_topdown(1, u, [h_tiled]).data    # [n, 2, 2, 1]

    npix = x_next.size
    sq_err = ((xhat - x_next) ** 2).sum(axis=(1, 2, 3))
    loglik = -0.5 * npix * math.log(2 * math.pi * sigma_dec ** 2) - sq_err / (2 * sigma_dec ** 2)

    log_prior = -0.5 * math.log(2 * math.pi) - np.log(sd_p) - (z - mu_p) ** 2 / (2 * sd_p ** 2)
    # log-evidence: logsumexp over the grid with trapezoid weights
    arg = log_prior + loglik + np.log(w)
    m = arg.max()
    log_evidence = m + math.log(np.exp(arg - m).sum())

    q_density = np.exp(-0.5 * ((z - mu_q) / sd_q) ** 2) / (sd_q * math.sqrt(2 * math.pi))
    recon = float((q_density * w * loglik).sum())
    elbo = recon - stack.cfg.beta * kl
    return {"elbo": elbo, "log_evidence": float(log_evidence), "kl": kl,
            "slack": float(log_evidence) - elbo}


def elbo_bound_check(trials: int = 100, seed: int = 5150, tol: float = 1e-6) -> dict:
    """The bound must hold for every random parameterization."""
    worst = -np.inf
    for i in range(trials):
        r = elbo_vs_quadrature(seed=seed + i)
        violation = r["elbo"] - r["log_evidence"]
        worst = max(worst, violation)
    return {"trials": trials, "worst_violation": float(worst), "tol": tol,
            "passed": bool(worst <= tol)}


# ---------------------------------------------------------------------------
# metric units
# ---------------------------------------------------------------------------


def metric_unit_checks() -> dict:
    from .metrics import psnr, ssim
    a = np.zeros((16, 16, 1))
    b = np.full((16, 16, 1), 0.1)
    const0 = np.zeros((16, 16, 1))
    const1 = np.ones((16, 16, 1))
    expected_const = 1e-4 / (1 + 1e-4)
    return {
        "psnr_uniform_0.1": psnr(a, b),
        "psnr_identical": psnr(a, a),
        "ssim_identical": ssim(const1, const1),
        "ssim_const0_vs_const1": ssim(const0, const1),
        "ssim_const_expected": expected_const,
    }


# ---------------------------------------------------------------------------
# suite runner (used by the CLI `verify` subcommand)
# ---------------------------------------------------------------------------


@dataclass
class SuiteResult:
    name: str
    passed: bool
    detail: str


def run_verification(gradcheck_instances: int = 100) -> list[SuiteResult]:
    results = []

    checks = gradient_check(instances_per_op=gradcheck_instances)
    worst = max(checks, key=lambda c: c.max_rel_err)
    results.append(SuiteResult(
        "gradient-check",
        all(c.passed for c in checks),
        f"{len(checks)} ops x {gradcheck_instances} instances, "
        f"worst {worst.op} rel err {worst.max_rel_err:.2e} (tol {worst.tol:.0e})"))

    gaps = [kl_monte_carlo_gap(seed=s) for s in (7, 8, 9)]
    ok = all(g["gap"] <= 3 * g["stderr"] for g in gaps)
    worst_g = max(gaps, key=lambda g: g["gap"] / g["stderr"])
    results.append(SuiteResult(
        "kl-monte-carlo", ok,
        f"worst gap {worst_g['gap']:.4f} vs 3*stderr {3 * worst_g['stderr']:.4f}"))

    kl_min = kl_nonneg_min()
    results.append(SuiteResult("kl-nonnegative", kl_min >= -1e-10,
                               f"min KL over 1000 pairs: {kl_min:.3e}"))

    bound = elbo_bound_check()
    results.append(SuiteResult(
        "elbo-bound", bound["passed"],
        f"worst violation {bound['worst_violation']:.3e} over {bound['trials']} trials"))

    units = metric_unit_checks()
    units_ok = (abs(units["psnr_uniform_0.1"] - 20.0) < 1e-9
                and units["psnr_identical"] == 100.0
                and units["ssim_identical"] == 1.0
                and abs(units["ssim_const0_vs_const1"] - units["ssim_const_expected"]) < 1e-9)
    results.append(SuiteResult(
        "metric-units", units_ok,
        f"psnr {units['psnr_uniform_0.1']:.6f} dB, ssim const case {units['ssim_const0_vs_const1']:.6e}"))

    return results
