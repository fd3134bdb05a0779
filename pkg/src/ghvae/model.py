"""The hierarchical latent video model and its greedy, module-by-module training graph.

A stack holds K modules. Module k owns four subnetworks:

  * encoder: halves the spatial extents of the level k-1 hidden map while
    expanding channels, giving the level-k hidden map.
  * decoder: consumes the level-k hidden map of the current frame together
    with a top-down signal u_k (latent-shaped) and produces u_{k-1} one level
    below; the level-1 decoder emits the predicted frame through a sigmoid.
  * prior: a convolutional GRU over the current frame's deepest hidden map
    (plus the action, tiled spatially) emitting a diagonal Gaussian over the
    next latent. The only stochastic source at test time.
  * posterior: a convolutional GRU over the *next* frame's hidden map emitting
    the latent mean; its std is a fixed constant. Train-time only.

During greedy phase k, modules 1..k-1 are frozen: their encoders run without
gradient recording (nothing retained), while their decoders still carry
gradients for the activations on the path from the trainable latent down to
pixels. At test time only the deepest latent is sampled; each decoder
propagates that uncertainty one level down until it reaches pixel space.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

from . import tensor as T
from .distributions import DiagonalGaussian, STD_MAX, STD_MIN, gaussian_log_prob, kl_divergence, sample_reparam
from .rng import make_rng
from .tensor import GruWeights, Parameter, Tensor


class LadderError(ValueError):
    """A latent ladder violates the shape constraints."""


@dataclass(frozen=True)
class LatentSpec:
    """Per-level geometry: spatial extents and hidden/latent channel counts."""

    level: int
    height: int
    width: int
    c_hidden: int
    c_latent: int


def build_ladder(image_h: int, image_w: int, c_hidden: Sequence[int], c_latent: Sequence[int]) -> list[LatentSpec]:
    """Validate and construct the per-level shape ladder for a given image size."""
    if len(c_hidden) != len(c_latent) or not c_hidden:
        raise LadderError("c_hidden and c_latent must be equal-length, nonempty sequences")
    specs = []
    h, w = image_h, image_w
    prev_ch = 0
    for k, (ch, cz) in enumerate(zip(c_hidden, c_latent), start=1):
        if h % 2 or w % 2:
            raise LadderError(f"level {k}: spatial extents {h}x{w} not divisible by 2")
        h, w = h // 2, w // 2
        if h < 1 or w < 1:
            raise LadderError(f"level {k}: spatial extents collapse below 1")
        if ch <= prev_ch:
            raise LadderError(f"level {k}: c_hidden={ch} must exceed previous level's {prev_ch}")
        if not 1 <= cz < ch:
            raise LadderError(f"level {k}: c_latent={cz} must satisfy 1 <= c_latent < c_hidden={ch}")
        specs.append(LatentSpec(level=k, height=h, width=w, c_hidden=ch, c_latent=cz))
        prev_ch = ch
    return specs


def validate_extension(prev: LatentSpec, spec: LatentSpec) -> None:
    if spec.level != prev.level + 1:
        raise LadderError(f"new level {spec.level} does not follow level {prev.level}")
    if spec.height * 2 != prev.height or spec.width * 2 != prev.width:
        raise LadderError(
            f"level {spec.level}: extents {spec.height}x{spec.width} are not half of {prev.height}x{prev.width}")
    if spec.c_hidden <= prev.c_hidden:
        raise LadderError(f"level {spec.level}: c_hidden must increase past {prev.c_hidden}")
    if not 1 <= spec.c_latent < spec.c_hidden:
        raise LadderError(f"level {spec.level}: c_latent={spec.c_latent} out of range")


@dataclass
class StackConfig:
    sigma_post: float = 0.1
    sigma_dec: float = 1.0
    beta: float = 1.0
    kernel_size: int = 3
    gn_groups: int = 4


def _he(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(dtype)


class _ParamFactory:
    """Creates uniquely named parameters for one module build."""

    def __init__(self, prefix: str, rng: np.random.Generator, dtype):
        self.prefix = prefix
        self.rng = rng
        self.dtype = dtype
        self.params: list[Parameter] = []

    def conv(self, name: str, kh: int, kw: int, cin: int, cout: int, zero: bool = False):
        w = np.zeros((kh, kw, cin, cout), self.dtype) if zero else _he(self.rng, (kh, kw, cin, cout), kh * kw * cin, self.dtype)
        return self._pair(name, w, np.zeros(cout, self.dtype))

    def deconv(self, name: str, kh: int, kw: int, cout: int, cin: int):
        w = _he(self.rng, (kh, kw, cout, cin), kh * kw * cin, self.dtype)
        return self._pair(name, w, np.zeros(cout, self.dtype))

    def norm(self, name: str, channels: int):
        g = Parameter(f"{self.prefix}/{name}/gamma", np.ones(channels, self.dtype))
        b = Parameter(f"{self.prefix}/{name}/beta", np.zeros(channels, self.dtype))
        self.params += [g, b]
        return g, b

    def _pair(self, name: str, w: np.ndarray, b: np.ndarray):
        pw = Parameter(f"{self.prefix}/{name}/weight", w)
        pb = Parameter(f"{self.prefix}/{name}/bias", b)
        self.params += [pw, pb]
        return pw, pb


class Encoder:
    def __init__(self, f: _ParamFactory, cin: int, spec: LatentSpec, cfg: StackConfig):
        ks = cfg.kernel_size
        self.groups = cfg.gn_groups
        self.conv1 = f.conv("encoder/conv1", ks, ks, cin, spec.c_hidden)
        self.norm1 = f.norm("encoder/norm1", spec.c_hidden)
        self.conv2 = f.conv("encoder/conv2", ks, ks, spec.c_hidden, spec.c_hidden)
        self.norm2 = f.norm("encoder/norm2", spec.c_hidden)

    def forward(self, x: Tensor) -> Tensor:
        y = T.conv2d(x, self.conv1[0].tensor, self.conv1[1].tensor, stride=2, padding="same")
        y = T.leaky_relu(T.group_norm(y, self.norm1[0].tensor, self.norm1[1].tensor, self.groups), 0.2)
        y = T.conv2d(y, self.conv2[0].tensor, self.conv2[1].tensor, stride=1, padding="same")
        return T.leaky_relu(T.group_norm(y, self.norm2[0].tensor, self.norm2[1].tensor, self.groups), 0.2)


class Decoder:
    def __init__(self, f: _ParamFactory, spec: LatentSpec, c_below: int, is_pixel_level: bool, cfg: StackConfig):
        ks = cfg.kernel_size
        self.groups = cfg.gn_groups
        self.is_pixel_level = is_pixel_level
        self.deconv = f.deconv("decoder/deconv", ks, ks, spec.c_hidden, spec.c_hidden + spec.c_latent)
        self.norm = f.norm("decoder/norm", spec.c_hidden)
        self.conv_out = f.conv("decoder/conv_out", ks, ks, spec.c_hidden, c_below)

    def forward(self, h_t: Tensor, u: Tensor) -> Tensor:
        x = T.concat_channels(h_t, u)
        y = T.conv2d_transpose(x, self.deconv[0].tensor, self.deconv[1].tensor, stride=2)
        y = T.leaky_relu(T.group_norm(y, self.norm[0].tensor, self.norm[1].tensor, self.groups), 0.2)
        y = T.conv2d(y, self.conv_out[0].tensor, self.conv_out[1].tensor, stride=1, padding="same")
        return T.sigmoid(y) if self.is_pixel_level else y


class GruCell:
    def __init__(self, f: _ParamFactory, name: str, cin: int, channels: int, cfg: StackConfig):
        ks = cfg.kernel_size
        self.channels = channels
        gw, gb = f.conv(f"{name}/gates", ks, ks, cin + channels, 2 * channels)
        cw, cb = f.conv(f"{name}/cand", ks, ks, cin + channels, channels)
        self._w = (gw, gb, cw, cb)

    def weights(self) -> GruWeights:
        gw, gb, cw, cb = self._w
        return GruWeights(gw.tensor, gb.tensor, cw.tensor, cb.tensor)

    def init_state(self, batch: int, height: int, width: int, dtype) -> Tensor:
        return Tensor(np.zeros((batch, height, width, self.channels), dtype))

    def step(self, state: Tensor, inp: Tensor) -> Tensor:
        return T.conv_gru_step(state, inp, self.weights())


class PriorNet:
    """Recurrent map from (hidden map, action) to a Gaussian over the next latent."""

    def __init__(self, f: _ParamFactory, spec: LatentSpec, action_dim: int, cfg: StackConfig):
        self.action_dim = action_dim
        self.spec = spec
        # recurrent state is latent-width: the cell only has to carry what the
        # distribution heads need, and shallow levels stay cheap
        self.gru = GruCell(f, "prior/gru", spec.c_hidden + action_dim, spec.c_latent, cfg)
        # one head emits mean and raw std, split on channels; zero-init so the
        # initial prior is centered at 0
        self.head = f.conv("prior/head", 1, 1, spec.c_latent, 2 * spec.c_latent, zero=True)

    def step(self, state: Tensor, h: Tensor, action: Optional[Tensor]):
        if self.action_dim:
            if action is None:
                raise ValueError("action-conditioned prior called without an action")
            if action.shape[-1] != self.action_dim:
                raise T.ShapeError(
                    f"prior: action dim {action.shape[-1]} != configured action_dim {self.action_dim}")
            inp = T.concat_channels(h, T.tile_spatial(action, self.spec.height, self.spec.width))
        else:
            inp = h
        new_state = self.gru.step(state, inp)
        out = T.conv2d(new_state, self.head[0].tensor, self.head[1].tensor)
        cz = self.spec.c_latent
        mu = T.slice_channels(out, 0, cz)
        raw = T.slice_channels(out, cz, 2 * cz)
        std = T.clamp(T.softplus(raw), STD_MIN, STD_MAX)
        return DiagonalGaussian(mean=mu, log_std=T.log(std)), new_state


class PosteriorNet:
    """Recurrent map from the next frame's hidden map to a fixed-std Gaussian."""

    def __init__(self, f: _ParamFactory, spec: LatentSpec, cfg: StackConfig):
        self.spec = spec
        self.gru = GruCell(f, "posterior/gru", spec.c_hidden, spec.c_latent, cfg)
        self.mean_head = f.conv("posterior/mean_head", 1, 1, spec.c_latent, spec.c_latent, zero=True)

    def step(self, state: Tensor, h_next: Tensor, sigma: float):
        new_state = self.gru.step(state, h_next)
        mu = T.conv2d(new_state, self.mean_head[0].tensor, self.mean_head[1].tensor)
        return DiagonalGaussian(mean=mu, fixed_std=sigma), new_state


class GhvaeModule:
    def __init__(self, spec: LatentSpec, cin: int, c_below: int, action_dim: int,
                 cfg: StackConfig, rng: np.random.Generator, dtype):
        if spec.c_hidden % cfg.gn_groups:
            raise LadderError(
                f"level {spec.level}: c_hidden={spec.c_hidden} not divisible by gn_groups={cfg.gn_groups}")
        f = _ParamFactory(f"module{spec.level}", rng, dtype)
        self.spec = spec
        self.encoder = Encoder(f, cin, spec, cfg)
        self.decoder = Decoder(f, spec, c_below, is_pixel_level=(spec.level == 1), cfg=cfg)
        self.prior = PriorNet(f, spec, action_dim, cfg)
        self.posterior = PosteriorNet(f, spec, cfg)
        self.parameters: list[Parameter] = f.params
        self.frozen = False

    def set_frozen(self, flag: bool) -> None:
        self.frozen = flag
        for p in self.parameters:
            p.requires_grad = not flag

    def named_parameters(self) -> Iterator[Parameter]:
        return iter(self.parameters)

    def serialize(self) -> bytes:
        return b"".join(T.tensor_to_bytes(p.data) for p in sorted(self.parameters, key=lambda p: p.name))

    def content_hash(self) -> str:
        return hashlib.sha256(self.serialize()).hexdigest()


@dataclass
class ElboTerms:
    """Per-phase objective pieces: elbo = recon - beta * kl."""

    recon: Tensor
    kl: Tensor
    elbo: Tensor

    @property
    def values(self) -> tuple[float, float, float]:
        return self.recon.item(), self.kl.item(), self.elbo.item()


@dataclass
class TrainPhaseConfig:
    phase: int = 1
    batch: int = 4
    horizon: int = 10
    context: int = 2
    lr: float = 1e-3
    steps: int = 1000
    seed: int = 0
    mode: str = "greedy"  # greedy | e2e | e2e_finetune

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError(f"horizon must be >= 1, got {self.horizon}")
        if self.context < 1:
            raise ValueError(f"context must be >= 1, got {self.context}")
        if self.mode not in ("greedy", "e2e", "e2e_finetune"):
            raise ValueError(f"unknown mode {self.mode!r}")


class GhvaeStack:
    """An ordered stack of modules with at most the deepest one unfrozen."""

    def __init__(self, image_shape: tuple[int, int, int], action_dim: int,
                 cfg: Optional[StackConfig] = None, dtype=np.float32):
        self.image_shape = tuple(image_shape)
        self.action_dim = int(action_dim)
        self.cfg = cfg or StackConfig()
        self.dtype = np.dtype(dtype)
        self.modules: list[GhvaeModule] = []
        self._allow_posterior = True

    # -- construction ------------------------------------------------------

    @property
    def depth(self) -> int:
        return len(self.modules)

    def ladder(self) -> list[LatentSpec]:
        return [m.spec for m in self.modules]

    def add_module(self, spec: LatentSpec, seed: int) -> "GhvaeStack":
        """Append a fresh module at the new deepest level; earlier modules must be frozen."""
        h0, w0, c0 = self.image_shape
        if self.modules:
            if any(not m.frozen for m in self.modules):
                raise RuntimeError("add_module requires all existing modules to be frozen")
            validate_extension(self.modules[-1].spec, spec)
            prev = self.modules[-1].spec
            cin, c_below = prev.c_hidden, prev.c_latent
        else:
            if spec.level != 1 or spec.height * 2 != h0 or spec.width * 2 != w0:
                raise LadderError(
                    f"level-1 extents {spec.height}x{spec.width} must halve the image {h0}x{w0}")
            if not 1 <= spec.c_latent < spec.c_hidden:
                raise LadderError("level 1: c_latent out of range")
            cin, c_below = c0, c0
        rng = make_rng(seed, index=1000 + spec.level)
        mod = GhvaeModule(spec, cin, c_below, self.action_dim, self.cfg, rng, self.dtype)
        self.modules.append(mod)
        return self

    @classmethod
    def build(cls, image_shape, action_dim, specs: Sequence[LatentSpec], seed: int,
              cfg: Optional[StackConfig] = None, dtype=np.float32) -> "GhvaeStack":
        """Build a K-module stack in one go (modules arrive unfrozen, then all but the last frozen)."""
        stack = cls(image_shape, action_dim, cfg, dtype)
        for spec in specs:
            for m in stack.modules:
                m.set_frozen(True)
            stack.add_module(spec, seed)
        return stack

    def set_phase(self, k: int) -> None:
        """Freeze modules below k, unfreeze module k (the deepest trainable one)."""
        if not 1 <= k <= self.depth:
            raise ValueError(f"phase {k} out of range for a {self.depth}-module stack")
        for i, m in enumerate(self.modules, start=1):
            m.set_frozen(i != k)

    def unfreeze_all(self) -> None:
        for m in self.modules:
            m.set_frozen(False)

    def trainable_parameters(self) -> list[Parameter]:
        return [p for m in self.modules if not m.frozen for p in m.parameters]

    def all_parameters(self) -> list[Parameter]:
        return [p for m in self.modules for p in m.parameters]

    def module_hashes(self) -> list[str]:
        return [m.content_hash() for m in self.modules]

    # -- forward pieces ----------------------------------------------------

    def encode_pyramid(self, frame: Tensor, up_to: int) -> list[Tensor]:
        """Hidden maps for levels 1..up_to; frozen encoders run without recording."""
        if not 0 <= up_to <= self.depth:
            raise ValueError(f"up_to={up_to} out of range for depth {self.depth}")
        h0, w0, c0 = self.image_shape
        if frame.shape[1:] != (h0, w0, c0):
            raise T.ShapeError(f"encode_pyramid: frame extents {frame.shape[1:]} != image {(h0, w0, c0)}")
        hs: list[Tensor] = []
        x = frame
        for m in self.modules[:up_to]:
            if m.frozen:
                with T.no_grad():
                    x = m.encoder.forward(x)
            else:
                x = m.encoder.forward(x)
            hs.append(x)
        return hs

    def decode_topdown(self, k_top: int, u: Tensor, hs: Sequence[Tensor]) -> Tensor:
        """Run decoders k_top..1; u starts as the latent-shaped top-down signal."""
        if len(hs) < k_top:
            raise ValueError(f"decode_topdown: need hidden maps for levels 1..{k_top}, got {len(hs)}")
        for j in range(k_top, 0, -1):
            u = self.modules[j - 1].decoder.forward(hs[j - 1], u)
        return u

    def prior_step(self, k: int, state: Tensor, h: Tensor, action: Optional[Tensor]):
        return self.modules[k - 1].prior.step(state, h, action)

    def posterior_infer(self, k: int, state: Tensor, h_next: Tensor):
        if not self._allow_posterior:
            raise RuntimeError("posterior inference is disabled on the test-time code path")
        return self.modules[k - 1].posterior.step(state, h_next, self.cfg.sigma_post)

    def init_prior_state(self, k: int, batch: int) -> Tensor:
        s = self.modules[k - 1].spec
        return self.modules[k - 1].prior.gru.init_state(batch, s.height, s.width, self.dtype)

    def init_posterior_state(self, k: int, batch: int) -> Tensor:
        s = self.modules[k - 1].spec
        return self.modules[k - 1].posterior.gru.init_state(batch, s.height, s.width, self.dtype)


def greedy_phase_elbo(stack: GhvaeStack, k: int, frames: np.ndarray,
                      actions: Optional[np.ndarray], cfg: TrainPhaseConfig,
                      noise_rng: np.random.Generator) -> ElboTerms:
    """Objective for training phase k over one batch of episodes.

    ``frames`` is [B, L, H, W, C] with L >= context + horizon; the first
    ``context`` frames only warm up the recurrent states. Hidden pyramids come
    from ground-truth frames at every step (teacher forcing); the latent is
    drawn from the posterior with reparameterized noise, and the top-down
    decode of that latent scores the next frame under a fixed-std Gaussian.
    """
    n_ctx, horizon = cfg.context, cfg.horizon
    b, length = frames.shape[0], frames.shape[1]
    if length < n_ctx + horizon:
        raise ValueError(f"episode length {length} shorter than context+horizon = {n_ctx + horizon}")
    if stack.action_dim and actions is None:
        raise ValueError("action-conditioned stack requires actions")

    def action_at(t: int) -> Optional[Tensor]:
        if not stack.action_dim:
            return None
        return Tensor(np.ascontiguousarray(actions[:, t], dtype=stack.dtype))

    # all needed frames share one encoder pass, folded time-major into the batch
    n_frames = n_ctx + horizon
    flat = np.ascontiguousarray(
        frames[:, :n_frames].transpose(1, 0, 2, 3, 4), dtype=stack.dtype
    ).reshape((n_frames * b,) + frames.shape[2:])
    hs_all = stack.encode_pyramid(Tensor(flat), k)

    def h_at(level: int, t: int) -> Tensor:
        return T.batch_slice(hs_all[level - 1], t * b, (t + 1) * b)

    prior_state = stack.init_prior_state(k, b)
    post_state = stack.init_posterior_state(k, b)
    for t in range(n_ctx - 1):
        _, prior_state = stack.prior_step(k, prior_state, h_at(k, t), action_at(t))
        _, post_state = stack.posterior_infer(k, post_state, h_at(k, t + 1))

    p_means, p_log_stds, q_means = [], [], []
    for t in range(n_ctx - 1, n_ctx + horizon - 1):
        p_dist, prior_state = stack.prior_step(k, prior_state, h_at(k, t), action_at(t))
        q_dist, post_state = stack.posterior_infer(k, post_state, h_at(k, t + 1))
        p_means.append(p_dist.mean)
        p_log_stds.append(p_dist.log_std)
        q_means.append(q_dist.mean)

    # decode every window step in one top-down pass, latents folded time-major
    spec = stack.modules[k - 1].spec
    q_all = DiagonalGaussian(mean=T.concat_batch(*q_means), fixed_std=stack.cfg.sigma_post)
    p_all = DiagonalGaussian(mean=T.concat_batch(*p_means), log_std=T.concat_batch(*p_log_stds))
    noise = Tensor(noise_rng.standard_normal(
        (horizon * b, spec.height, spec.width, spec.c_latent)).astype(stack.dtype))
    z = sample_reparam(q_all, noise)
    h_window = [T.batch_slice(hs_all[j], (n_ctx - 1) * b, (n_ctx - 1 + horizon) * b)
                for j in range(k)]
    xhat = stack.decode_topdown(k, z, h_window)

    x_next = Tensor(flat[n_ctx * b:])
    recon_total = gaussian_log_prob(x_next, xhat, stack.cfg.sigma_dec)
    kl_total = kl_divergence(q_all, p_all)
    elbo = T.sub(recon_total, T.scale(kl_total, stack.cfg.beta))
    return ElboTerms(recon=recon_total, kl=kl_total, elbo=elbo)


def rollout(stack: GhvaeStack, context: np.ndarray, actions: Optional[np.ndarray],
            horizon: int, rng: np.random.Generator, mode: str = "test",
            future: Optional[np.ndarray] = None, prior_mode: str = "learned",
            sample_trace: Optional[list] = None) -> np.ndarray:
    """Predict ``horizon`` frames after the context, feeding predictions back in.

    mode="test" samples only the deepest latent from the prior (or from a unit
    Gaussian when prior_mode="uniform"); mode="posterior" is a diagnostic that
    draws the latent from the posterior of the provided ground-truth future.
    Returns [B, horizon, H, W, C].
    """
    if mode not in ("test", "posterior"):
        raise ValueError(f"unknown rollout mode {mode!r}")
    if prior_mode not in ("learned", "uniform"):
        raise ValueError(f"unknown prior_mode {prior_mode!r}")
    k = stack.depth
    if k < 1:
        raise RuntimeError("rollout on an empty stack")
    b, n_ctx = context.shape[0], context.shape[1]
    h0, w0, c0 = stack.image_shape
    if horizon == 0:
        return np.zeros((b, 0, h0, w0, c0), dtype=stack.dtype)
    if stack.action_dim:
        need = n_ctx - 1 + horizon
        if actions is None or actions.shape[1] < need:
            raise ValueError(f"action-conditioned rollout needs {need} actions per episode")
    if mode == "posterior":
        if future is None or future.shape[1] < horizon:
            raise ValueError("posterior-mode rollout requires ground-truth future frames")

    spec = stack.modules[k - 1].spec
    out = np.empty((b, horizon, h0, w0, c0), dtype=stack.dtype)

    def action_at(t: int) -> Optional[Tensor]:
        if not stack.action_dim:
            return None
        return Tensor(np.ascontiguousarray(actions[:, t], dtype=stack.dtype))

    allow_before = stack._allow_posterior
    stack._allow_posterior = mode == "posterior"
    try:
        with T.no_grad():
            prior_state = stack.init_prior_state(k, b)
            post_state = stack.init_posterior_state(k, b)
            for t in range(n_ctx - 1):
                hs = stack.encode_pyramid(Tensor(np.ascontiguousarray(context[:, t], dtype=stack.dtype)), k)
                _, prior_state = stack.prior_step(k, prior_state, hs[k - 1], action_at(t))
                if mode == "posterior":
                    h_next = stack.encode_pyramid(
                        Tensor(np.ascontiguousarray(context[:, t + 1], dtype=stack.dtype)), k)[k - 1]
                    _, post_state = stack.posterior_infer(k, post_state, h_next)

            current = Tensor(np.ascontiguousarray(context[:, n_ctx - 1], dtype=stack.dtype))
            for step in range(horizon):
                t = n_ctx - 1 + step
                hs = stack.encode_pyramid(current, k)
                p_dist, prior_state = stack.prior_step(k, prior_state, hs[k - 1], action_at(t))
                noise = Tensor(rng.standard_normal(
                    (b, spec.height, spec.width, spec.c_latent)).astype(stack.dtype))
                if mode == "posterior":
                    h_next = stack.encode_pyramid(
                        Tensor(np.ascontiguousarray(future[:, step], dtype=stack.dtype)), k)[k - 1]
                    q_dist, post_state = stack.posterior_infer(k, post_state, h_next)
                    z = sample_reparam(q_dist, noise)
                elif prior_mode == "uniform":
                    z = noise
                else:
                    z = sample_reparam(p_dist, noise)
                if sample_trace is not None:
                    sample_trace.append((k, step))
                xhat = stack.decode_topdown(k, z, hs)
                out[:, step] = xhat.data
                current = xhat
    finally:
        stack._allow_posterior = allow_before
    return out


def uniform_prior_rollout(stack: GhvaeStack, context: np.ndarray, actions: Optional[np.ndarray],
                          horizon: int, rng: np.random.Generator,
                          sample_trace: Optional[list] = None) -> np.ndarray:
    """Like rollout, but the deepest latent is drawn from N(0, I), ignoring the learned prior."""
    return rollout(stack, context, actions, horizon, rng, mode="test",
                   prior_mode="uniform", sample_trace=sample_trace)
