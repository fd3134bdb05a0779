"""Frame-similarity metrics and the best-of-S evaluation protocol.

PSNR and SSIM are plain numpy; ``evaluate`` draws S stochastic rollouts per
held-out episode, keeps the best score per metric, and aggregates as
mean +/- standard error. Every report carries its protocol so numbers are
never quoted without the sampling convention that produced them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import GhvaeStack, rollout
from .rng import make_rng
from .sim import Dataset

PSNR_CAP_DB = 100.0
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def psnr(a: np.ndarray, b: np.ndarray, max_val: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; identical frames report the 100 dB cap."""
    if a.shape != b.shape:
        raise ValueError(f"psnr: shapes {a.shape} != {b.shape}")
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(max_val * max_val / mse), PSNR_CAP_DB)


def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    k = np.exp(-(r * r) / (2.0 * sigma * sigma))
    return k / k.sum()


def _filter_valid(img: np.ndarray, k: np.ndarray) -> np.ndarray:
    # separable valid-mode correlation; img is 2-D
    n = len(k)
    v = np.apply_along_axis(lambda row: np.convolve(row, k[::-1], mode="valid"), 1, img)
    return np.apply_along_axis(lambda col: np.convolve(col, k[::-1], mode="valid"), 0, v)


def ssim(a: np.ndarray, b: np.ndarray, max_val: float = 1.0) -> float:
    """Structural similarity with the standard 11x11 sigma-1.5 Gaussian window.

    Multi-channel frames are scored per channel and averaged.
    """
    if a.shape != b.shape:
        raise ValueError(f"ssim: shapes {a.shape} != {b.shape}")
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    h, w = a.shape[:2]
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ValueError(f"ssim: frame {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    c1 = (SSIM_K1 * max_val) ** 2
    c2 = (SSIM_K2 * max_val) ** 2
    k = _gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA)
    scores = []
    for ch in range(a.shape[2]):
        x, y = a[:, :, ch], b[:, :, ch]
        mx = _filter_valid(x, k)
        my = _filter_valid(y, k)
        mxx = _filter_valid(x * x, k)
        myy = _filter_valid(y * y, k)
        mxy = _filter_valid(x * y, k)
        vx = mxx - mx * mx
        vy = myy - my * my
        cov = mxy - mx * my
        num = (2 * mx * my + c1) * (2 * cov + c2)
        den = (mx * mx + my * my + c1) * (vx + vy + c2)
        scores.append(float(np.mean(num / den)))
    return float(np.mean(scores))


@dataclass
class MetricReport:
    metric: str
    per_episode: list[float]
    protocol: dict = field(default_factory=dict)

    @property
    def count(self) -> int:
        return len(self.per_episode)

    @property
    def mean(self) -> float:
        return float(np.mean(self.per_episode))

    @property
    def stderr(self) -> float:
        vals = np.asarray(self.per_episode, np.float64)
        if len(vals) < 2:
            return 0.0
        return float(vals.std(ddof=1) / np.sqrt(len(vals)))

    def to_dict(self) -> dict:
        return {
            "metric": self.metric,
            "mean": self.mean,
            "stderr": self.stderr,
            "count": self.count,
            "per_episode": self.per_episode,
            "protocol": self.protocol,
        }


def video_score(pred: np.ndarray, truth: np.ndarray, metric: str) -> float:
    """Average frame score over a predicted clip vs its ground truth."""
    fn = psnr if metric == "psnr" else ssim
    return float(np.mean([fn(pred[t], truth[t]) for t in range(len(pred))]))


def evaluate(stack: GhvaeStack, dataset: Dataset, horizon: int, samples: int,
             seed: int = 0, context: int = 2, episodes: int | None = None,
             prior_mode: str = "learned", metrics: tuple = ("psnr", "ssim")) -> dict[str, MetricReport]:
    """Best-of-S evaluation over held-out episodes; returns one report per metric."""
    n_eps = len(dataset) if episodes is None else min(episodes, len(dataset))
    length = dataset.frames.shape[1]
    if context + horizon > length:
        raise ValueError(f"context+horizon {context + horizon} exceeds episode length {length}")
    protocol = {
        "samples_per_episode": samples,
        "horizon": horizon,
        "context": context,
        "episodes": n_eps,
        "prior_mode": prior_mode,
        "selection": "best-of-S per metric",
        "seed": seed,
    }
    per_metric: dict[str, list[float]] = {m: [] for m in metrics}
    for i in range(n_eps):
        frames, actions = dataset.episode(i)
        ctx = np.broadcast_to(frames[None, :context], (samples, context) + frames.shape[1:]).copy()
        acts = None
        if actions is not None:
            need = context - 1 + horizon
            acts = np.broadcast_to(actions[None, :need], (samples, need, actions.shape[-1])).copy()
        rng = make_rng(seed, index=i)
        preds = rollout(stack, ctx, acts, horizon, rng, mode="test", prior_mode=prior_mode)
        truth = frames[context:context + horizon]
        for m in metrics:
            best = max(video_score(preds[s], truth, m) for s in range(samples))
            per_metric[m].append(best)
    return {m: MetricReport(metric=m, per_episode=vals, protocol=dict(protocol))
            for m, vals in per_metric.items()}


def aggregate(values) -> tuple[float, float]:
    """Mean and standard error (sample std / sqrt N) of a value list."""
    vals = np.asarray(list(values), np.float64)
    if len(vals) == 0:
        raise ValueError("aggregate needs at least one value")
    err = 0.0 if len(vals) < 2 else float(vals.std(ddof=1) / np.sqrt(len(vals)))
    return float(vals.mean()), err


def format_table(reports: dict[str, MetricReport]) -> str:
    """Aligned text table, one row per metric, mean +/- standard error."""
    lines = [f"{'metric':<8} {'mean':>10} {'stderr':>10} {'episodes':>9}"]
    for name, rep in reports.items():
        lines.append(f"{name:<8} {rep.mean:>10.4f} {rep.stderr:>10.4f} {rep.count:>9d}")
    return "\n".join(lines)
