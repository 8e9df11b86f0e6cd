"""Analytic and Monte-Carlo score fields, and the score-mismatch metric."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Union

import numpy as np
from scipy.special import logsumexp, softmax

from .diffusion import NoiseSchedule, ScoreFn, perturb


@dataclass(frozen=True)
class MixtureSpec:
    """Isotropic 2D Gaussian mixture: N(means[k], variances[k] * I) with weights[k]."""

    means: np.ndarray
    variances: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        variances = np.asarray(self.variances, dtype=np.float64).reshape(-1)
        weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        k = means.shape[0]
        if k < 1 or variances.shape != (k,) or weights.shape != (k,):
            raise ValueError("means, variances and weights must describe >= 1 component")
        if np.any(variances <= 0):
            raise ValueError("component variances must be positive")
        if np.any(weights <= 0) or abs(weights.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be positive and sum to 1")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "variances", variances)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def from_components(cls, components) -> MixtureSpec:
        """Build from ``(mean, variance, weight)`` triples; weights are normalised."""
        means, variances, weights = zip(*components)
        w = np.asarray(weights, dtype=np.float64)
        return cls(np.asarray(means, dtype=np.float64), np.asarray(variances), w / w.sum())

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        idx = rng.choice(self.n_components, size=n, p=self.weights)
        std = np.sqrt(self.variances[idx])[:, None]
        return self.means[idx] + std * rng.standard_normal((n, self.means.shape[1]))

    def translated(self, shift) -> MixtureSpec:
        return MixtureSpec(self.means + np.asarray(shift, dtype=np.float64),
                           self.variances, self.weights)

    def _log_terms(self, x: np.ndarray, sigma):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        sig = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (x.shape[0],))
        var = self.variances[None, :] + sig[:, None] ** 2          # (n, K)
        diff = self.means[None, :, :] - x[:, None, :]              # (n, K, d)
        d = x.shape[1]
        sq = np.sum(diff * diff, axis=2)
        logp = (np.log(self.weights)[None, :] - 0.5 * d * np.log(2 * np.pi * var)
                - 0.5 * sq / var)
        return logp, diff, var

    def log_density(self, x: np.ndarray, sigma=0.0) -> np.ndarray:
        """log of the mixture convolved with N(0, sigma^2 I)."""
        logp, _, _ = self._log_terms(x, sigma)
        return logsumexp(logp, axis=1)


def benchmark_mixture(seed: int | np.random.Generator, n_components: int = 10,
                      box: float = 4.0, variance: float = 0.1,
                      min_separation: float = 2.0) -> MixtureSpec:
    """Random equal-weight mixture with means in [-box, box]^2, pairwise >= min_separation apart."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    means: list[np.ndarray] = []
    for _ in range(100_000):
        if len(means) == n_components:
            break
        cand = rng.uniform(-box, box, size=2)
        if all(np.linalg.norm(cand - m) >= min_separation for m in means):
            means.append(cand)
    else:
        raise ValueError("could not place mixture means; relax min_separation")
    k = n_components
    return MixtureSpec(np.array(means), np.full(k, variance), np.full(k, 1.0 / k))


def analytic_mixture_score(mix: MixtureSpec, x: np.ndarray, sigma) -> np.ndarray:
    """Exact score of the mixture convolved with N(0, sigma^2 I).

    ``x`` is one point or a batch; ``sigma`` a scalar or one value per row.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    logp, diff, var = mix._log_terms(x, sigma)
    resp = softmax(logp, axis=1)
    out = np.einsum("nk,nkd->nd", resp / var, diff)
    return out[0] if single else out


def analytic_score_fn(mix: MixtureSpec, schedule: NoiseSchedule) -> ScoreFn:
    """(x, t) evaluator of the analytic mixture score."""
    return lambda x, t: analytic_mixture_score(mix, x, schedule.sigma(t))


@dataclass(frozen=True)
class ReferenceBatch:
    points: np.ndarray

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        if pts.shape[0] < 1:
            raise ValueError("reference batch must hold at least one sample")
        if not np.all(np.isfinite(pts)):
            raise ValueError("reference batch has non-finite entries")
        object.__setattr__(self, "points", pts)

    @property
    def size(self) -> int:
        return self.points.shape[0]


def stf_weights(B: ReferenceBatch | np.ndarray, xt: np.ndarray, sigma) -> np.ndarray:
    """Posterior weights of each reference point for each query, shape (n, |B|)."""
    ref = B.points if isinstance(B, ReferenceBatch) else ReferenceBatch(B).points
    xt = np.atleast_2d(np.asarray(xt, dtype=np.float64))
    sig = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (xt.shape[0],))
    diff = xt[:, None, :] - ref[None, :, :]
    sq = np.einsum("nmd,nmd->nm", diff, diff)
    return softmax(-sq / (2.0 * sig[:, None] ** 2), axis=1)


def stf_score(B: ReferenceBatch | np.ndarray, xt: np.ndarray, sigma,
              chunk: int = 256) -> np.ndarray:
    """Stable-target-field estimate of the noisy-data score at ``xt``.

    Weighted average of the single-sample targets (x0_i - x_t) / sigma^2 with
    weights softmax(-||x_t - x0_i||^2 / (2 sigma^2)).
    """
    ref = B.points if isinstance(B, ReferenceBatch) else ReferenceBatch(B).points
    xt = np.asarray(xt, dtype=np.float64)
    single = xt.ndim == 1
    xt = np.atleast_2d(xt)
    sig = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (xt.shape[0],))
    if np.any(sig <= 0):
        raise ValueError("sigma must be positive")
    out = np.empty_like(xt)
    for lo in range(0, xt.shape[0], chunk):
        q, s = xt[lo:lo + chunk], sig[lo:lo + chunk]
        w = stf_weights(ref, q, s)
        out[lo:lo + chunk] = (w @ ref - q) / s[:, None] ** 2
    return out[0] if single else out


@dataclass(frozen=True)
class MismatchReport:
    d_mis: float
    std: float
    n_samples: int
    t_descriptor: str
    lower_bound: float | None = None


Reference = Union[MixtureSpec, ReferenceBatch, Callable[[np.random.Generator, int], np.ndarray]]


def _as_score_fn(net) -> ScoreFn:
    return net.score if hasattr(net, "score") else net


def mismatch_distances(net, assessed_sampler, reference: Reference, schedule: NoiseSchedule,
                       n_eval: int, rng: np.random.Generator, t: float | None = None,
                       ref_size: int = 4096) -> np.ndarray:
    """Per-sample ||s_net(x_t, t) - true score|| over x_t drawn from the assessed distribution."""
    if n_eval < 1:
        raise ValueError("n_eval must be >= 1")
    score = _as_score_fn(net)
    x0 = assessed_sampler(rng, n_eval)
    ts = schedule.sample_t(rng, n_eval) if t is None else np.full(n_eval, float(t))
    sig = schedule.sigma(ts)
    xt = perturb(x0, sig, rng.standard_normal(x0.shape))
    if isinstance(reference, MixtureSpec):
        real = analytic_mixture_score(reference, xt, sig)
    else:
        ref = reference if isinstance(reference, ReferenceBatch) else ReferenceBatch(reference(rng, ref_size))
        real = stf_score(ref, xt, sig)
    pred = score(xt, ts)
    bad = ~np.all(np.isfinite(pred), axis=1)
    if bad.any():
        raise FloatingPointError(f"non-finite network score at eval sample {int(np.flatnonzero(bad)[0])}")
    return np.linalg.norm(pred - real, axis=1)


def mismatch_score(net, assessed_sampler, reference: Reference, schedule: NoiseSchedule,
                   n_eval: int = 4096, seed: int | np.random.Generator = 0,
                   t: float | None = None, ref_size: int = 4096) -> MismatchReport:
    """Mean L2 gap between a network's score and the true score on noisy assessed samples.

    ``reference`` is the analytic mixture, a fixed reference batch, or a sampler
    from which a fresh STF reference batch of ``ref_size`` is drawn. ``t=None``
    draws t uniformly on [t_min, 1]; a float fixes the noise level.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    d = mismatch_distances(net, assessed_sampler, reference, schedule, n_eval, rng, t, ref_size)
    desc = f"U({schedule.t_min:g},1)" if t is None else f"fixed t={t:g}"
    return MismatchReport(float(d.mean()), float(d.std()), n_eval, desc)


def mismatch_with_lower_bound(net, assessed_sampler, training_sampler, reference: Reference,
                              schedule: NoiseSchedule, n_eval: int = 4096,
                              seed: int | np.random.Generator = 0, t: float | None = None,
                              ref_size: int = 4096) -> MismatchReport:
    """Mismatch on the assessed samples, plus the same metric on training data."""
    rep = mismatch_score(net, assessed_sampler, reference, schedule, n_eval, seed, t, ref_size)
    low = mismatch_score(net, training_sampler, reference, schedule, n_eval, seed, t, ref_size)
    return MismatchReport(rep.d_mis, rep.std, rep.n_samples, rep.t_descriptor, low.d_mis)


@dataclass(frozen=True)
class FieldGrid:
    positions: np.ndarray   # (R*R, 2), x varies fastest
    vectors: np.ndarray     # (R*R, 2)
    resolution: int
    lo: float
    hi: float
    t: float


def grid_points(lo: float, hi: float, resolution: int) -> np.ndarray:
    if resolution < 2:
        raise ValueError("resolution must be >= 2")
    if not lo < hi:
        raise ValueError("grid range needs lo < hi")
    ax = np.linspace(lo, hi, resolution)
    gx, gy = np.meshgrid(ax, ax)
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def gradient_field_grid(score_eval: ScoreFn, lo: float = -6.0, hi: float = 6.0,
                        resolution: int = 21, t: float = 0.5) -> FieldGrid:
    pos = grid_points(lo, hi, resolution)
    vec = np.asarray(score_eval(pos, np.full(len(pos), float(t))), dtype=np.float64)
    return FieldGrid(pos, vec, resolution, float(lo), float(hi), float(t))


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    return np.sum(a * b, axis=1) / np.maximum(na * nb, 1e-300)


def field_curl(grid: FieldGrid) -> np.ndarray:
    """Finite-difference curl dv_y/dx - dv_x/dy on the grid, shape (R, R).

    Diagnostic only: a learned score need not be a gradient field.
    """
    r = grid.resolution
    h = (grid.hi - grid.lo) / (r - 1)
    vx = grid.vectors[:, 0].reshape(r, r)
    vy = grid.vectors[:, 1].reshape(r, r)
    return np.gradient(vy, h, axis=1) - np.gradient(vx, h, axis=0)
