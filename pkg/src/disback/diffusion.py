"""Variance-exploding perturbation, denoising score matching, score conversions."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .nncore import (AdamState, MlpParams, MlpSpec, NonFiniteError, ShapeError,
                     adam_step, mlp_forward, mlp_init, mlp_vjp)

log = logging.getLogger(__name__)

Sampler = Callable[[np.random.Generator, int], np.ndarray]
ScoreFn = Callable[[np.ndarray, np.ndarray], np.ndarray]

DATA_DIM = 2


@dataclass(frozen=True)
class NoiseSchedule:
    """Geometric sigma(t) = sigma_min * (sigma_max / sigma_min) ** t on [0, 1]."""

    sigma_min: float = 0.01
    sigma_max: float = 10.0
    t_min: float = 0.02
    kind: str = "geometric"

    def __post_init__(self):
        if not 0.0 < self.sigma_min < self.sigma_max:
            raise ValueError("need 0 < sigma_min < sigma_max")
        if not 0.0 <= self.t_min < 1.0:
            raise ValueError("t_min must lie in [0, 1)")
        if self.kind != "geometric":
            raise ValueError(f"unsupported schedule kind {self.kind!r}")

    def sigma(self, t):
        t = np.asarray(t, dtype=np.float64)
        if np.any((t < 0.0) | (t > 1.0)) or not np.all(np.isfinite(t)):
            raise ValueError("t must lie in [0, 1]")
        return self.sigma_min * (self.sigma_max / self.sigma_min) ** t

    def sample_t(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.uniform(self.t_min, 1.0, size=n)


def sigma_at(schedule: NoiseSchedule, t: float) -> float:
    return float(schedule.sigma(t))


def perturb(x0: np.ndarray, sigma, noise: np.ndarray) -> np.ndarray:
    """x_t = x0 + sigma * noise; ``sigma`` is a scalar or one value per row."""
    x0 = np.asarray(x0, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if x0.shape != noise.shape:
        raise ShapeError(f"noise shape {noise.shape} != data shape {x0.shape}")
    sigma = np.asarray(sigma, dtype=np.float64)
    if sigma.ndim == 1:
        sigma = sigma[:, None]
    return x0 + sigma * noise


@dataclass
class ScoreNetwork:
    """MLP score model conditioned on log sigma.

    With ``output_scaling="inv_sigma"`` the score is the raw network output
    divided by sigma, so the sigma^2-weighted DSM target has unit scale.
    """

    params: MlpParams
    schedule: NoiseSchedule
    time_feature: str = "log_sigma"
    output_scaling: str = "inv_sigma"

    def __post_init__(self):
        if self.time_feature != "log_sigma":
            raise ValueError(f"unsupported time feature {self.time_feature!r}")
        if self.output_scaling not in ("inv_sigma", "none"):
            raise ValueError(f"unsupported output scaling {self.output_scaling!r}")
        spec = self.params.spec
        if spec.in_width != spec.out_width + 1:
            raise ShapeError("score net input width must be data dim + 1")

    @property
    def data_dim(self) -> int:
        return self.params.spec.out_width

    def copy(self) -> ScoreNetwork:
        return replace(self, params=self.params.copy())

    def with_params(self, params: MlpParams) -> ScoreNetwork:
        return replace(self, params=params)

    def _inputs(self, x: np.ndarray, sigma: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.data_dim:
            raise ShapeError(f"expected points (batch, {self.data_dim}), got {x.shape}")
        sig = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (x.shape[0],))
        return np.concatenate([x, np.log(sig)[:, None]], axis=1), sig

    def _scale(self, sig: np.ndarray) -> np.ndarray:
        if self.output_scaling == "inv_sigma":
            return 1.0 / sig[:, None]
        return np.ones((sig.shape[0], 1))

    def score_sigma(self, x: np.ndarray, sigma) -> np.ndarray:
        inp, sig = self._inputs(x, sigma)
        raw, _ = mlp_forward(self.params, inp)
        return raw * self._scale(sig)

    def score(self, x: np.ndarray, t) -> np.ndarray:
        return self.score_sigma(x, self.schedule.sigma(t))

    __call__ = score


def new_score_network(spec: MlpSpec, schedule: NoiseSchedule,
                      seed: int | np.random.Generator) -> ScoreNetwork:
    return ScoreNetwork(mlp_init(spec, seed), schedule)


def dsm_target(x0: np.ndarray, xt: np.ndarray, sigma) -> np.ndarray:
    sigma = np.asarray(sigma, dtype=np.float64)
    if sigma.ndim == 1:
        sigma = sigma[:, None]
    return (x0 - xt) / sigma ** 2


def dsm_loss_from_scores(scores: np.ndarray, x0: np.ndarray, xt: np.ndarray,
                         sigma, weight=None) -> float:
    """mean_b w_b * ||s_b - (x0_b - xt_b) / sigma_b^2||^2 with w = sigma^2 by default."""
    sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (len(x0),))
    w = sigma ** 2 if weight is None else np.broadcast_to(np.asarray(weight, dtype=np.float64), sigma.shape)
    resid = scores - dsm_target(x0, xt, sigma)
    return float(np.mean(w * np.sum(resid * resid, axis=1)))


def dsm_loss_and_grads(net: ScoreNetwork, x0: np.ndarray, t: np.ndarray,
                       eps: np.ndarray) -> tuple[float, list[np.ndarray]]:
    """Sigma^2-weighted DSM loss on one batch and its parameter gradients."""
    x0 = np.asarray(x0, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if t.shape != (x0.shape[0],):
        raise ShapeError(f"t must have shape ({x0.shape[0]},), got {t.shape}")
    sig = net.schedule.sigma(t)
    xt = perturb(x0, sig, eps)
    inp, _ = net._inputs(xt, sig)
    raw, cache = mlp_forward(net.params, inp)
    scale = net._scale(sig)
    resid = raw * scale - dsm_target(x0, xt, sig)
    per = sig ** 2 * np.sum(resid * resid, axis=1)
    bad = ~np.isfinite(per)
    if bad.any():
        raise NonFiniteError(f"non-finite DSM term at batch index {int(np.flatnonzero(bad)[0])}")
    n = x0.shape[0]
    upstream = (2.0 / n) * (sig ** 2)[:, None] * resid * scale
    _, grads = mlp_vjp(net.params, cache, upstream)
    return float(per.mean()), grads


def dsm_step(net: ScoreNetwork, adam: AdamState, x0: np.ndarray, rng: np.random.Generator,
             lr: float) -> tuple[ScoreNetwork, AdamState, float]:
    """Draw t and noise for ``x0`` and apply one Adam step of DSM."""
    n = x0.shape[0]
    t = net.schedule.sample_t(rng, n)
    eps = rng.standard_normal((n, net.data_dim))
    loss, grads = dsm_loss_and_grads(net, x0, t, eps)
    params, adam = adam_step(adam, net.params, grads, lr)
    return net.with_params(params), adam, loss


def train_score_network(sampler: Sampler, spec: MlpSpec, schedule: NoiseSchedule,
                        steps: int, lr: float, seed: int | np.random.Generator,
                        batch_size: int = 256, init: ScoreNetwork | None = None,
                        on_loss: Callable[[int, float], None] | None = None,
                        ema_decay: float | None = None) -> ScoreNetwork:
    """Fit a score network to samples from ``sampler`` with ``steps`` Adam updates.

    The network is initialised from ``seed`` (or copied from ``init``); each
    step draws a fresh minibatch, times and noise from the same generator.
    With ``ema_decay`` the returned parameters are the exponential moving
    average of the iterates, not the last iterate.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if ema_decay is not None and not 0.0 <= ema_decay < 1.0:
        raise ValueError("ema_decay must lie in [0, 1)")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    net = init.copy() if init is not None else ScoreNetwork(mlp_init(spec, rng), schedule)
    adam = AdamState.zeros_like(net.params)
    ema = net.params.flat() if ema_decay is not None else None
    for step in range(steps):
        x0 = sampler(rng, batch_size)
        try:
            net, adam, loss = dsm_step(net, adam, x0, rng, lr)
        except (NonFiniteError, FloatingPointError) as exc:
            raise NonFiniteError(f"score training diverged at step {step}: {exc}") from exc
        if ema is not None:
            ema = ema_decay * ema + (1.0 - ema_decay) * net.params.flat()
        if on_loss is not None:
            on_loss(step, loss)
    return net if ema is None else net.with_params(net.params.with_flat(ema))


def score_to_eps(s, sigma: float) -> np.ndarray:
    return -sigma * np.asarray(s, dtype=np.float64)


def score_to_x0(s, xt, sigma: float) -> np.ndarray:
    return np.asarray(s, dtype=np.float64) * sigma ** 2 + np.asarray(xt, dtype=np.float64)
