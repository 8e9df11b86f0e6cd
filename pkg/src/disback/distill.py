"""One-step generator distillation: plain score distillation, degradation
recording, and distribution backtracking.

Every procedure alternates one generator update with ``update_ratio`` updates
of the auxiliary score network phi, which tracks the current generator's
distribution by DSM on fresh samples.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import rng as rngs
from .diffusion import NoiseSchedule, ScoreFn, ScoreNetwork, dsm_step, perturb
from .evalharness import MetricRecord, RunMetrics
from .nncore import AdamState, MlpParams, MlpSpec, NonFiniteError, ShapeError, adam_step, mlp_forward, mlp_init, mlp_vjp

log = logging.getLogger(__name__)

MetricsHook = Callable[[int, "GeneratorNetwork", ScoreNetwork], dict]


class ConfigError(ValueError):
    pass


@dataclass
class GeneratorNetwork:
    params: MlpParams

    @property
    def latent_dim(self) -> int:
        return self.params.spec.in_width

    @property
    def data_dim(self) -> int:
        return self.params.spec.out_width

    def copy(self) -> GeneratorNetwork:
        return GeneratorNetwork(self.params.copy())

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return generator_sample(self, rng.standard_normal((n, self.latent_dim)))


def new_generator(spec: MlpSpec, seed: int | np.random.Generator) -> GeneratorNetwork:
    return GeneratorNetwork(mlp_init(spec, seed))


def generator_sample(gen: GeneratorNetwork, z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != gen.latent_dim:
        raise ShapeError(f"latent batch must be (n, {gen.latent_dim}), got {z.shape}")
    return mlp_forward(gen.params, z)[0]


@dataclass
class GeneratorGradient:
    grads: list[np.ndarray]
    delta: np.ndarray
    skipped: int


def generator_gradient(gen: GeneratorNetwork, target_score: ScoreFn, phi_score: ScoreFn,
                       z: np.ndarray, t: np.ndarray, eps: np.ndarray,
                       schedule: NoiseSchedule, weighting: str = "none") -> GeneratorGradient:
    """Gradient of mean_b <delta_b, x_t,b> w.r.t. the generator parameters.

    delta = s_phi(x_t, t) - s_target(x_t, t) is held constant; dx_t/dx_0 is the
    identity, so the surrogate gradient is the VJP of delta through G.
    Rows with non-finite delta are dropped and counted.
    """
    x0, cache = mlp_forward(gen.params, np.asarray(z, dtype=np.float64))
    sig = schedule.sigma(t)
    xt = perturb(x0, sig, eps)
    delta = np.asarray(phi_score(xt, t)) - np.asarray(target_score(xt, t))
    if weighting == "sigma2":
        delta = delta * (sig ** 2)[:, None]
    elif weighting == "sigma":
        delta = delta * sig[:, None]
    elif weighting != "none":
        raise ConfigError(f"unknown generator weighting {weighting!r}")
    ok = np.all(np.isfinite(delta), axis=1)
    skipped = int((~ok).sum())
    if skipped == len(ok):
        raise NonFiniteError("every sample in the generator batch had a non-finite score gap")
    upstream = np.where(ok[:, None], delta, 0.0) / ok.sum()
    _, grads = mlp_vjp(gen.params, cache, upstream)
    return GeneratorGradient(grads, delta, skipped)


def generator_grad_step(gen: GeneratorNetwork, target_score: ScoreFn, phi_score: ScoreFn,
                        z: np.ndarray, schedule: NoiseSchedule, lr: float, adam: AdamState,
                        rng: np.random.Generator, weighting: str = "none"):
    """Draw (t, eps), form the score gap and take one Adam descent step on eta.

    Returns ``(gen, adam, skipped)``.
    """
    n = z.shape[0]
    t = schedule.sample_t(rng, n)
    eps = rng.standard_normal((n, gen.data_dim))
    g = generator_gradient(gen, target_score, phi_score, z, t, eps, schedule, weighting)
    if g.skipped:
        log.warning("skipped %d non-finite generator samples", g.skipped)
    params, adam = adam_step(adam, gen.params, g.grads, lr)
    return GeneratorNetwork(params), adam, g.skipped


def phi_update_step(phi: ScoreNetwork, gen: GeneratorNetwork, z: np.ndarray, lr: float,
                    adam: AdamState, rng: np.random.Generator):
    """One DSM step of phi on x0 = G(z); the generator is untouched.

    Returns ``(phi, adam, loss)``.
    """
    return dsm_step(phi, adam, generator_sample(gen, z), rng, lr)


@dataclass
class DegradationPath:
    """Checkpoints [s'_0 (= teacher), ..., s'_N (most degraded)]."""

    checkpoints: list[ScoreNetwork]
    interval: int
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.checkpoints) < 2:
            raise ConfigError("a degradation path needs at least 2 checkpoints")

    @property
    def n(self) -> int:
        return len(self.checkpoints) - 1

    def __len__(self) -> int:
        return len(self.checkpoints)


def record_degradation(teacher: ScoreNetwork, gen0: GeneratorNetwork, total_steps: int,
                       interval: int, lr: float, seed: int | np.random.Generator,
                       batch_size: int = 256) -> DegradationPath:
    """Fine-tune a copy of the teacher on samples of the untrained generator.

    A snapshot is kept before training and after every ``interval`` steps,
    giving ``total_steps // interval + 1`` checkpoints.
    """
    if interval < 1 or total_steps < interval or total_steps % interval:
        raise ConfigError("interval must divide total_steps and total_steps >= interval")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    net = teacher.copy()
    adam = AdamState.zeros_like(net.params)
    checkpoints = [net.copy()]
    for step in range(1, total_steps + 1):
        z = rng.standard_normal((batch_size, gen0.latent_dim))
        try:
            net, adam, _ = phi_update_step(net, gen0, z, lr, adam, rng)
        except FloatingPointError as exc:
            raise NonFiniteError(f"degradation diverged at step {step}; path discarded") from exc
        if step % interval == 0:
            checkpoints.append(net.copy())
    return DegradationPath(checkpoints, interval)


@dataclass
class DistillConfig:
    lr_generator: float = 1e-3
    lr_phi: float = 1e-3
    update_ratio: int = 1
    per_node_budget: list[int] = field(default_factory=list)
    batch_size: int = 256
    total_steps: int = 4000
    seed: int = 0
    eval_every: int = 250
    weighting: str = "none"

    def __post_init__(self):
        if self.update_ratio < 1:
            raise ConfigError("update_ratio must be >= 1")
        if self.batch_size < 1 or self.eval_every < 1 or self.total_steps < 0:
            raise ConfigError("batch_size and eval_every must be >= 1, total_steps >= 0")


def default_node_budget(n_nodes: int, total_steps: int, late_fraction: float = 0.01,
                        mid_fraction: float = 0.03) -> list[int]:
    """Budget indexed by node i = 0..N-1: small for degraded nodes, the rest to the teacher.

    Nodes i >= 3 get ``late_fraction`` of the total each, nodes 1..2 get
    ``mid_fraction``; node 0 gets what remains.
    """
    if n_nodes < 1:
        raise ConfigError("need at least one target node")
    budget = [0] * n_nodes
    for i in range(1, n_nodes):
        budget[i] = max(1, int(round(total_steps * (late_fraction if i >= 3 else mid_fraction))))
    budget[0] = total_steps - sum(budget[1:])
    if budget[0] < 1:
        raise ConfigError("total_steps too small for the node budget")
    return budget


class _Runner:
    """State machine shared by the baseline and backtracking loops."""

    def __init__(self, gen: GeneratorNetwork, phi: ScoreNetwork, config: DistillConfig,
                 hook: MetricsHook | None, variant: str, clock: bool):
        self.gen, self.phi, self.cfg, self.hook = gen.copy(), phi.copy(), config, hook
        self.schedule = phi.schedule
        self.eta_rng = rngs.stream(config.seed, rngs.DISTILL_ETA)
        self.phi_rng = rngs.stream(config.seed, rngs.DISTILL_PHI)
        self.eta_adam = AdamState.zeros_like(self.gen.params)
        self.phi_adam = AdamState.zeros_like(self.phi.params)
        self.metrics = RunMetrics(seed=config.seed, variant=variant)
        self.eta_steps = 0
        self.phi_steps = 0
        self.skipped = 0
        self.last_phi_loss = float("nan")
        self.t0 = time.perf_counter() if clock else None

    def record(self, node: int | None):
        values = self.hook(self.eta_steps, self.gen, self.phi) if self.hook else {}
        wall = time.perf_counter() - self.t0 if self.t0 is not None else None
        self.metrics.append(MetricRecord(
            step=self.eta_steps, active_node=node, phi_steps=self.phi_steps,
            dsm_loss_phi=self.last_phi_loss if self.phi_steps else None,
            d_mis=values.get("d_mis"), energy_distance=values.get("energy_distance"),
            mode_coverage=values.get("mode_coverage"), wall_clock=wall))

    def round(self, target: ScoreFn):
        cfg = self.cfg
        z = self.eta_rng.standard_normal((cfg.batch_size, self.gen.latent_dim))
        try:
            self.gen, self.eta_adam, skipped = generator_grad_step(
                self.gen, target, self.phi.score, z, self.schedule, cfg.lr_generator,
                self.eta_adam, self.eta_rng, cfg.weighting)
        except FloatingPointError as exc:
            raise NonFiniteError(f"generator step {self.eta_steps} failed: {exc}") from exc
        self.skipped += skipped
        self.eta_steps += 1
        for _ in range(cfg.update_ratio):
            z = self.phi_rng.standard_normal((cfg.batch_size, self.gen.latent_dim))
            try:
                self.phi, self.phi_adam, self.last_phi_loss = phi_update_step(
                    self.phi, self.gen, z, cfg.lr_phi, self.phi_adam, self.phi_rng)
            except FloatingPointError as exc:
                raise NonFiniteError(f"phi update at eta step {self.eta_steps} failed: {exc}") from exc
            self.phi_steps += 1

    def run(self, target: ScoreFn, steps: int, node: int | None):
        for _ in range(steps):
            self.round(target)
            if self.eta_steps % self.cfg.eval_every == 0:
                self.record(node)


def baseline_distill(gen0: GeneratorNetwork, teacher: ScoreNetwork, phi_init: ScoreNetwork,
                     config: DistillConfig, hook: MetricsHook | None = None,
                     clock: bool = False, return_phi: bool = False):
    """Score distillation against the fixed teacher for ``config.total_steps`` rounds.

    Returns (generator, metrics), plus the final phi when ``return_phi``.
    """
    r = _Runner(gen0, phi_init, config, hook, "baseline", clock)
    r.record(None)
    r.run(teacher.score, config.total_steps, None)
    if r.metrics.records[-1].step != r.eta_steps:
        r.record(None)
    return (r.gen, r.metrics, r.phi) if return_phi else (r.gen, r.metrics)


def backtrack_distill(gen0: GeneratorNetwork, path: DegradationPath, config: DistillConfig,
                      hook: MetricsHook | None = None,
                      clock: bool = False, return_phi: bool = False):
    """Distil the reversed degradation path node by node.

    phi starts from the most degraded checkpoint and is carried across node
    switches. Node i (i = N-1 .. 0) is the target for ``per_node_budget[i]``
    rounds; the last target is checkpoint 0, the teacher.
    """
    budget = list(config.per_node_budget)
    if len(budget) != path.n:
        raise ConfigError(f"per_node_budget has {len(budget)} entries, path needs {path.n}")
    if any(b < 1 for b in budget):
        raise ConfigError("every path node needs a positive step budget")
    r = _Runner(gen0, path.checkpoints[-1], config, hook, "disback", clock)
    r.record(path.n - 1)
    for i in range(path.n - 1, -1, -1):
        r.run(path.checkpoints[i].score, budget[i], i)
    if r.metrics.records[-1].step != r.eta_steps:
        r.record(0)
    return (r.gen, r.metrics, r.phi) if return_phi else (r.gen, r.metrics)


def with_budget_total(config: DistillConfig) -> DistillConfig:
    """Copy of ``config`` whose total_steps equals the sum of its node budget."""
    return replace(config, total_steps=int(sum(config.per_node_budget)))
