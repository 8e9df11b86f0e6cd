"""Stage functions shared by the CLI and the experiment tests.

Everything here is a deterministic function of an ExperimentConfig: each
stage draws only from its own named stream (see ``rng``).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import rng as rngs
from .config import ExperimentConfig
from .diffusion import ScoreNetwork, train_score_network
from .distill import (ConfigError, DegradationPath, DistillConfig, GeneratorNetwork, backtrack_distill,
                      baseline_distill, default_node_budget, new_generator, record_degradation)
from .evalharness import energy_distance, mode_coverage, snapshot_scatter
from .scorefield import MixtureSpec, benchmark_mixture, mismatch_score


def mixture(cfg: ExperimentConfig) -> MixtureSpec:
    m = cfg.mixture
    return benchmark_mixture(rngs.stream(m.seed, rngs.MIXTURE), m.n_components, m.box,
                             m.variance, m.min_separation)


def initial_generator(cfg: ExperimentConfig) -> GeneratorNetwork:
    return new_generator(cfg.generator_spec(), rngs.stream(cfg.seed, rngs.GENERATOR_INIT))


def train_teacher(cfg: ExperimentConfig, on_loss: Callable[[int, float], None] | None = None) -> ScoreNetwork:
    t = cfg.teacher
    return train_score_network(mixture(cfg).sample, cfg.score_spec(), cfg.noise_schedule(),
                               t.steps, t.lr, rngs.stream(cfg.seed, rngs.TEACHER),
                               batch_size=t.batch_size, on_loss=on_loss,
                               ema_decay=t.ema_decay or None)


def degrade(cfg: ExperimentConfig, teacher: ScoreNetwork,
            gen0: GeneratorNetwork | None = None) -> DegradationPath:
    d = cfg.degradation
    gen0 = gen0 if gen0 is not None else initial_generator(cfg)
    path = record_degradation(teacher, gen0, d.total_steps, d.interval, d.lr,
                              rngs.stream(cfg.seed, rngs.DEGRADATION), d.batch_size)
    path.provenance = {"seed": cfg.seed, "config_hash": cfg.hash(), "teacher": "teacher.dbk",
                       "generator": "generator0.dbk"}
    return path


def distill_config(cfg: ExperimentConfig, n_nodes: int | None = None) -> DistillConfig:
    d = cfg.distill
    budget = list(d.per_node_budget)
    if not budget and n_nodes:
        budget = default_node_budget(n_nodes, d.total_steps)
    if budget and sum(budget) != d.total_steps:
        raise ConfigError(f"distill.per_node_budget sums to {sum(budget)}, "
                          f"distill.total_steps is {d.total_steps}")
    return DistillConfig(lr_generator=d.lr_generator, lr_phi=d.lr_phi, update_ratio=d.update_ratio,
                         per_node_budget=budget, batch_size=d.batch_size, total_steps=d.total_steps,
                         seed=cfg.seed, eval_every=d.eval_every, weighting=d.weighting)


@dataclass
class Evaluator:
    """Per-step telemetry against the ground-truth mixture.

    The energy-distance reference batch and every per-step draw come from the
    eval stream keyed by step, so baseline and DisBack runs are scored on
    identical noise.
    """

    cfg: ExperimentConfig
    teacher: ScoreNetwork
    snapshot_dir: Path | None = None

    def __post_init__(self):
        self.mix = mixture(self.cfg)
        self.schedule = self.cfg.noise_schedule()
        n = self.cfg.eval.n_samples
        self.reference = self.mix.sample(rngs.stream(self.cfg.seed, rngs.EVAL), n)

    def _d_mis_reference(self):
        if self.cfg.eval.reference == "analytic":
            return self.mix
        if self.cfg.eval.reference == "stf":
            return self.mix.sample
        raise ValueError(f"unknown eval.reference {self.cfg.eval.reference!r}")

    def threshold_floor(self) -> float:
        """Mean energy distance of direct mixture draws against the reference batch."""
        ev = self.cfg.eval
        rng = rngs.stream(self.cfg.seed, rngs.EVAL, 1 << 30)
        vals = [energy_distance(self.mix.sample(rng, ev.n_samples), self.reference)
                for _ in range(ev.floor_replicates)]
        return float(np.mean(vals))

    def threshold(self) -> float:
        return self.cfg.eval.threshold_factor * self.threshold_floor()

    def __call__(self, step: int, gen: GeneratorNetwork, phi: ScoreNetwork) -> dict:
        ev = self.cfg.eval
        rng = rngs.stream(self.cfg.seed, rngs.EVAL, step)
        x = gen.sample(rng, ev.n_samples)
        d_mis = mismatch_score(self.teacher, gen.sample, self._d_mis_reference(), self.schedule,
                               ev.n_samples, rng, ref_size=ev.ref_size).d_mis
        if self.snapshot_dir is not None and ev.snapshot_every and step % ev.snapshot_every == 0:
            snapshot_scatter(x, self.reference, self.snapshot_dir / f"step_{step:06d}.svg",
                             title=f"eta step {step}")
        return {"energy_distance": energy_distance(x, self.reference),
                "mode_coverage": mode_coverage(self.mix, x), "d_mis": d_mis}


def run_baseline(cfg: ExperimentConfig, teacher: ScoreNetwork, gen0: GeneratorNetwork | None = None,
                 evaluator: Evaluator | None = None, clock: bool = False, return_phi: bool = False):
    """Baseline arm; phi starts from a copy of the teacher."""
    gen0 = gen0 if gen0 is not None else initial_generator(cfg)
    evaluator = evaluator if evaluator is not None else Evaluator(cfg, teacher)
    out = baseline_distill(gen0, teacher, teacher.copy(), distill_config(cfg), evaluator, clock, return_phi)
    out[1].config_hash = cfg.hash()
    return out


def run_disback(cfg: ExperimentConfig, teacher: ScoreNetwork, path: DegradationPath,
                gen0: GeneratorNetwork | None = None, evaluator: Evaluator | None = None,
                clock: bool = False, return_phi: bool = False):
    gen0 = gen0 if gen0 is not None else initial_generator(cfg)
    evaluator = evaluator if evaluator is not None else Evaluator(cfg, teacher)
    out = backtrack_distill(gen0, path, distill_config(cfg, path.n), evaluator, clock, return_phi)
    out[1].config_hash = cfg.hash()
    return out


def threshold_for(cfg: ExperimentConfig) -> float:
    """Energy-distance threshold; depends only on the mixture, the seed and the eval section."""
    return Evaluator(cfg, None).threshold()
