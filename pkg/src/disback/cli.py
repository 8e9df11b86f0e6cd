"""Command-line workflow: one pipeline stage per invocation.

Artifacts land in the output directory, chosen by ``--out``, then the
``DISBACK_OUT`` environment variable, then ``output_dir`` in the config::

    config.txt            the effective config
    teacher.dbk           train-teacher
    teacher_loss.csv
    generator0.dbk        record-degradation
    path/                 node_00.dbk .. node_NN.dbk + manifest.json
    baseline/, disback/   generator.dbk, phi.dbk, metrics.csv, snapshots/
    mismatch.json         eval-mismatch
    field_<source>.svg    render-field
    snapshot_<name>.svg   snapshot

All budgets are optimizer steps.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import config as cfgio
from . import pipeline
from . import rng as rngs
from .checkpoint import CheckpointError, load_checkpoint, load_path, save_checkpoint, save_path
from .distill import ConfigError
from .evalharness import compare_runs, render_vector_field, snapshot_scatter
from .metrics_io import read_metrics, write_metrics
from .scorefield import analytic_score_fn, gradient_field_grid, mismatch_with_lower_bound

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_MISSING = 4
EXIT_RUNTIME = 5


class MissingPrerequisite(Exception):
    pass


class Context:
    def __init__(self, args):
        self.cfg = cfgio.load(args.config) if args.config else cfgio.ExperimentConfig()
        if args.seed is not None:
            self.cfg = self.cfg.with_seed(args.seed)
        out = args.out or os.environ.get("DISBACK_OUT") or self.cfg.output_dir
        self.out = Path(out)
        self.timing = getattr(args, "timing", False)

    def require(self, rel: str) -> Path:
        p = self.out / rel
        if not p.exists():
            raise MissingPrerequisite(f"missing prerequisite: {p} (run the earlier stage first)")
        return p

    def load(self, rel: str, role: str | None = None):
        ck = load_checkpoint(self.require(rel))
        if role is not None and ck.role != role:
            raise CheckpointError(f"{rel} holds a {ck.role} checkpoint, expected {role}")
        if ck.config_hash and ck.config_hash != self.cfg.hash():
            print(f"warning: {rel} was produced by config {ck.config_hash}, "
                  f"current config is {self.cfg.hash()}", file=sys.stderr)
        return ck.model

    def generator0(self):
        p = self.out / "generator0.dbk"
        if p.exists():
            return self.load("generator0.dbk", "generator")
        gen0 = pipeline.initial_generator(self.cfg)
        save_checkpoint(gen0, p, "generator", self.cfg.hash())
        return gen0

    def save_config(self) -> None:
        cfgio.save(self.cfg, self.out / "config.txt")


def cmd_init_config(ctx: Context, args) -> None:
    path = cfgio.save(ctx.cfg, args.path)
    print(path)


def cmd_train_teacher(ctx: Context, args) -> None:
    ctx.save_config()
    losses = []
    teacher = pipeline.train_teacher(ctx.cfg, lambda step, loss: losses.append((step, loss)))
    tmp = ctx.out / "teacher_loss.csv.partial"
    tmp.write_text("step[optimizer_steps],dsm_loss[sigma2_weighted_mse]\n"
                   + "".join("%d,%.17g\n" % row for row in losses), encoding="utf-8")
    os.replace(tmp, ctx.out / "teacher_loss.csv")
    save_checkpoint(teacher, ctx.out / "teacher.dbk", "teacher", ctx.cfg.hash())
    print(f"teacher: {len(losses)} steps, final loss {losses[-1][1]:.6g}")


def cmd_record_degradation(ctx: Context, args) -> None:
    teacher = ctx.load("teacher.dbk", "teacher")
    gen0 = ctx.generator0()
    path = pipeline.degrade(ctx.cfg, teacher, gen0)
    save_path(path, ctx.out / "path", ctx.cfg.hash())
    print(f"degradation path: {len(path)} nodes, interval {path.interval}")


def _finish_distill(ctx: Context, name: str, gen, phi, run) -> None:
    d = ctx.out / name
    write_metrics(run, d / "metrics.csv")
    save_checkpoint(phi, d / "phi.dbk", "phi", ctx.cfg.hash())
    save_checkpoint(gen, d / "generator.dbk", "generator", ctx.cfg.hash())
    last = run.records[-1]
    print(f"{name}: {last.step} eta-steps, energy_distance={last.energy_distance:.6g} "
          f"mode_coverage={last.mode_coverage:.3g} d_mis={last.d_mis:.6g}")


def _evaluator(ctx: Context, teacher, name: str) -> pipeline.Evaluator:
    return pipeline.Evaluator(ctx.cfg, teacher, snapshot_dir=ctx.out / name / "snapshots")


def cmd_distill_baseline(ctx: Context, args) -> None:
    teacher = ctx.load("teacher.dbk", "teacher")
    gen0 = ctx.generator0()
    gen, run, phi = pipeline.run_baseline(ctx.cfg, teacher, gen0, _evaluator(ctx, teacher, "baseline"),
                                          ctx.timing, return_phi=True)
    _finish_distill(ctx, "baseline", gen, phi, run)


def cmd_distill_disback(ctx: Context, args) -> None:
    ctx.require("path/manifest.json")
    teacher = ctx.load("teacher.dbk", "teacher")
    path = load_path(ctx.out / "path")
    gen0 = ctx.generator0()
    gen, run, phi = pipeline.run_disback(ctx.cfg, teacher, path, gen0, _evaluator(ctx, teacher, "disback"),
                                         ctx.timing, return_phi=True)
    _finish_distill(ctx, "disback", gen, phi, run)


def _generator_arg(ctx: Context, rel: str | None):
    if rel is None:
        rel = "disback/generator.dbk" if (ctx.out / "disback/generator.dbk").exists() else "generator0.dbk"
    return rel, ctx.load(rel, "generator")


def cmd_eval_mismatch(ctx: Context, args) -> None:
    teacher = ctx.load("teacher.dbk", "teacher")
    rel, gen = _generator_arg(ctx, args.generator)
    mix = pipeline.mixture(ctx.cfg)
    ev = ctx.cfg.eval
    reference = mix if ev.reference == "analytic" else mix.sample
    rep = mismatch_with_lower_bound(teacher, gen.sample, mix.sample, reference, ctx.cfg.noise_schedule(),
                                    n_eval=ev.mismatch_n, seed=rngs.stream(ctx.cfg.seed, rngs.EVAL, 2**31),
                                    ref_size=ev.ref_size)
    out = {"generator": rel, "d_mis": rep.d_mis, "std": rep.std, "lower_bound": rep.lower_bound,
           "n_samples": rep.n_samples, "t": rep.t_descriptor, "reference": ev.reference,
           "config_hash": ctx.cfg.hash()}
    tmp = ctx.out / "mismatch.json.partial"
    tmp.write_text(json.dumps(out, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, ctx.out / "mismatch.json")
    print(f"d_mis={rep.d_mis:.6g} lower_bound={rep.lower_bound:.6g} ({rel})")


def cmd_render_field(ctx: Context, args) -> None:
    ev = ctx.cfg.eval
    if args.source == "analytic":
        score = analytic_score_fn(pipeline.mixture(ctx.cfg), ctx.cfg.noise_schedule())
    else:
        rel = {"teacher": "teacher.dbk"}.get(args.source, args.source)
        score = ctx.load(rel).score
    grid = gradient_field_grid(score, resolution=ev.field_resolution, t=ev.field_t)
    name = Path(args.source).stem
    path = render_vector_field(grid, ctx.out / f"field_{name}.svg", title=f"{name} score, t={ev.field_t:g}")
    print(path)


def cmd_snapshot(ctx: Context, args) -> None:
    rel, gen = _generator_arg(ctx, args.generator)
    n = ctx.cfg.eval.n_samples
    x = gen.sample(rngs.stream(ctx.cfg.seed, rngs.EVAL, 2**31 + 1), n)
    training = pipeline.mixture(ctx.cfg).sample(rngs.stream(ctx.cfg.seed, rngs.EVAL), n)
    name = rel.replace("/", "_").removesuffix(".dbk")
    print(snapshot_scatter(x, training, ctx.out / f"snapshot_{name}.svg", title=rel))


def cmd_compare(ctx: Context, args) -> None:
    runs = []
    for p in (args.run_a, args.run_b):
        p = Path(p)
        p = p / "metrics.csv" if p.is_dir() else p
        if not p.exists():
            raise MissingPrerequisite(f"missing prerequisite: {p}")
        runs.append(read_metrics(p))
    threshold = args.threshold
    if threshold is None:
        threshold = pipeline.threshold_for(ctx.cfg) if args.metric == "energy_distance" else None
    if threshold is None:
        raise ConfigError("--threshold is required for metrics other than energy_distance")
    print(compare_runs(runs[0], runs[1], args.metric, threshold).describe())


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="config file (section.key = value lines)")
    common.add_argument("--seed", type=int, help="override the master seed")
    common.add_argument("--out", help="output directory (else $DISBACK_OUT, else output_dir)")

    p = argparse.ArgumentParser(prog="disback", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("init-config", parents=[common], help="write the effective config")
    s.add_argument("path")
    s.set_defaults(func=cmd_init_config)
    sub.add_parser("train-teacher", parents=[common], help="DSM-train the teacher score network"
                   ).set_defaults(func=cmd_train_teacher)
    sub.add_parser("record-degradation", parents=[common], help="fine-tune the teacher toward the "
                   "initial generator and store the path").set_defaults(func=cmd_record_degradation)
    for name, fn in (("distill-baseline", cmd_distill_baseline), ("distill-disback", cmd_distill_disback)):
        s = sub.add_parser(name, parents=[common], help=f"{name.split('-')[1]} score distillation")
        s.add_argument("--timing", action="store_true", help="record wall-clock seconds in metrics.csv")
        s.set_defaults(func=fn)
    s = sub.add_parser("eval-mismatch", parents=[common], help="mismatch score of the teacher on a generator")
    s.add_argument("--generator", help="generator checkpoint relative to the output dir")
    s.set_defaults(func=cmd_eval_mismatch)
    s = sub.add_parser("render-field", parents=[common], help="SVG of a score field on the grid")
    s.add_argument("--source", default="teacher", help="teacher, analytic, or a checkpoint path")
    s.set_defaults(func=cmd_render_field)
    s = sub.add_parser("snapshot", parents=[common], help="SVG scatter of generator vs training samples")
    s.add_argument("--generator", help="generator checkpoint relative to the output dir")
    s.set_defaults(func=cmd_snapshot)
    s = sub.add_parser("compare", parents=[common], help="steps-to-threshold ratio of two runs")
    s.add_argument("run_a")
    s.add_argument("run_b")
    s.add_argument("--metric", default="energy_distance")
    s.add_argument("--threshold", type=float)
    s.set_defaults(func=cmd_compare)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        ctx = Context(args)
        ctx.out.mkdir(parents=True, exist_ok=True)
        args.func(ctx, args)
    except cfgio.ConfigFileError as exc:
        print(f"disback: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ConfigError as exc:
        print(f"disback: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingPrerequisite as exc:
        print(f"disback: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except CheckpointError as exc:
        print(f"disback: checkpoint error: {exc}", file=sys.stderr)
        return exc.code
    except (ValueError, FloatingPointError, OSError) as exc:
        print(f"disback: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
