"""Experiment configuration as flat ``section.key = value`` text.

Values are JSON literals, so floats round-trip exactly through ``repr``.
Blank lines and ``#`` comments are ignored. Unknown keys are errors.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path

from .diffusion import NoiseSchedule
from .nncore import MlpSpec


class ConfigFileError(ValueError):
    pass


@dataclass
class MixtureSection:
    seed: int = 0
    n_components: int = 10
    box: float = 4.0
    variance: float = 0.1
    min_separation: float = 2.0


@dataclass
class ScheduleSection:
    sigma_min: float = 0.01
    sigma_max: float = 10.0
    t_min: float = 0.02


@dataclass
class NetsSection:
    generator_widths: list[int] = field(default_factory=lambda: [2, 64, 64, 2])
    score_widths: list[int] = field(default_factory=lambda: [3, 128, 128, 2])
    activation: str = "tanh"


@dataclass
class TeacherSection:
    steps: int = 10000
    lr: float = 1e-3
    batch_size: int = 256
    # 0 keeps the last iterate
    ema_decay: float = 0.999


@dataclass
class DegradationSection:
    total_steps: int = 200
    interval: int = 50
    lr: float = 1e-4
    batch_size: int = 256


@dataclass
class DistillSection:
    total_steps: int = 8000
    lr_generator: float = 1e-3
    lr_phi: float = 1e-3
    update_ratio: int = 1
    batch_size: int = 256
    # indexed by path node i = 0..N-1; empty means default_node_budget
    per_node_budget: list[int] = field(default_factory=list)
    weighting: str = "sigma"
    eval_every: int = 250


@dataclass
class EvalSection:
    n_samples: int = 1000
    reference: str = "analytic"
    ref_size: int = 4096
    threshold_factor: float = 1.5
    floor_replicates: int = 8
    snapshot_every: int = 2000
    field_resolution: int = 21
    field_t: float = 0.5
    mismatch_n: int = 4096


@dataclass
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    mixture: MixtureSection = field(default_factory=MixtureSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    nets: NetsSection = field(default_factory=NetsSection)
    teacher: TeacherSection = field(default_factory=TeacherSection)
    degradation: DegradationSection = field(default_factory=DegradationSection)
    distill: DistillSection = field(default_factory=DistillSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def noise_schedule(self) -> NoiseSchedule:
        s = self.schedule
        return NoiseSchedule(s.sigma_min, s.sigma_max, s.t_min)

    def generator_spec(self) -> MlpSpec:
        return MlpSpec(tuple(self.nets.generator_widths), self.nets.activation)

    def score_spec(self) -> MlpSpec:
        return MlpSpec(tuple(self.nets.score_widths), self.nets.activation)

    def with_seed(self, seed: int) -> ExperimentConfig:
        return replace(self, seed=int(seed))

    def hash(self) -> str:
        """First 16 hex digits of sha256 over the canonical text, output_dir excluded."""
        text = dumps(replace(self, output_dir=""))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def _flatten(obj, prefix: str = ""):
    for f in fields(obj):
        v = getattr(obj, f.name)
        key = prefix + f.name
        if is_dataclass(v):
            yield from _flatten(v, key + ".")
        else:
            yield key, v


def dumps(cfg: ExperimentConfig) -> str:
    return "".join(f"{k} = {json.dumps(v)}\n" for k, v in _flatten(cfg))


def loads(text: str) -> ExperimentConfig:
    cfg = ExperimentConfig()
    data = asdict(cfg)
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigFileError(f"line {lineno}: expected 'key = value'")
        key = key.strip()
        try:
            parsed = json.loads(value.strip())
        except json.JSONDecodeError as exc:
            raise ConfigFileError(f"line {lineno}: bad value for {key}: {exc}") from None
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigFileError(f"line {lineno}: unknown section in {key!r}")
            node = node[p]
        if parts[-1] not in node or isinstance(node[parts[-1]], dict):
            raise ConfigFileError(f"line {lineno}: unknown key {key!r}")
        default = node[parts[-1]]
        if isinstance(default, float) and isinstance(parsed, int) and not isinstance(parsed, bool):
            parsed = float(parsed)
        if type(parsed) is not type(default):
            raise ConfigFileError(f"line {lineno}: {key} expects {type(default).__name__}")
        node[parts[-1]] = parsed
    return _build(data)


_SECTIONS = {"mixture": MixtureSection, "schedule": ScheduleSection, "nets": NetsSection,
             "teacher": TeacherSection, "degradation": DegradationSection,
             "distill": DistillSection, "eval": EvalSection}


def _build(data: dict) -> ExperimentConfig:
    kwargs = {name: _SECTIONS[name](**value) if isinstance(value, dict) else value
              for name, value in data.items()}
    return ExperimentConfig(**kwargs)


def load(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigFileError(f"cannot read config {path}: {exc.strerror}") from None
    return loads(text)


def save(cfg: ExperimentConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(cfg), encoding="utf-8")
    return path
