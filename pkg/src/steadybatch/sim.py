"""Deterministic failure-injection harness around the trainer.

Owns the cluster, replays a failure schedule, advances a simulated clock from
a configurable cost model and records one metrics row per committed iteration.
Everything is a pure function of (config, schedule, policy): two runs of the
same triple produce bitwise-identical metrics and parameters.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import yaml

from .comm import Communicator, EmptyMembership
from .policy import assign_roles, initial_state
from .trainer import (
    AFTER_SYNC,
    BEFORE_SYNC,
    DURING_SYNC,
    AllReplicasDead,
    DataStream,
    ReplicaState,
    ToyModel,
    run_iteration,
)


class InvalidSpec(ValueError):
    """A schedule or experiment spec that cannot be honored."""


# ---- injection points and schedules ----

LOCATION_KINDS = (BEFORE_SYNC, DURING_SYNC, AFTER_SYNC)


@dataclass(frozen=True)
class InjectionPoint:
    kind: str
    bucket: Optional[int] = None

    def __post_init__(self):
        if self.kind not in LOCATION_KINDS:
            raise InvalidSpec("unknown injection kind %r" % (self.kind,))
        if (self.kind == DURING_SYNC) != (self.bucket is not None):
            raise InvalidSpec("bucket index is for during_sync only")

    def serialize(self) -> str:
        if self.kind == DURING_SYNC:
            return "%s:%d" % (DURING_SYNC, self.bucket)
        return self.kind


def parse_location(text: str) -> InjectionPoint:
    if text.startswith(DURING_SYNC + ":"):
        return InjectionPoint(DURING_SYNC, int(text.split(":", 1)[1]))
    if text in (BEFORE_SYNC, AFTER_SYNC):
        return InjectionPoint(text)
    raise InvalidSpec("unparseable location %r" % (text,))


@dataclass(frozen=True)
class ScheduleEntry:
    step: int
    replica: int
    local_rank: int
    location: InjectionPoint


@dataclass(frozen=True)
class GenerationSpec:
    """Everything the schedule is a function of: the parallelism shape, the
    seed, how many failures, the step window [step_lo, step_hi) and the
    location weights."""
    w_init: int
    ranks_per_replica: int
    k_buckets: int
    seed: int
    count: int
    step_lo: int
    step_hi: int
    weights: Tuple[float, float, float] = (0.0, 1.0, 0.0)  # before/during/after


@dataclass
class FailureSchedule:
    spec: GenerationSpec
    entries: List[ScheduleEntry]


def generate_schedule(spec: GenerationSpec) -> FailureSchedule:
    """Deterministically sample a sorted schedule from a GenerationSpec.

    Victims are drawn uniformly from the replicas still alive at generation
    time, so no replica dies twice and at least one always survives.
    """
    if spec.w_init < 1:
        raise InvalidSpec("w_init must be positive")
    if spec.ranks_per_replica < 1 or spec.k_buckets < 1:
        raise InvalidSpec("ranks_per_replica and k_buckets must be positive")
    if spec.count < 0:
        raise InvalidSpec("count must be non-negative")
    if spec.count >= spec.w_init:
        raise InvalidSpec(
            "count (%d) must stay below w_init (%d): at least one replica "
            "must survive" % (spec.count, spec.w_init))
    if spec.count > 0 and spec.step_lo >= spec.step_hi:
        raise InvalidSpec("empty step range [%d, %d)" % (spec.step_lo, spec.step_hi))
    w = [max(0.0, float(x)) for x in spec.weights]
    if len(w) != 3 or sum(w) <= 0.0:
        raise InvalidSpec("location weights must contain a positive entry")

    rng = np.random.default_rng(spec.seed)
    steps = np.sort(rng.integers(spec.step_lo, spec.step_hi, size=spec.count))
    alive = list(range(spec.w_init))
    cumw = np.cumsum(w) / sum(w)
    entries = []
    for step in steps:
        victim = alive.pop(int(rng.integers(0, len(alive))))
        u = rng.random()
        kind = LOCATION_KINDS[int(np.searchsorted(cumw, u, side="right"))]
        bucket = int(rng.integers(0, spec.k_buckets)) if kind == DURING_SYNC else None
        rank = int(rng.integers(0, spec.ranks_per_replica))
        entries.append(ScheduleEntry(int(step), victim, rank,
                                     InjectionPoint(kind, bucket)))
    return FailureSchedule(spec, entries)


def save_schedule(schedule: FailureSchedule, path: str) -> None:
    doc = {
        "schema": "schedule/v1",
        "w_init": schedule.spec.w_init,
        "ranks_per_replica": schedule.spec.ranks_per_replica,
        "k_buckets": schedule.spec.k_buckets,
        "seed": schedule.spec.seed,
        "count": schedule.spec.count,
        "steps": [schedule.spec.step_lo, schedule.spec.step_hi],
        "weights": list(schedule.spec.weights),
        "entries": [
            {"step": e.step, "replica": e.replica, "local_rank": e.local_rank,
             "location": e.location.serialize()}
            for e in schedule.entries
        ],
    }
    with open(path, "w") as f:
        yaml.safe_dump(doc, f, sort_keys=False)


def load_schedule(path: str) -> FailureSchedule:
    with open(path) as f:
        doc = yaml.safe_load(f)
    if not isinstance(doc, dict) or doc.get("schema") != "schedule/v1":
        raise InvalidSpec("not a schedule file: missing schema 'schedule/v1'")
    try:
        spec = GenerationSpec(
            w_init=int(doc["w_init"]),
            ranks_per_replica=int(doc["ranks_per_replica"]),
            k_buckets=int(doc["k_buckets"]),
            seed=int(doc["seed"]),
            count=int(doc["count"]),
            step_lo=int(doc["steps"][0]),
            step_hi=int(doc["steps"][1]),
            weights=tuple(float(x) for x in doc["weights"]),
        )
        entries = [
            ScheduleEntry(int(e["step"]), int(e["replica"]),
                          int(e["local_rank"]), parse_location(e["location"]))
            for e in doc.get("entries", [])
        ]
    except KeyError as exc:
        raise InvalidSpec("schedule file missing key %s" % (exc,)) from exc
    return FailureSchedule(spec, entries)


class Injector:
    """Replays schedule entries; the trainer polls it at each phase."""

    def __init__(self, schedule: FailureSchedule):
        self._by_step: Dict[int, List[ScheduleEntry]] = {}
        for e in schedule.entries:
            self._by_step.setdefault(e.step, []).append(e)
        self.step = -1

    def set_step(self, step: int) -> None:
        self.step = step

    def fire(self, phase, bucket=None):
        out = []
        for e in self._by_step.get(self.step, ()):
            loc = e.location
            if loc.kind == phase and (phase != DURING_SYNC or loc.bucket == bucket):
                out.append(e.replica)
        return out


# ---- cost model and experiment config ----

@dataclass(frozen=True)
class CostModel:
    t_microbatch: float = 0.01
    t_reduce_fixed: float = 0.05
    t_reduce_per_bucket: float = 0.002
    t_restore: float = 0.001

    def __post_init__(self):
        for name, v in asdict(self).items():
            if v < 0:
                raise InvalidSpec("cost model field %s must be non-negative" % name)

    def iteration_elapsed(self, rounds, passes, reduces, rewinds) -> float:
        return (rounds * self.t_microbatch
                + passes * self.t_reduce_fixed
                + reduces * self.t_reduce_per_bucket
                + rewinds * self.t_restore)


_CONFIG_DEFAULTS = {
    "ranks_per_replica": 8,
    "k_buckets": 4,
    "dim": 8,
    "model_kind": "linear",
    "stream_seed": 0,
    "lr": 0.05,
    "policy": "static",
    "tokens_per_microbatch": 4096,
    "out_path": "metrics.jsonl",
}
_CONFIG_REQUIRED = ("w_init", "g_init", "iterations")
_COST_KEYS = ("t_microbatch", "t_reduce_fixed", "t_reduce_per_bucket", "t_restore")


@dataclass
class ExperimentConfig:
    w_init: int
    g_init: int
    iterations: int
    ranks_per_replica: int = 8
    k_buckets: int = 4
    dim: int = 8
    model_kind: str = "linear"
    stream_seed: int = 0
    lr: float = 0.05
    policy: str = "static"
    tokens_per_microbatch: int = 4096
    cost: CostModel = field(default_factory=CostModel)
    out_path: str = "metrics.jsonl"

    def __post_init__(self):
        for name in ("w_init", "g_init", "iterations", "ranks_per_replica",
                     "k_buckets", "dim", "tokens_per_microbatch"):
            if getattr(self, name) < 1:
                raise InvalidSpec("config key %r must be positive" % name)
        if self.model_kind not in ("linear", "constant"):
            raise InvalidSpec("config key 'model_kind' must be linear or constant")
        if self.policy not in ("static", "adaptive"):
            raise InvalidSpec("config key 'policy' must be static or adaptive")

    @property
    def batch(self) -> int:
        return self.w_init * self.g_init

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        if not isinstance(doc, dict):
            raise InvalidSpec("config document must be a mapping")
        doc = dict(doc)
        cost_doc = doc.pop("cost", {}) or {}
        for key in cost_doc:
            if key not in _COST_KEYS:
                raise InvalidSpec("unknown config key 'cost.%s'" % key)
        for key in doc:
            if key not in _CONFIG_DEFAULTS and key not in _CONFIG_REQUIRED:
                raise InvalidSpec("unknown config key %r" % key)
        for key in _CONFIG_REQUIRED:
            if key not in doc:
                raise InvalidSpec("missing config key %r" % key)
        kwargs = dict(_CONFIG_DEFAULTS)
        kwargs.update(doc)
        kwargs["cost"] = CostModel(**{k: float(v) for k, v in cost_doc.items()})
        return cls(**kwargs)

    def hashed_view(self) -> dict:
        """Everything the trajectory depends on. The policy kind and output
        path are deliberately excluded so a run and its oracle (or a static
        and an adaptive run of the same setup) share a hash and can be
        compared."""
        return {
            "w_init": self.w_init,
            "g_init": self.g_init,
            "iterations": self.iterations,
            "ranks_per_replica": self.ranks_per_replica,
            "k_buckets": self.k_buckets,
            "dim": self.dim,
            "model_kind": self.model_kind,
            "stream_seed": self.stream_seed,
            "lr": self.lr,
            "tokens_per_microbatch": self.tokens_per_microbatch,
            "cost": {k: getattr(self.cost, k) for k in _COST_KEYS},
        }

    def config_hash(self) -> str:
        blob = json.dumps(self.hashed_view(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


# ---- experiment driver ----

@dataclass
class ExperimentResult:
    rows: List[dict]
    final_params: Optional[np.ndarray]
    contrib_sets: List[frozenset]
    aborted: bool = False
    abort_reason: Optional[str] = None
    param_trajectory: List[np.ndarray] = field(default_factory=list)


def _metrics_row(config: ExperimentConfig, out, elapsed: float, clock: float) -> dict:
    tokens = out.contrib_total * config.tokens_per_microbatch
    denom = elapsed * out.w_cur * config.ranks_per_replica
    return {
        "iteration": out.iteration,
        "loss": float(out.loss),
        "w_cur": out.w_cur,
        "g_cur": out.state.g_cur,
        "epoch": out.final_epoch,
        "roles": sorted([rid, role] for rid, role in out.roles.items()),
        "contributions": sorted([rid, c] for rid, c in out.contributions.items()),
        "contrib_total": out.contrib_total,
        "contrib_regular": out.contrib_regular,
        "contrib_boundary": out.contrib_boundary,
        "boundary": out.boundary_crossed,
        "bucket_epochs": list(out.bucket_epochs),
        "rounds": out.rounds,
        "passes": out.passes,
        "reduces": out.reduces,
        "rewinds": out.rewinds,
        "elapsed": elapsed,
        "clock": clock,
        "tokens": tokens,
        "throughput": tokens / denom if denom > 0 else 0.0,
        "events": out.events,
    }


def verify_schedule(config: ExperimentConfig, schedule: FailureSchedule) -> None:
    if schedule.spec.w_init != config.w_init:
        raise InvalidSpec("schedule was generated for w_init=%d, config has %d"
                          % (schedule.spec.w_init, config.w_init))
    for e in schedule.entries:
        if not (0 <= e.replica < config.w_init):
            raise InvalidSpec("schedule kills unknown replica %d" % e.replica)
        if e.location.kind == DURING_SYNC and e.location.bucket >= config.k_buckets:
            raise InvalidSpec("schedule names bucket %d, config has %d buckets"
                              % (e.location.bucket, config.k_buckets))


def run_experiment(config: ExperimentConfig,
                   schedule: Optional[FailureSchedule] = None,
                   policy_kind: Optional[str] = None,
                   record_params: bool = False) -> ExperimentResult:
    """Run the full experiment; deterministic given (config, schedule, policy).

    record_params keeps a post-commit copy of the parameters per iteration,
    for trajectory-level equivalence checks.
    """
    policy = policy_kind if policy_kind is not None else config.policy
    if schedule is not None:
        verify_schedule(config, schedule)
        injector = Injector(schedule)
    else:
        injector = None

    members = list(range(config.w_init))
    state = initial_state(config.w_init, config.g_init)
    comm = Communicator(members, assign_roles(state, members))
    stream = DataStream(config.stream_seed, config.w_init, config.dim,
                        "constant" if config.model_kind == "constant" else "linear")
    replicas = {r: ReplicaState(r, ToyModel(config.model_kind, np.zeros(config.dim)),
                                config.k_buckets)
                for r in members}

    rows: List[dict] = []
    contrib_sets: List[frozenset] = []
    trajectory: List[np.ndarray] = []
    clock = 0.0
    for t in range(config.iterations):
        if injector is not None:
            injector.set_step(t)
        try:
            out = run_iteration(t, replicas, comm, state, stream,
                                injector=injector, policy_kind=policy,
                                lr=config.lr)
        except (AllReplicasDead, EmptyMembership) as exc:
            return ExperimentResult(rows, _first_params(replicas, comm),
                                    contrib_sets, aborted=True,
                                    abort_reason=str(exc),
                                    param_trajectory=trajectory)
        state = out.state
        elapsed = config.cost.iteration_elapsed(out.rounds, out.passes,
                                                out.reduces, out.rewinds)
        clock += elapsed
        rows.append(_metrics_row(config, out, elapsed, clock))
        contrib_sets.append(out.admitted_indices)
        if record_params:
            trajectory.append(_first_params(replicas, comm))
    return ExperimentResult(rows, _first_params(replicas, comm), contrib_sets,
                            param_trajectory=trajectory)


def _first_params(replicas, comm) -> Optional[np.ndarray]:
    for rid in comm.members:
        if replicas[rid].alive:
            return replicas[rid].model.params.copy()
    return None


def run_reference(config: ExperimentConfig) -> ExperimentResult:
    """The failure-free oracle: the identical pipeline with no schedule."""
    return run_experiment(config, schedule=None)


# ---- metrics files ----

def write_metrics(path: str, config: ExperimentConfig, result: ExperimentResult) -> None:
    """Line-delimited records, stable key order; first line is the meta row."""
    meta = {
        "schema": "metrics/v1",
        "config_hash": config.config_hash(),
        "policy": config.policy,
        "w_init": config.w_init,
        "g_init": config.g_init,
        "iterations": config.iterations,
        "aborted": result.aborted,
    }
    with open(path, "w") as f:
        f.write(json.dumps(meta, sort_keys=True) + "\n")
        for row in result.rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")


def read_metrics(path: str) -> Tuple[dict, List[dict]]:
    with open(path) as f:
        lines = [ln for ln in f.read().splitlines() if ln.strip()]
    if not lines:
        raise InvalidSpec("empty metrics file %r" % path)
    meta = json.loads(lines[0])
    if meta.get("schema") != "metrics/v1":
        raise InvalidSpec("not a metrics file: missing schema 'metrics/v1'")
    return meta, [json.loads(ln) for ln in lines[1:]]
