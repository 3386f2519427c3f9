"""Policy evaluation: saved cost, accuracy against the oracle, violations, timing, transfer."""

from __future__ import annotations

import json
import logging
import time
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Literal

import numpy as np
import pandas as pd
from scipy import stats

from .env import (
    EpisodeLog,
    GridState,
    Policy,
    RewardConfig,
    episode_cost,
    run_episode,
    zero_policy,
)
from .errors import DimensionMismatchError, StructuralError
from .netmodel import NetworkTopology, ReconfigurationCase, apply_reconfiguration
from .oracle import HorizonSchedule, OracleConfig, solve_horizon_oracle
from .profiles import DEFAULT_HORIZON, ProfileSet

logger = logging.getLogger(__name__)

CONFIDENCE_LEVEL = 0.95
DOMINANCE_TOLERANCE = 0.02

# Columns that depend on wall clock; kept out of the deterministic reports
TIMING_COLUMNS = ("exec_time_s", "oracle_time_s")


def confidence_interval(
    values: Sequence[float], level: float = CONFIDENCE_LEVEL
) -> tuple[float, float, float]:
    """(mean, lower, upper) of a Student-t interval; degenerate for a single value."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("confidence interval of an empty sample")
    mean = float(arr.mean())
    if arr.size == 1:
        return mean, mean, mean
    sem = float(stats.sem(arr))
    if sem == 0.0:
        return mean, mean, mean
    lo, hi = stats.t.interval(level, arr.size - 1, loc=mean, scale=sem)
    return mean, float(lo), float(hi)


def _ratio_pct(num: float, den: float) -> float | None:
    return 100.0 * num / den if den > 0 else None


@dataclass(frozen=True)
class MetricsReport:
    policy: str
    topology_id: str
    episodes: int
    saved_cost_usd: float
    saved_cost_lo: float
    saved_cost_hi: float
    accuracy_vs_oracle_pct: float | None
    accuracy_vs_baseline_policy_pct: float | None
    violation_count: float
    violation_count_ess_nodes: float
    mean_violation_pu: float
    no_control_violation_count: float
    diverged_episodes: int
    exec_time_s: float = 0.0
    oracle_time_s: float | None = None
    case_id: str = ""
    flags: tuple[str, ...] = ()
    episode_saved: tuple[float, ...] = field(default=(), repr=False)
    oracle_episode_saved: tuple[float, ...] | None = field(default=None, repr=False)
    logs: tuple[EpisodeLog, ...] = field(default=(), repr=False, compare=False)

    def row(self, *, timing: bool = False) -> dict[str, Any]:
        skip = ("episode_saved", "oracle_episode_saved", "logs", "flags")
        out = {f.name: getattr(self, f.name) for f in fields(self) if f.name not in skip}
        out["flags"] = ";".join(self.flags)
        if not timing:
            for key in TIMING_COLUMNS:
                out.pop(key)
        return out


def _violation_steps(log: EpisodeLog) -> tuple[int, int, float, int]:
    steps = sum(1 for r in log.records if r.violations > 0)
    ess_steps = sum(1 for r in log.records if r.ess_violations > 0)
    magnitude = float(sum(r.violation_sum for r in log.records))
    events = sum(r.violations for r in log.records)
    return steps, ess_steps, magnitude, events


def metrics_from_logs(
    logs: Sequence[EpisodeLog],
    baseline_logs: Sequence[EpisodeLog],
    oracle_saved: Sequence[float] | None = None,
    *,
    policy: str = "",
    topology_id: str = "",
    case_id: str = "",
    reference_saved: float | None = None,
    exec_times: Sequence[float] = (),
    oracle_times: Sequence[float] = (),
    level: float = CONFIDENCE_LEVEL,
) -> MetricsReport:
    """Aggregate per-episode logs; a pure function of its arguments.

    `baseline_logs[k]` is the no-control episode matching `logs[k]` (same day
    and topology). `reference_saved` is the mean saved cost of the baseline
    policy the accuracy-vs-baseline column is normalized by.
    Episodes that diverged in either log count in `diverged_episodes` only.
    """
    if not logs:
        raise ValueError("no episode logs to aggregate")
    if len(baseline_logs) != len(logs):
        raise DimensionMismatchError(
            f"{len(logs)} policy logs but {len(baseline_logs)} no-control logs"
        )
    # diverged episodes are faults: NaN here, left out of every aggregate
    ok = [not (p.diverged or b.diverged) for p, b in zip(logs, baseline_logs)]
    saved = [
        episode_cost(b) - episode_cost(p) if good else float("nan")
        for p, b, good in zip(logs, baseline_logs, ok)
    ]
    valid = [s for s, good in zip(saved, ok) if good]
    flags: list[str] = []
    if valid:
        mean, lo, hi = confidence_interval(valid, level)
    else:
        mean = lo = hi = float("nan")
        flags.append("no_valid_episodes")

    accuracy = None
    if oracle_saved is not None:
        if len(oracle_saved) != len(logs):
            raise DimensionMismatchError(
                f"{len(logs)} policy logs but {len(oracle_saved)} oracle results"
            )
        if valid:
            best = [float(o) for o, good in zip(oracle_saved, ok) if good]
            accuracy = _ratio_pct(float(np.sum(valid)), float(np.sum(best)))
            if accuracy is None:
                flags.append("oracle_saved_nonpositive")
    accuracy_ref = None
    if reference_saved is not None and valid:
        accuracy_ref = _ratio_pct(mean, reference_saved)
        if accuracy_ref is None:
            flags.append("reference_saved_nonpositive")

    per_episode = [_violation_steps(log) for log in logs]
    events = sum(v[3] for v in per_episode)
    magnitude = sum(v[2] for v in per_episode)
    diverged = ok.count(False)
    if diverged:
        flags.append("diverged")
        logger.warning(
            "%s: %d of %d episodes diverged; excluded from saved cost and accuracy",
            policy or "policy",
            diverged,
            len(logs),
        )
    return MetricsReport(
        policy=policy,
        topology_id=topology_id or logs[0].topology_id,
        episodes=len(logs),
        saved_cost_usd=mean,
        saved_cost_lo=lo,
        saved_cost_hi=hi,
        accuracy_vs_oracle_pct=accuracy,
        accuracy_vs_baseline_policy_pct=accuracy_ref,
        violation_count=float(np.mean([v[0] for v in per_episode])),
        violation_count_ess_nodes=float(np.mean([v[1] for v in per_episode])),
        mean_violation_pu=magnitude / events if events else 0.0,
        no_control_violation_count=float(
            np.mean([_violation_steps(b)[0] for b in baseline_logs])
        ),
        diverged_episodes=diverged,
        exec_time_s=float(np.median(exec_times)) if len(exec_times) else 0.0,
        oracle_time_s=float(np.median(oracle_times)) if len(oracle_times) else None,
        case_id=case_id,
        flags=tuple(flags),
        episode_saved=tuple(saved),
        oracle_episode_saved=None if oracle_saved is None else tuple(float(x) for x in oracle_saved),
        logs=tuple(logs),
    )


def with_reference(report: MetricsReport, reference_saved: float) -> MetricsReport:
    """Fill the accuracy-vs-baseline-policy column once the baseline policy's saved cost is known."""
    if np.isnan(report.saved_cost_usd):
        return report
    ratio = _ratio_pct(report.saved_cost_usd, reference_saved)
    flags = tuple(f for f in report.flags if f != "reference_saved_nonpositive")
    if ratio is None:
        flags = (*flags, "reference_saved_nonpositive")
    return replace(report, accuracy_vs_baseline_policy_pct=ratio, flags=flags)


class _TimedPolicy:
    """Accumulates the wall time spent inside the wrapped policy."""

    def __init__(self, policy: Policy) -> None:
        self.policy = policy
        self.elapsed = 0.0

    def __call__(self, state: GridState, topo: NetworkTopology) -> Any:
        started = time.perf_counter()
        try:
            return self.policy(state, topo)
        finally:
            self.elapsed += time.perf_counter() - started


@dataclass
class OracleCache:
    """Oracle schedules keyed by (topology id, day); solved on first use."""

    cfg: OracleConfig = field(default_factory=OracleConfig)
    schedules: dict[tuple[str, int], HorizonSchedule] = field(default_factory=dict)

    def get(
        self,
        topo: NetworkTopology,
        profiles: ProfileSet,
        day: int,
        reward_cfg: RewardConfig,
    ) -> HorizonSchedule:
        key = (topo.topology_id, day)
        if key not in self.schedules:
            self.schedules[key] = solve_horizon_oracle(topo, profiles, day, self.cfg, reward_cfg)
        return self.schedules[key]


def evaluate_policy(
    policy: Policy | Sequence[Policy],
    topo: NetworkTopology,
    profiles: ProfileSet,
    episodes: Sequence[int],
    *,
    name: str = "policy",
    reward_cfg: RewardConfig | None = None,
    oracle: OracleCache | None = None,
    reference_saved: float | None = None,
    case_id: str = "",
    horizon: int = DEFAULT_HORIZON,
) -> MetricsReport:
    """Deterministic rollouts of one policy per seed over `episodes` (day indices).

    Confidence bounds run over seeds x episodes. Dimension mismatches propagate.
    """
    reward_cfg = reward_cfg or RewardConfig()
    policies = [policy] if callable(policy) else list(policy)
    baseline = {
        day: run_episode(zero_policy, topo, profiles, day, reward_cfg, horizon=horizon)
        for day in episodes
    }
    logs: list[EpisodeLog] = []
    baseline_logs: list[EpisodeLog] = []
    exec_times: list[float] = []
    oracle_saved: list[float] | None = [] if oracle is not None else None
    oracle_times: list[float] = []
    for pol in policies:
        for day in episodes:
            timed = _TimedPolicy(pol)
            logs.append(run_episode(timed, topo, profiles, day, reward_cfg, horizon=horizon))
            exec_times.append(timed.elapsed)
            baseline_logs.append(baseline[day])
            if oracle is not None and oracle_saved is not None:
                schedule = oracle.get(topo, profiles, day, reward_cfg)
                oracle_saved.append(schedule.saved_cost)
                oracle_times.append(schedule.solve_time_s)
    report = metrics_from_logs(
        logs,
        baseline_logs,
        oracle_saved,
        policy=name,
        topology_id=topo.topology_id,
        case_id=case_id,
        reference_saved=reference_saved,
        exec_times=exec_times,
        oracle_times=oracle_times,
    )
    logger.info(
        "%s on %s: saved %.3f $ [%.3f, %.3f], %.1f violation steps/episode",
        name,
        topo.name,
        report.saved_cost_usd,
        report.saved_cost_lo,
        report.saved_cost_hi,
        report.violation_count,
    )
    return report


# Transfer experiments

TransferStatus = Literal["ok", "structural_failure"]


@dataclass(frozen=True)
class TransferReport:
    policy: str
    source: str
    target: str
    status: TransferStatus
    report: MetricsReport | None = None
    failure: str = ""
    delta_saved_usd: float | None = None
    delta_accuracy_pct: float | None = None

    def row(self, *, timing: bool = False) -> dict[str, Any]:
        out: dict[str, Any] = {
            "policy": self.policy,
            "source": self.source,
            "target": self.target,
            "status": self.status,
            "failure": self.failure,
            "delta_saved_usd": self.delta_saved_usd,
            "delta_accuracy_pct": self.delta_accuracy_pct,
        }
        if self.report is not None:
            metrics = self.report.row(timing=timing)
            metrics.pop("policy")
            out.update(metrics)
        return out


def _guarded(
    name: str,
    source: str,
    target: str,
    run: Callable[[], MetricsReport],
) -> TransferReport:
    try:
        report = run()
    except (DimensionMismatchError, StructuralError) as exc:
        logger.warning("%s on %s: structural failure (%s)", name, target, exc)
        return TransferReport(
            policy=name, source=source, target=target, status="structural_failure", failure=str(exc)
        )
    return TransferReport(policy=name, source=source, target=target, status="ok", report=report)


def reconfiguration_suite(
    policies: Mapping[str, Policy],
    base: NetworkTopology,
    cases: Mapping[str, ReconfigurationCase],
    profiles: ProfileSet,
    episodes: Sequence[int],
    *,
    reward_cfg: RewardConfig | None = None,
    oracle: OracleCache | None = None,
    horizon: int = DEFAULT_HORIZON,
    reference_case: str | None = None,
) -> list[TransferReport]:
    """Zero-shot evaluation of every policy on every reconfiguration case.

    Deltas are taken against `reference_case` (default: the first case, which
    in the shipped files is the unmodified topology).
    """
    reward_cfg = reward_cfg or RewardConfig()
    ref_id = reference_case or next(iter(cases), None)
    out: list[TransferReport] = []
    reference: dict[str, MetricsReport] = {}
    for case_id, case in cases.items():
        try:
            topo = apply_reconfiguration(base, case)
        except StructuralError as exc:
            logger.warning("case %s cannot be applied: %s", case_id, exc)
            out.extend(
                TransferReport(
                    policy=name,
                    source=base.topology_id,
                    target=case_id,
                    status="structural_failure",
                    failure=str(exc),
                )
                for name in policies
            )
            continue
        for name, policy in policies.items():

            def run(
                p: Policy = policy, n: str = name, c: str = case_id, t: NetworkTopology = topo
            ) -> MetricsReport:
                return evaluate_policy(
                    p,
                    t,
                    profiles,
                    episodes,
                    name=n,
                    reward_cfg=reward_cfg,
                    oracle=oracle,
                    case_id=c,
                    horizon=horizon,
                )

            entry = _guarded(name, base.topology_id, case_id, run)
            if entry.report is not None and case_id == ref_id:
                reference[name] = entry.report
            out.append(entry)
    return [_with_delta(e, reference.get(e.policy)) for e in out]


def _with_delta(entry: TransferReport, ref: MetricsReport | None) -> TransferReport:
    if entry.report is None or ref is None:
        return entry
    acc, ref_acc = entry.report.accuracy_vs_oracle_pct, ref.accuracy_vs_oracle_pct
    return TransferReport(
        policy=entry.policy,
        source=entry.source,
        target=entry.target,
        status=entry.status,
        report=entry.report,
        failure=entry.failure,
        delta_saved_usd=entry.report.saved_cost_usd - ref.saved_cost_usd,
        delta_accuracy_pct=None if acc is None or ref_acc is None else acc - ref_acc,
    )


def cross_transfer(
    policy: Policy,
    name: str,
    source: NetworkTopology,
    target: NetworkTopology,
    profiles: ProfileSet,
    episodes: Sequence[int],
    *,
    reward_cfg: RewardConfig | None = None,
    oracle: OracleCache | None = None,
    horizon: int = DEFAULT_HORIZON,
) -> TransferReport:
    """Zero-shot evaluation on another system; dimension failures are recorded, not raised."""

    def run() -> MetricsReport:
        return evaluate_policy(
            policy,
            target,
            profiles,
            episodes,
            name=name,
            reward_cfg=reward_cfg,
            oracle=oracle,
            case_id=f"{source.topology_id}->{target.topology_id}",
            horizon=horizon,
        )

    return _guarded(name, source.topology_id, target.topology_id, run)


@dataclass(frozen=True)
class TimingReport:
    topology_id: str
    policy_median_s: float
    oracle_median_s: float

    @property
    def ratio(self) -> float:
        return self.oracle_median_s / max(self.policy_median_s, 1e-12)


def timing_comparison(
    policy: Policy,
    topo: NetworkTopology,
    profiles: ProfileSet,
    episodes: Sequence[int],
    *,
    oracle_cfg: OracleConfig | None = None,
    reward_cfg: RewardConfig | None = None,
    horizon: int = DEFAULT_HORIZON,
) -> TimingReport:
    """Median per-episode policy inference time against median oracle solve time."""
    reward_cfg = reward_cfg or RewardConfig()
    policy_times: list[float] = []
    oracle_times: list[float] = []
    for day in episodes:
        timed = _TimedPolicy(policy)
        run_episode(timed, topo, profiles, day, reward_cfg, horizon=horizon)
        policy_times.append(timed.elapsed)
        oracle_times.append(
            solve_horizon_oracle(topo, profiles, day, oracle_cfg, reward_cfg).solve_time_s
        )
    report = TimingReport(
        topology_id=topo.topology_id,
        policy_median_s=float(np.median(policy_times)),
        oracle_median_s=float(np.median(oracle_times)),
    )
    logger.info(
        "timing on %s: policy %.4f s, oracle %.2f s, speedup %.0fx",
        topo.name,
        report.policy_median_s,
        report.oracle_median_s,
        report.ratio,
    )
    return report


@dataclass(frozen=True)
class DominanceViolation:
    policy: str
    topology_id: str
    episode: int
    saved: float
    oracle_saved: float


def check_oracle_dominance(
    reports: Sequence[MetricsReport], tolerance: float = DOMINANCE_TOLERANCE
) -> list[DominanceViolation]:
    """Episodes where a policy saved more than the oracle plus `tolerance` of its magnitude."""
    out: list[DominanceViolation] = []
    for rep in reports:
        if rep.oracle_episode_saved is None:
            continue
        for k, (saved, best) in enumerate(zip(rep.episode_saved, rep.oracle_episode_saved)):
            if saved > best + tolerance * abs(best) + 1e-9:
                out.append(DominanceViolation(rep.policy, rep.topology_id, k, saved, best))
    if out:
        logger.warning("%d episodes beat the oracle by more than %.0f%%", len(out), 100 * tolerance)
    return out


# Report files


def reports_frame(reports: Sequence[MetricsReport], *, timing: bool = False) -> pd.DataFrame:
    return pd.DataFrame([r.row(timing=timing) for r in reports])


def transfer_frame(entries: Sequence[TransferReport], *, timing: bool = False) -> pd.DataFrame:
    return pd.DataFrame([e.row(timing=timing) for e in entries])


def write_frame(frame: pd.DataFrame, csv_path: str | Path, json_path: str | Path | None = None) -> list[Path]:
    """CSV (and optionally JSON records) with full float precision."""
    written = []
    out = Path(csv_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(out, index=False, float_format="%.17g")
    written.append(out)
    if json_path is not None:
        jpath = Path(json_path)
        records = json.loads(frame.to_json(orient="records", double_precision=15))
        jpath.write_text(json.dumps(records, indent=2, sort_keys=True), encoding="utf-8")
        written.append(jpath)
    return written
