"""Command-line entry point: train, evaluate, oracle, suite, validate, report."""

from __future__ import annotations

import argparse
import logging
import os
import sys
import tempfile
from collections.abc import Callable, Sequence
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict

from . import __version__
from . import tensor as T
from .builder import build_policy_hub
from .config import ExperimentConfig, config_hash, load_config, validate_config
from .env import EpisodeLog, FeatureScaling, RewardConfig, reset
from .errors import (
    CheckpointError,
    DimensionMismatchError,
    OracleInfeasibleError,
    StructuralError,
    TopoDispatchError,
)
from .evaluation import (
    MetricsReport,
    OracleCache,
    TransferReport,
    check_oracle_dominance,
    confidence_interval,
    cross_transfer,
    evaluate_policy,
    metrics_from_logs,
    reconfiguration_suite,
    reports_frame,
    transfer_frame,
    with_reference,
    write_frame,
)
from .netmodel import (
    NetworkTopology,
    ReconfigurationCase,
    apply_reconfiguration,
    load_network,
    load_reconfigurations,
    resolve_network_path,
)
from .networks import VARIANTS, NetworkConfig, build_actor, build_critic
from .oracle import (
    OracleConfig,
    export_instance,
    solve_horizon_oracle,
    tiny_instance,
    validate_oracle,
    write_schedule_csv,
)
from .policy import PolicyHub
from .powerflow import nominal_injections, residuals, solve_radial
from .profiles import ProfileSet
from .td3 import MANIFEST_FILE, TD3Agent, cycle_days, train, write_training_log

logger = logging.getLogger(__name__)

EXIT_OK = 0
MANIFEST_NAME = "manifest.json"
TIMING_NAME = "timing.csv"


# Run bookkeeping


class RunManifest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    command: str
    config_name: str
    config_hash: str
    version: str
    started_at: str
    finished_at: str
    exit_code: int
    artifacts: list[str]


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _slug(value: str) -> str:
    return value.replace("/", "__").replace(">", "").replace(" ", "_")


@dataclass
class RunRecorder:
    """Collects every artifact a command writes and the wall-clock timings kept apart from them."""

    root: Path
    command: str
    config: ExperimentConfig | None
    started_at: str = field(default_factory=_now)
    artifacts: list[Path] = field(default_factory=list)
    timings: list[dict[str, Any]] = field(default_factory=list)

    def path(self, *parts: str) -> Path:
        out = self.root.joinpath(*parts)
        out.parent.mkdir(parents=True, exist_ok=True)
        return out

    def add(self, *paths: Path) -> None:
        self.artifacts.extend(paths)

    def add_tree(self, directory: Path) -> None:
        self.artifacts.extend(p for p in sorted(directory.rglob("*")) if p.is_file())

    def time(self, **row: Any) -> None:
        self.timings.append(row)

    def finish(self, exit_code: int) -> Path:
        if self.timings:
            timing = self.path(TIMING_NAME)
            pd.DataFrame(self.timings).to_csv(timing, index=False, float_format="%.6g")
            self.add(timing)
        manifest = RunManifest(
            command=self.command,
            config_name=self.config.name if self.config else "",
            config_hash=config_hash(self.config) if self.config else "",
            version=__version__,
            started_at=self.started_at,
            finished_at=_now(),
            exit_code=exit_code,
            artifacts=sorted({p.relative_to(self.root).as_posix() for p in self.artifacts}),
        )
        out = self.path(MANIFEST_NAME)
        fd, tmp = tempfile.mkstemp(dir=out.parent, prefix=".manifest-", suffix=".json")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                fh.write(manifest.model_dump_json(indent=2))
            os.replace(tmp, out)
        except BaseException:
            Path(tmp).unlink(missing_ok=True)
            raise
        logger.info("%s finished with exit code %d; manifest %s", self.command, exit_code, out)
        return out


# Shared helpers


def _experiment(args: argparse.Namespace) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else validate_config({})
    return cfg.with_overrides(
        seeds=None if args.seed is None else [args.seed],
        output_dir=args.out,
        variant=args.variant,
    )


def _reconfiguration_file(cfg: ExperimentConfig, network: str | None = None) -> str | None:
    if network is None:
        if cfg.evaluation.reconfigurations:
            return cfg.evaluation.reconfigurations
        network = cfg.network
    # feeder34 -> reconfig34.yaml
    digits = "".join(ch for ch in Path(network).stem if ch.isdigit())
    candidate = f"reconfig{digits}.yaml"
    return candidate if digits and resolve_network_path(candidate).exists() else None


def _cases(path: str | None) -> dict[str, ReconfigurationCase]:
    return load_reconfigurations(path) if path else {}


def _topology(cfg: ExperimentConfig, case_id: str | None) -> tuple[NetworkTopology, str]:
    base = cfg.load_network()
    if not case_id:
        return base, ""
    cases = _cases(_reconfiguration_file(cfg))
    if case_id not in cases:
        raise StructuralError(
            f"unknown topology case {case_id!r}; known: {', '.join(cases) or 'none'}"
        )
    return apply_reconfiguration(base, cases[case_id]), case_id


def _print_frame(frame: pd.DataFrame) -> None:
    if frame.empty:
        return
    with pd.option_context("display.width", 200, "display.max_columns", 30):
        print(frame.to_string(index=False, float_format=lambda v: f"{v:.4g}"))


def _oracle_cache(cfg: ExperimentConfig) -> OracleCache | None:
    return OracleCache(cfg=cfg.oracle) if cfg.evaluation.oracle else None


def _write_episode_logs(
    rec: RunRecorder,
    report: MetricsReport,
    days: Sequence[int],
    index: list[dict[str, Any]],
    variant: str,
) -> None:
    for k, log in enumerate(report.logs):
        day = days[k % len(days)]
        name = f"day_{day:04d}_{k:03d}.csv"
        rel = Path("episodes") / _slug(report.policy) / _slug(log.topology_id) / name
        rec.add(log.write_csv(rec.path(*rel.parts)))
        index.append(
            {
                "policy": report.policy,
                "variant": variant,
                "topology_id": log.topology_id,
                "case_id": report.case_id,
                "day": day,
                "path": rel.as_posix(),
            }
        )


def _oracle_rows(cache: OracleCache | None) -> pd.DataFrame:
    if cache is None:
        return pd.DataFrame()
    rows = [
        {
            "topology_id": s.topology_id,
            "day": s.day,
            "total_cost": s.total_cost,
            "baseline_cost": s.baseline_cost,
            "saved_cost": s.saved_cost,
            "objective": s.objective,
            "feasible": s.feasible,
            "fallback": s.fallback,
            "iterations": s.iterations,
            "best_start": s.best_start,
        }
        for s in cache.schedules.values()
    ]
    return pd.DataFrame(rows)


# Commands


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _experiment(args)
    topo, case_id = _topology(cfg, args.topology)
    profiles = cfg.profiles.load(topo)
    scaling = FeatureScaling.for_profiles(profiles, topo, cfg.horizon)
    rec = RunRecorder(Path(cfg.output_dir) / cfg.name / "train", "train", cfg)
    digest = config_hash(cfg)
    logs: dict[int, pd.DataFrame] = {}
    for seed in cfg.seeds:
        td3_cfg = cfg.td3_for_seed(seed)
        agent = TD3Agent(td3_cfg, topo, scaling)
        seed_dir = rec.root / f"seed_{seed}"
        logger.info(
            "training %s on %s (seed %d, %d episodes)", agent.variant, topo.name, seed, td3_cfg.episodes
        )
        result = train(
            agent,
            cycle_days(topo, profiles),
            cfg.reward,
            horizon=cfg.horizon,
            checkpoint_dir=seed_dir / "checkpoints",
            config_hash=digest,
        )
        rec.add(write_training_log(result.log, seed_dir / "training_log.csv", timing=False))
        for ckpt in result.checkpoints:
            rec.add_tree(ckpt)
        for row in result.log:
            rec.time(command="train", seed=seed, episode=row.episode, wall_time_s=row.wall_time)
        logs[seed] = pd.read_csv(seed_dir / "training_log.csv")

    summary = _seed_summary(logs)
    if case_id:
        summary.insert(0, "case_id", case_id)
    rec.add(*write_frame(summary, rec.path("training_summary.csv")))
    _print_frame(summary.tail(5))
    rec.finish(EXIT_OK)
    return EXIT_OK


def _seed_summary(logs: dict[int, pd.DataFrame]) -> pd.DataFrame:
    """Per-episode mean and 95% interval of the return across seeds."""
    frames = list(logs.values())
    n = min(len(f) for f in frames) if frames else 0
    rows = []
    for k in range(n):
        returns = [float(f["return"].iloc[k]) for f in frames]
        mean, lo, hi = confidence_interval(returns)
        rows.append(
            {
                "episode": int(frames[0]["episode"].iloc[k]),
                "seeds": len(frames),
                "mean_return": mean,
                "return_lo": lo,
                "return_hi": hi,
                "mean_r0": float(np.mean([f["mean_r0"].iloc[k] for f in frames])),
                "mean_r1": float(np.mean([f["mean_r1"].iloc[k] for f in frames])),
                "mean_violations": float(np.mean([f["violations"].iloc[k] for f in frames])),
            }
        )
    return pd.DataFrame(rows)


def _load_hub(sources: Sequence[str], variant: str | None) -> PolicyHub:
    return build_policy_hub(list(sources), variant=variant)


def _evaluate_hub(
    hub: PolicyHub,
    topo: NetworkTopology,
    profiles: ProfileSet,
    cfg: ExperimentConfig,
    cache: OracleCache | None,
    case_id: str,
) -> tuple[list[MetricsReport], list[TransferReport]]:
    reports: list[MetricsReport] = []
    failures: list[TransferReport] = []
    for lp in hub.all_policies():
        try:
            reports.append(
                evaluate_policy(
                    lp.policy,
                    topo,
                    profiles,
                    cfg.evaluation.days,
                    name=lp.name,
                    reward_cfg=cfg.reward,
                    oracle=cache,
                    case_id=case_id,
                    horizon=cfg.horizon,
                )
            )
        except (DimensionMismatchError, StructuralError) as exc:
            logger.error("%s cannot run on %s: %s", lp.name, topo.topology_id, exc)
            failures.append(
                TransferReport(
                    policy=lp.name,
                    source=lp.topology_id or "builtin",
                    target=topo.topology_id,
                    status="structural_failure",
                    failure=str(exc),
                )
            )
    # The flat network is the reference for the accuracy-vs-baseline-policy column
    ref = next(
        (r for r in reports if hub.get(r.policy).variant == "nn"),
        None,
    )
    if ref is not None:
        reports = [with_reference(r, ref.saved_cost_usd) for r in reports]
    return reports, failures


def cmd_evaluate(args: argparse.Namespace) -> int:
    cfg = _experiment(args)
    topo, case_id = _topology(cfg, args.topology)
    profiles = cfg.profiles.load(topo)
    hub = _load_hub(args.policy or [], cfg.variant if args.variant else None)
    cache = _oracle_cache(cfg)
    rec = RunRecorder(Path(cfg.output_dir) / cfg.name / "evaluate", "evaluate", cfg)

    reports, failures = _evaluate_hub(hub, topo, profiles, cfg, cache, case_id)
    index: list[dict[str, Any]] = []
    for report in reports:
        _write_episode_logs(rec, report, cfg.evaluation.days, index, hub.get(report.policy).variant)
        rec.time(command="evaluate", policy=report.policy, exec_time_s=report.exec_time_s)
    if index:
        rec.add(*write_frame(pd.DataFrame(index), rec.path("episodes", "index.csv")))
    frame = reports_frame(reports)
    if not frame.empty:
        rec.add(*write_frame(frame, rec.path("metrics.csv"), rec.path("metrics.json")))
    if failures:
        rec.add(*write_frame(transfer_frame(failures), rec.path("failures.csv")))
    oracle_frame = _oracle_rows(cache)
    if not oracle_frame.empty and cache is not None:
        rec.add(*write_frame(oracle_frame, rec.path("oracle.csv")))
        for s in cache.schedules.values():
            rec.time(command="oracle", topology_id=s.topology_id, day=s.day, solve_time_s=s.solve_time_s)
    dominance = check_oracle_dominance(reports)
    if dominance:
        rec.add(*write_frame(pd.DataFrame([asdict(d) for d in dominance]), rec.path("dominance.csv")))

    _print_frame(frame)
    code = EXIT_OK
    if failures:
        _print_frame(transfer_frame(failures)[["policy", "target", "status", "failure"]])
        code = DimensionMismatchError.exit_code
    elif cache is not None and any(s.fallback for s in cache.schedules.values()):
        code = OracleInfeasibleError.exit_code
    rec.finish(code)
    return code


def cmd_oracle(args: argparse.Namespace) -> int:
    cfg = _experiment(args)
    rec = RunRecorder(Path(cfg.output_dir) / cfg.name / "oracle", "oracle", cfg)
    code = EXIT_OK
    if args.validate:
        code = max(code, _oracle_validation(rec, cfg))
    if not args.validate or args.topology or args.export_instance:
        topo, case_id = _topology(cfg, args.topology)
        profiles = cfg.profiles.load(topo)
        cache = OracleCache(cfg=cfg.oracle)
        for day in cfg.evaluation.days:
            schedule = cache.get(topo, profiles, day, cfg.reward)
            rel = ("schedules", _slug(topo.topology_id), f"day_{day:04d}.csv")
            rec.add(write_schedule_csv(schedule, topo, rec.path(*rel)))
            rec.time(command="oracle", topology_id=topo.topology_id, day=day, solve_time_s=schedule.solve_time_s)
            if args.export_instance:
                inst = rec.path("instances", _slug(topo.topology_id), f"day_{day:04d}.json")
                rec.add(export_instance(topo, profiles, day, inst, cfg=cfg.oracle, reward_cfg=cfg.reward))
        frame = _oracle_rows(cache)
        if case_id:
            frame.insert(0, "case_id", case_id)
        rec.add(*write_frame(frame, rec.path("oracle.csv"), rec.path("oracle.json")))
        _print_frame(frame)
        if any(s.fallback for s in cache.schedules.values()):
            logger.error("oracle fell back to the zero schedule on at least one day")
            code = max(code, OracleInfeasibleError.exit_code)
    rec.finish(code)
    return code


# Small instances with known structure for the exhaustive comparison
_VALIDATION_PRICES: tuple[tuple[float, ...], ...] = (
    (0.1, 0.1, 0.5, 0.5),
    (0.3, 0.1, 0.4, 0.2, 0.5, 0.1),
    (0.2, 0.2, 0.2, 0.2),
)


def _oracle_validation(rec: RunRecorder, cfg: ExperimentConfig) -> int:
    rows = []
    for prices in _VALIDATION_PRICES:
        topo, day = tiny_instance(prices)
        flat = len(set(prices)) == 1
        ocfg = cfg.oracle.model_copy(update={"terminal_soc": "initial"}) if flat else cfg.oracle
        check = validate_oracle(topo, day, cfg=ocfg, reward_cfg=cfg.reward)
        rows.append(
            {
                "prices": " ".join(f"{p:g}" for p in prices),
                "terminal_soc": ocfg.terminal_soc,
                "dp_saved_cost": check.dp_saved_cost,
                "oracle_saved_cost": check.oracle_saved_cost,
                "relative_gap": check.relative_gap,
                "agrees": check.agrees,
            }
        )
    frame = pd.DataFrame(rows)
    rec.add(*write_frame(frame, rec.path("oracle_validation.csv")))
    _print_frame(frame)
    return EXIT_OK if bool(frame["agrees"].all()) else OracleInfeasibleError.exit_code


def _existing_sources(sources: Sequence[str]) -> tuple[list[str], list[str]]:
    present, missing = [], []
    for src in sources:
        if src.split(":", 1)[0] in ("zero", "no_control", "random") or (Path(src) / MANIFEST_FILE).is_file():
            present.append(src)
        else:
            missing.append(src)
    return present, missing


def cmd_suite(args: argparse.Namespace) -> int:
    cfg = _experiment(args)
    rec = RunRecorder(Path(cfg.output_dir) / cfg.name / "suite", "suite", cfg)
    present, missing = _existing_sources(args.policy or [])
    if missing:
        logger.warning("missing checkpoints: %s", ", ".join(missing))
        rec.add(*write_frame(pd.DataFrame({"source": missing}), rec.path("missing.csv")))
    hub = _load_hub(present, None)
    cache = _oracle_cache(cfg)

    systems: list[tuple[NetworkTopology, str | None]] = [
        (cfg.load_network(), _reconfiguration_file(cfg))
    ]
    if cfg.evaluation.transfer_network:
        target = load_network(cfg.evaluation.transfer_network)
        systems.append(
            (
                target,
                cfg.evaluation.transfer_reconfigurations
                or _reconfiguration_file(cfg, cfg.evaluation.transfer_network),
            )
        )

    entries: list[TransferReport] = []
    profile_sets = {topo.topology_id: cfg.profiles.load(topo) for topo, _ in systems}
    for topo, cases_file in systems:
        cases = _cases(cases_file) or {"base": ReconfigurationCase(id="base")}
        entries.extend(
            reconfiguration_suite(
                hub.as_mapping(),
                topo,
                cases,
                profile_sets[topo.topology_id],
                cfg.evaluation.days,
                reward_cfg=cfg.reward,
                oracle=cache,
                horizon=cfg.horizon,
            )
        )
    if len(systems) == 2:
        by_name = {topo.topology_id: topo for topo, _ in systems}
        for lp in hub.all_policies():
            if lp.agent is None:
                continue
            home = lp.topology_id.split("/", 1)[0]
            if home not in by_name:
                continue
            other = next(t for name, t in by_name.items() if name != home)
            entries.append(
                cross_transfer(
                    lp.policy,
                    lp.name,
                    by_name[home],
                    other,
                    profile_sets[other.topology_id],
                    cfg.evaluation.days,
                    reward_cfg=cfg.reward,
                    oracle=cache,
                    horizon=cfg.horizon,
                )
            )

    frame = transfer_frame(entries)
    rec.add(*write_frame(frame, rec.path("suite.csv"), rec.path("suite.json")))
    for e in entries:
        if e.report is not None:
            rec.time(command="suite", policy=e.policy, target=e.target, exec_time_s=e.report.exec_time_s)
    if cache is not None:
        rec.add(*write_frame(_oracle_rows(cache), rec.path("oracle.csv")))
    _print_frame(frame[[c for c in ("policy", "target", "status", "saved_cost_usd", "accuracy_vs_oracle_pct") if c in frame]])
    code = CheckpointError.exit_code if missing else EXIT_OK
    rec.finish(code)
    return code


# validate: numerical self-checks runnable without pytest


def _check_powerflow() -> tuple[bool, str]:
    worst = 0.0
    for name in ("feeder34", "feeder69"):
        topo = load_network(name)
        inj = nominal_injections(topo)
        res = residuals(topo, inj, solve_radial(topo, inj))
        worst = max(worst, *res.values())
    return worst <= 1e-6, f"worst residual {worst:.3g} pu"


def _check_gradients(seed: int) -> tuple[bool, str]:
    topo, day = tiny_instance((0.1, 0.3, 0.2, 0.4))
    rng = np.random.default_rng(seed)
    state = reset(topo, day, 0, horizon=day.horizon)
    scaling = FeatureScaling(price_scale=0.4, horizon=day.horizon, base_mva=topo.limits.base_mva)
    worst = 0.0
    for variant in VARIANTS:
        ncfg = NetworkConfig(variant=variant, hidden=4, mlp_width=6)
        actor = build_actor(ncfg, topo, rng)
        critic = build_critic(ncfg, topo, rng)
        action = T.constant(rng.uniform(-1, 1, size=(1, topo.n_ess)))

        def actor_loss() -> T.Tensor:
            return T.reduce_sum(actor.forward_batch([state], [topo], scaling))

        def critic_loss() -> T.Tensor:
            q1, q2 = critic.forward_batch([state], [topo], action, scaling)
            return T.add(T.reduce_sum(q1), T.reduce_sum(q2))

        for store, loss in ((actor.parameters(), actor_loss), (critic.parameters(), critic_loss)):
            worst = max(worst, _gradient_gap(store, loss))
    return worst < 1e-4, f"worst relative error {worst:.3g}"


def _gradient_gap(store: T.ParameterStore, loss: Callable[[], T.Tensor]) -> float:
    params = list(store)
    store.zero_grad()
    with T.Tape() as tape:
        out = loss()
    T.backward(tape, out, params)
    numeric = T.numerical_gradient(lambda: loss().item(), params)
    gap = max(T.relative_error(p.grad, numeric[p.name], floor=1e-4) for p in params)
    store.zero_grad()
    return gap


def _check_oracle(cfg: ExperimentConfig) -> tuple[bool, str]:
    ocfg = OracleConfig(seed=cfg.oracle.seed)
    reward = RewardConfig()
    topo, day = tiny_instance((0.1, 0.1, 0.5, 0.5))
    check = validate_oracle(topo, day, cfg=ocfg, reward_cfg=reward)
    flat_topo, flat_day = tiny_instance((0.2, 0.2, 0.2, 0.2))
    flat = solve_horizon_oracle(
        flat_topo, flat_day, 0, ocfg.model_copy(update={"terminal_soc": "initial"}), reward
    )
    ok = check.agrees and abs(flat.saved_cost) <= 1e-3
    return ok, f"dp gap {check.relative_gap:.3g}, flat-price saved {flat.saved_cost:.2g} $"


def cmd_validate(args: argparse.Namespace) -> int:
    cfg = _experiment(args)
    rec = RunRecorder(Path(cfg.output_dir) / cfg.name / "validate", "validate", cfg)
    checks: list[tuple[str, Callable[[], tuple[bool, str]], int]] = [
        ("powerflow_residuals", _check_powerflow, 5),
        ("gradient_check", lambda: _check_gradients(cfg.seeds[0]), 5),
        ("oracle_vs_dp", lambda: _check_oracle(cfg), OracleInfeasibleError.exit_code),
    ]
    rows = []
    code = EXIT_OK
    for name, run, fail_code in checks:
        passed, detail = run()
        logger.info("%s: %s (%s)", name, "pass" if passed else "FAIL", detail)
        rows.append({"check": name, "passed": passed, "detail": detail})
        if not passed:
            code = max(code, fail_code)
    frame = pd.DataFrame(rows)
    rec.add(*write_frame(frame, rec.path("validation.csv")))
    _print_frame(frame)
    rec.finish(code)
    return code


def cmd_report(args: argparse.Namespace) -> int:
    """Re-aggregate persisted episode logs into a metrics report without rerunning policies."""
    src = Path(args.source)
    index_path = src / "episodes" / "index.csv"
    if not index_path.is_file():
        raise CheckpointError(f"{src} holds no episode index ({index_path} missing)")
    index = pd.read_csv(index_path, keep_default_na=False)
    oracle_path = src / "oracle.csv"
    lookup: dict[tuple[str, int], float] = {}
    if oracle_path.is_file():
        for r in pd.read_csv(oracle_path).itertuples():
            lookup[(str(r.topology_id), int(r.day))] = float(r.saved_cost)

    def read(row: Any) -> EpisodeLog:
        return EpisodeLog.read_csv(src / row.path, topology_id=row.topology_id, day=int(row.day))

    baseline = {
        (r.topology_id, int(r.day)): read(r) for r in index.itertuples() if r.policy == "zero"
    }
    reports: list[MetricsReport] = []
    for (policy, topology_id, case_id), group in index.groupby(
        ["policy", "topology_id", "case_id"], sort=False
    ):
        logs = [read(r) for r in group.itertuples()]
        try:
            base_logs = [baseline[(topology_id, int(d))] for d in group["day"]]
        except KeyError as exc:
            raise DimensionMismatchError(f"no no-control log for {topology_id} day {exc}") from exc
        keys = [(topology_id, int(d)) for d in group["day"]]
        oracle_saved = [lookup[k] for k in keys] if all(k in lookup for k in keys) else None
        reports.append(
            metrics_from_logs(
                logs,
                base_logs,
                oracle_saved,
                policy=str(policy),
                topology_id=str(topology_id),
                case_id=str(case_id),
            )
        )
    variants = dict(zip(index["policy"], index["variant"]))
    ref = next((r for r in reports if variants.get(r.policy) == "nn"), None)
    if ref is not None:
        reports = [with_reference(r, ref.saved_cost_usd) for r in reports]
    frame = reports_frame(reports)
    rec = RunRecorder(Path(args.out) if args.out else src / "report", "report", None)
    rec.add(*write_frame(frame, rec.path("report.csv"), rec.path("report.json")))
    _print_frame(frame)
    logger.info("report for %d policies written to %s", len(reports), rec.root)
    rec.finish(EXIT_OK)
    return EXIT_OK


# Argument parsing


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="Experiment YAML file (defaults apply when omitted)")
    parser.add_argument("--seed", type=int, default=None, help="Run a single seed instead of the config's list")
    parser.add_argument("--out", default=None, help="Output root directory")
    parser.add_argument("--topology", default=None, help="Reconfiguration case id, e.g. TP3")
    parser.add_argument(
        "--variant",
        default=None,
        help=f"Encoder variant ({', '.join(VARIANTS)})",
    )
    parser.add_argument("--log-level", default=None, help="Logging level (default: $LOGLEVEL or INFO)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="topodispatch", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="Train TD3 for every configured seed")
    _common(p)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("evaluate", help="Deterministic rollouts and metrics for checkpoints or built-ins")
    _common(p)
    p.add_argument(
        "--policy",
        "--checkpoint",
        action="append",
        dest="policy",
        help="Checkpoint directory, 'zero' or 'random[:seed]' (repeatable)",
    )
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser("oracle", help="Solve the horizon oracle over the evaluation days")
    _common(p)
    p.add_argument("--export-instance", action="store_true", help="Also write each instance as JSON")
    p.add_argument("--validate", action="store_true", help="Compare against exhaustive search on tiny instances")
    p.set_defaults(handler=cmd_oracle)

    p = sub.add_parser("suite", help="Reconfiguration and cross-network transfer suite")
    _common(p)
    p.add_argument("--policy", "--checkpoint", action="append", dest="policy")
    p.set_defaults(handler=cmd_suite)

    p = sub.add_parser("validate", help="Power-flow, gradient and oracle self-checks")
    _common(p)
    p.set_defaults(handler=cmd_validate)

    p = sub.add_parser("report", help="Re-aggregate an evaluate run's episode logs")
    p.add_argument("source", help="Directory written by 'evaluate'")
    p.add_argument("--out", default=None)
    p.add_argument("--log-level", default=None)
    p.set_defaults(handler=cmd_report)
    return parser


def configure_logging(level: str | None) -> None:
    name = (level or os.environ.get("LOGLEVEL") or "INFO").upper()
    logging.basicConfig(
        level=getattr(logging, name, logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    try:
        return int(args.handler(args))
    except TopoDispatchError as exc:
        logger.error("%s", exc)
        for note in getattr(exc, "__notes__", ()):
            logger.error("  %s", note)
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
