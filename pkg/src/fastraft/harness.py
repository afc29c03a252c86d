"""Experiment harness: workloads, safety audits, sweeps, and fuzzing.

Every entry point is deterministic in its seed.  Latency is measured at
the leader: a command's commit time is the first moment any leader
promoted its entry, which is where the protocols differ and what a
linearizable client would observe.
"""

from __future__ import annotations

import hashlib
import json
import logging
import statistics
from dataclasses import dataclass, field
from pathlib import Path

from .core import ClusterConfig, LogEntry, classic_quorum_size
from .node import CLIENT, Role
from .sim import (
    CrashPlan,
    FixedDelay,
    Injection,
    Partition,
    SimConfig,
    Simulation,
    UniformDelay,
    rng_stream,
)

log = logging.getLogger("fastraft.harness")

# The sweep models a WAN-ish deployment: one-way delays high enough that
# the fast track's saved hop is visible over timer noise.
SWEEP_DELAY = UniformDelay(5.0, 15.0)
DEFAULT_LOSS_GRID = (0.0, 1.0, 2.0, 4.0, 6.0, 8.0)
CSV_HEADER = "loss,protocol,mean_ms,p50_ms,p99_ms,failure_rate,fast_share"


def stable_seed(*parts) -> int:
    digest = hashlib.sha256("/".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "big")


# ----------------------------------------------------------------------
# workloads


@dataclass(frozen=True, slots=True)
class WorkloadSpec:
    """Client traffic shape for one run.

    ``burst`` injects ``burst_count`` commands ``burst_spacing`` apart,
    with ``burst_interval`` between burst starts; ``uniform`` spaces
    commands evenly at ``rate_per_second``.  Targets: ``fixed`` sends
    everything to ``fixed_target`` (default: the first non-leader, the
    interesting case for the fast track), ``round-robin`` cycles the
    membership, ``random`` draws from the workload stream.
    """

    total_commands: int = 10
    pattern: str = "burst"
    burst_count: int = 10
    burst_interval: float = 100.0
    burst_spacing: float = 1.0
    rate_per_second: float = 100.0
    target_selection: str = "fixed"
    fixed_target: int | None = None
    command_size: int = 16

    def offsets(self) -> list[float]:
        if self.pattern == "burst":
            return [
                (i // self.burst_count) * self.burst_interval
                + (i % self.burst_count) * self.burst_spacing
                for i in range(self.total_commands)
            ]
        if self.pattern == "uniform":
            gap = 1000.0 / self.rate_per_second
            return [i * gap for i in range(self.total_commands)]
        raise ValueError(f"unknown workload pattern {self.pattern!r}")


def _build_commands(spec: WorkloadSpec, seed: int) -> list[tuple[str, bytes]]:
    rng = rng_stream(seed, "workload")
    commands = []
    for i in range(spec.total_commands):
        request_id = f"c{i:05d}"
        head = request_id.encode()
        pad = max(0, spec.command_size - len(head))
        commands.append((request_id, head + rng.randbytes(pad)))
    return commands


# ----------------------------------------------------------------------
# metrics


@dataclass(slots=True)
class CommandOutcome:
    request_id: str
    inject_time: float
    commit_time: float | None
    committed_index: int | None
    track: str | None
    failed: bool

    @property
    def latency(self) -> float | None:
        if self.commit_time is None:
            return None
        return self.commit_time - self.inject_time


@dataclass(slots=True)
class RunMetrics:
    outcomes: list[CommandOutcome]
    message_counts: dict[str, int]
    failure_count: int

    def latencies(self) -> list[float]:
        return [o.latency for o in self.outcomes if o.latency is not None]

    def committed_count(self) -> int:
        return sum(1 for o in self.outcomes if o.commit_time is not None)

    def mean_latency(self) -> float:
        return statistics.fmean(self.latencies())

    def p50(self) -> float:
        return statistics.median(self.latencies())

    def p99(self) -> float:
        lats = sorted(self.latencies())
        return lats[max(0, -(-99 * len(lats) // 100) - 1)]

    def fast_share(self) -> float:
        committed = [o for o in self.outcomes if o.commit_time is not None]
        if not committed:
            return 0.0
        return sum(1 for o in committed if o.track == "fast") / len(committed)


def build_metrics(sim: Simulation) -> RunMetrics:
    sim.finish()
    failures = {
        out.reply.request_id
        for out in sim.client_replies
        if out.reply.failure is not None
    }
    # First leader-side promotion per slot is the commit moment.
    first_commit: dict[tuple[int, tuple], tuple[float, str]] = {}
    by_command: dict[bytes, tuple[float, int, str]] = {}
    for node_id, record in sim.commit_records:
        key = (record.index, record.entry.key())
        if record.as_leader and (key not in first_commit or record.time < first_commit[key][0]):
            first_commit[key] = (record.time, record.track)
    for node_id, record in sim.commit_records:
        command = record.entry.command
        if not command:
            continue
        key = (record.index, record.entry.key())
        when, track = first_commit.get(key, (record.time, record.track))
        seen = by_command.get(command)
        if seen is None or when < seen[0]:
            by_command[command] = (when, record.index, track)
    outcomes = []
    for injection in sim.injections:
        hit = by_command.get(injection.command)
        failed = injection.request_id in failures
        if hit is None:
            outcomes.append(
                CommandOutcome(injection.request_id, injection.time, None, None, None, failed)
            )
        else:
            when, index, track = hit
            outcomes.append(
                CommandOutcome(injection.request_id, injection.time, when, index, track, failed)
            )
    failure_count = sum(1 for o in outcomes if o.commit_time is None)
    return RunMetrics(outcomes, dict(sim.message_counts), failure_count)


# ----------------------------------------------------------------------
# running workloads


def default_cluster(members: int) -> ClusterConfig:
    return ClusterConfig(tuple(range(members)))


def run_workload(
    protocol: str,
    members: int,
    spec: WorkloadSpec,
    sim_config: SimConfig,
    *,
    cluster: ClusterConfig | None = None,
    record_trace: bool = False,
    persistence: bool = True,
    warmup_cap: float = 5000.0,
    drain_cap: float = 30000.0,
) -> tuple[RunMetrics, Simulation]:
    """Elect a leader, replay the workload, drain, and measure."""
    cluster = cluster if cluster is not None else default_cluster(members)
    sim = Simulation(
        sim_config, cluster, protocol, record_trace=record_trace, persistence=persistence
    )
    sim.run(warmup_cap, stop_when=lambda s: s.current_leader() is not None)
    leader = sim.current_leader()
    commands = _build_commands(spec, sim_config.seed)
    targets = _pick_targets(spec, cluster, leader, sim_config.seed)
    start = sim.now + 100.0
    offsets = spec.offsets()
    for (request_id, command), target, offset in zip(commands, targets, offsets):
        sim.inject(start + offset, target, command, request_id)
    horizon = start + (offsets[-1] if offsets else 0.0)
    deadline = horizon + drain_cap
    step = horizon + 500.0
    while True:
        sim.run(min(step, deadline))
        if _workload_resolved(sim, commands) or sim.now >= deadline:
            break
        step += 500.0
    sim.finish()
    return build_metrics(sim), sim


def _pick_targets(
    spec: WorkloadSpec, cluster: ClusterConfig, leader: int | None, seed: int
) -> list[int]:
    members = list(cluster.members)
    if spec.target_selection == "fixed":
        if spec.fixed_target is not None:
            target = spec.fixed_target
        else:
            others = [m for m in members if m != leader]
            target = others[0] if others else members[0]
        return [target] * spec.total_commands
    if spec.target_selection == "round-robin":
        return [members[i % len(members)] for i in range(spec.total_commands)]
    if spec.target_selection == "random":
        rng = rng_stream(seed, "targets")
        return [rng.choice(members) for _ in range(spec.total_commands)]
    raise ValueError(f"unknown target selection {spec.target_selection!r}")


def _workload_resolved(sim: Simulation, commands: list[tuple[str, bytes]]) -> bool:
    failed = {
        out.reply.request_id for out in sim.client_replies if out.reply.failure is not None
    }
    committed: set[bytes] = set()
    for _, record in sim.commit_records:
        committed.add(record.entry.command)
    for node in sim.nodes.values():
        for record in node.commit_journal:
            committed.add(record.entry.command)
    for request_id, command in commands:
        if request_id in failed or request_id in sim.dead_injections:
            continue
        if command not in committed:
            return False
    return True


# ----------------------------------------------------------------------
# audits


@dataclass(slots=True)
class AuditReport:
    problems: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.problems

    def merged_with(self, other: AuditReport) -> AuditReport:
        return AuditReport(self.problems + other.problems)

    def summary(self) -> str:
        if self.ok:
            return "audit: ok"
        lines = [f"audit: {len(self.problems)} problem(s)"]
        lines += [f"  - {p}" for p in self.problems]
        return "\n".join(lines)


def compare_logs(sim: Simulation) -> AuditReport:
    """Committed prefixes must agree pairwise on the decided values.

    Terms are left out of the comparison: a recovery may restamp an
    adopted entry, so stamps can lag on a node that was away while the
    value itself is identical everywhere.
    """
    problems: list[str] = []
    prefixes = {
        node_id: [
            f"{e.index}|{e.command.hex()}|{e.proposer}" for e in node.committed_prefix()
        ]
        for node_id, node in sorted(sim.nodes.items())
    }
    ids = sorted(prefixes)
    for pos, a in enumerate(ids):
        for b in ids[pos + 1 :]:
            for i, (ea, eb) in enumerate(zip(prefixes[a], prefixes[b])):
                if ea != eb:
                    problems.append(
                        f"committed prefix divergence between {a} and {b} at index {i + 1}: "
                        f"{ea} vs {eb}"
                    )
                    break
    return AuditReport(problems)


def audit_safety(sim: Simulation) -> AuditReport:
    sim.finish()
    problems: list[str] = []
    for node_id, reason in sim.halts:
        problems.append(f"node {node_id} halted: {reason}")

    leaders_by_term: dict[int, set[int]] = {}
    for node_id, term, _ in sim.election_records:
        leaders_by_term.setdefault(term, set()).add(node_id)
    for term, winners in sorted(leaders_by_term.items()):
        if len(winners) > 1:
            problems.append(f"election safety: term {term} won by {sorted(winners)}")

    committed_by_index: dict[int, set[tuple]] = {}
    for node_id, record in sim.commit_records:
        value = (record.index, record.entry.command, record.entry.proposer)
        committed_by_index.setdefault(record.index, set()).add(value)
    for index, values in sorted(committed_by_index.items()):
        if len(values) > 1:
            problems.append(f"commit agreement: index {index} committed as {sorted(values)}")

    commits_by_command: dict[bytes, set[int]] = {}
    for node_id, record in sim.commit_records:
        if record.entry.command:
            commits_by_command.setdefault(record.entry.command, set()).add(record.index)
    for command, indexes in commits_by_command.items():
        if len(indexes) > 1:
            problems.append(
                f"exactly-once: command {command[:12].hex()} committed at {sorted(indexes)}"
            )

    nodes = sorted(sim.nodes.items())
    for pos, (a, node_a) in enumerate(nodes):
        for b, node_b in nodes[pos + 1 :]:
            for index in node_a.log.keys() & node_b.log.keys():
                ea, eb = node_a.log[index], node_b.log[index]
                if "TENTATIVE" in (ea.status.name, eb.status.name):
                    continue
                if ea.term == eb.term and ea.key() != eb.key():
                    problems.append(
                        f"log matching: nodes {a}/{b} disagree at index {index} term {ea.term}"
                    )

    return AuditReport(problems).merged_with(compare_logs(sim))


def audit_liveness(sim: Simulation, metrics: RunMetrics) -> AuditReport:
    """No command may vanish: commit, failure reply, or a crash excuse."""
    problems: list[str] = []
    crash_times: dict[int, float] = {}
    for crash in sim.sim_config.crashes:
        crash_times[crash.node] = min(crash.at, crash_times.get(crash.node, crash.at))
    origin = {i.request_id: i for i in sim.injections}
    for outcome in metrics.outcomes:
        if outcome.commit_time is not None or outcome.failed:
            continue
        injection = origin[outcome.request_id]
        if outcome.request_id in sim.dead_injections:
            continue
        if injection.node in crash_times and crash_times[injection.node] >= injection.time:
            # The origin crashed while holding the request; its retry
            # state was volatile, so silence is expected.
            continue
        problems.append(f"command {outcome.request_id} neither committed nor failed")
    return AuditReport(problems)


# ----------------------------------------------------------------------
# message-round measurement


def measure_commit_rounds(protocol: str, *, delay: float = 5.0, seed: int = 7) -> float:
    """One-way delays between a non-leader submission and leader commit."""
    spec = WorkloadSpec(total_commands=1, pattern="burst", target_selection="fixed")
    sim_config = SimConfig(seed=seed, loss_probability=0.0, delay=FixedDelay(delay))
    metrics, sim = run_workload(protocol, 3, spec, sim_config)
    outcome = metrics.outcomes[0]
    if outcome.commit_time is None:
        raise RuntimeError("measurement command did not commit")
    return (outcome.commit_time - outcome.inject_time) / delay


# ----------------------------------------------------------------------
# latency sweep


@dataclass(frozen=True, slots=True)
class SweepRow:
    loss_percent: float
    protocol: str
    mean_ms: float
    p50_ms: float
    p99_ms: float
    failure_rate: float
    fast_share: float

    def csv_line(self) -> str:
        return (
            f"{self.loss_percent:g},{self.protocol},{self.mean_ms:.3f},"
            f"{self.p50_ms:.3f},{self.p99_ms:.3f},{self.failure_rate:.4f},"
            f"{self.fast_share:.4f}"
        )


@dataclass(slots=True)
class SweepResult:
    rows: list[SweepRow]
    # per (loss, protocol): one mean latency per seed, paired across
    # protocols by construction, for bootstrap comparisons
    seed_means: dict[tuple[float, str], list[float]]
    audit: AuditReport

    def csv_text(self) -> str:
        return "\n".join([CSV_HEADER] + [row.csv_line() for row in self.rows]) + "\n"


def latency_sweep(
    *,
    protocols: tuple[str, ...] = ("raft", "fastraft"),
    loss_grid: tuple[float, ...] = DEFAULT_LOSS_GRID,
    members: int = 3,
    seeds: int = 30,
    commands: int = 200,
    base_seed: int = 2024,
    audit_each: bool = True,
) -> SweepResult:
    spec = WorkloadSpec(
        total_commands=commands,
        pattern="burst",
        burst_count=10,
        burst_interval=100.0,
        burst_spacing=1.0,
        target_selection="fixed",
    )
    rows: list[SweepRow] = []
    seed_means: dict[tuple[float, str], list[float]] = {}
    audit = AuditReport()
    for loss in loss_grid:
        for protocol in protocols:
            pooled: list[float] = []
            means: list[float] = []
            failures = 0
            total = 0
            share_sum = 0.0
            for i in range(seeds):
                seed = stable_seed(base_seed, loss, i)
                sim_config = SimConfig(
                    seed=seed, loss_probability=loss / 100.0, delay=SWEEP_DELAY
                )
                metrics, sim = run_workload(protocol, members, spec, sim_config)
                if audit_each:
                    audit = audit.merged_with(audit_safety(sim))
                    audit = audit.merged_with(audit_liveness(sim, metrics))
                lats = metrics.latencies()
                pooled += lats
                means.append(statistics.fmean(lats) if lats else 0.0)
                failures += metrics.failure_count
                total += spec.total_commands
                share_sum += metrics.fast_share()
            pooled.sort()
            rows.append(
                SweepRow(
                    loss,
                    protocol,
                    statistics.fmean(pooled),
                    statistics.median(pooled),
                    pooled[max(0, -(-99 * len(pooled) // 100) - 1)],
                    failures / total,
                    share_sum / seeds,
                )
            )
            seed_means[(loss, protocol)] = means
            log.info("sweep point loss=%g%% protocol=%s done", loss, protocol)
    return SweepResult(rows, seed_means, audit)


def bootstrap_ci(deltas: list[float], *, iterations: int = 2000, seed: int = 99) -> tuple[float, float]:
    """Percentile bootstrap CI for the mean of paired differences."""
    rng = rng_stream(seed, "bootstrap")
    n = len(deltas)
    means = sorted(
        statistics.fmean(rng.choices(deltas, k=n)) for _ in range(iterations)
    )
    lo = means[int(0.025 * iterations)]
    hi = means[int(0.975 * iterations) - 1]
    return lo, hi


# ----------------------------------------------------------------------
# fuzzing


@dataclass(slots=True)
class FuzzOutcome:
    seed: int
    protocol: str
    members: int
    problems: list[str]

    @property
    def ok(self) -> bool:
        return not self.problems


FUZZ_HORIZON = 6000.0


def fuzz_plan(seed: int, members: int) -> tuple[SimConfig, list[tuple[float, int]], bool]:
    """Derive a fault schedule and injection plan entirely from the seed."""
    rng = rng_stream(seed, "fuzz-schedule")
    ids = list(range(members))
    loss = rng.uniform(0.0, 0.2)
    partitions: list[Partition] = []
    if rng.random() < 0.5:
        start = rng.uniform(500.0, 2500.0)
        duration = rng.uniform(300.0, 1500.0)
        side_size = rng.randrange(1, members)
        side = frozenset(rng.sample(ids, side_size))
        partitions.append(
            Partition(start, start + duration, side, frozenset(ids) - side)
        )
    crashes: list[CrashPlan] = []
    for node in rng.sample(ids, rng.randrange(0, 3)):
        at = rng.uniform(500.0, 3500.0)
        restart = at + rng.uniform(200.0, 1200.0) if rng.random() < 0.85 else None
        crashes.append(CrashPlan(node, at, restart))
    config = SimConfig(
        seed=seed,
        loss_probability=loss,
        partitions=tuple(partitions),
        crashes=tuple(crashes),
    )
    plan = sorted(
        (rng.uniform(600.0, 3800.0), rng.choice(ids))
        for _ in range(rng.randrange(4, 8))
    )
    dead = {c.node for c in crashes if c.restart_at is None}
    settles = [c.restart_at for c in crashes if c.restart_at is not None]
    gentle = (
        members - len(dead) >= classic_quorum_size(members)
        and all(p.end <= FUZZ_HORIZON - 2000.0 for p in partitions)
        and all(t <= FUZZ_HORIZON - 2000.0 for t in settles)
    )
    return config, plan, gentle


def fuzz_one(
    seed: int, protocol: str, members: int, *, record_trace: bool = False
) -> tuple[FuzzOutcome, Simulation]:
    config, plan, gentle = fuzz_plan(seed, members)
    cluster = default_cluster(members)
    sim = Simulation(config, cluster, protocol, record_trace=record_trace)
    for i, (at, target) in enumerate(plan):
        request_id = f"f{seed}-{i}"
        command = request_id.encode()
        sim.inject(at, target, command, request_id)
    sim.run(FUZZ_HORIZON)
    if gentle:
        # Give retries room before judging liveness; cheap when healthy.
        commands = [(f"f{seed}-{i}", f"f{seed}-{i}".encode()) for i in range(len(plan))]
        while not _workload_resolved(sim, commands) and sim.now < FUZZ_HORIZON + 8000.0:
            sim.run(sim.now + 1000.0)
    sim.finish()
    metrics = build_metrics(sim)
    report = audit_safety(sim)
    if gentle:
        report = report.merged_with(audit_liveness(sim, metrics))
    return FuzzOutcome(seed, protocol, members, report.problems), sim


def fuzz_combo(seed: int) -> tuple[str, int]:
    protocol = "fastraft" if seed % 2 == 0 else "raft"
    members = 3 if (seed // 2) % 2 == 0 else 5
    return protocol, members


def fuzz_campaign(
    count: int,
    *,
    base_seed: int = 0,
    report_dir: str | None = None,
    protocol: str | None = None,
    members: int | None = None,
) -> list[FuzzOutcome]:
    failures: list[FuzzOutcome] = []
    for i in range(count):
        seed = base_seed + i
        combo_protocol, combo_members = fuzz_combo(seed)
        run_protocol = protocol if protocol is not None else combo_protocol
        run_members = members if members is not None else combo_members
        outcome, _ = fuzz_one(seed, run_protocol, run_members)
        if not outcome.ok:
            failures.append(outcome)
            if report_dir is not None:
                write_reproducer(outcome, report_dir)
        if (i + 1) % 1000 == 0:
            log.info("fuzz progress: %d/%d, %d failure(s)", i + 1, count, len(failures))
    return failures


def write_reproducer(outcome: FuzzOutcome, report_dir: str) -> Path:
    """Re-run the failing seed with tracing and pin the trace hash."""
    _, sim = fuzz_one(
        outcome.seed, outcome.protocol, outcome.members, record_trace=True
    )
    payload = {
        "seed": outcome.seed,
        "protocol": outcome.protocol,
        "members": outcome.members,
        "problems": outcome.problems,
        "trace_sha256": sim.trace_hash(),
    }
    directory = Path(report_dir)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / f"repro-{outcome.protocol}-{outcome.seed}.json"
    path.write_text(json.dumps(payload, indent=2) + "\n")
    return path


def check_reproducer(path: str) -> tuple[bool, str]:
    """Replay a reproducer and confirm the identical failing trace."""
    payload = json.loads(Path(path).read_text())
    outcome, sim = fuzz_one(
        payload["seed"], payload["protocol"], payload["members"], record_trace=True
    )
    if sim.trace_hash() != payload["trace_sha256"]:
        return False, "trace hash mismatch: run is not reproducible"
    if outcome.problems != payload["problems"]:
        return False, f"problem set changed: {outcome.problems}"
    return True, f"reproduced {len(outcome.problems)} problem(s) with identical trace"
