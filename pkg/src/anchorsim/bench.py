"""
Experiment harness: load generation, throughput metrics, CSV export.

A run builds a platform, drives batch registrations through the gateway
according to a load profile, lets the anchoring scheduler run alongside, and
records per-minute sent/included/error counts for every tenant. After the
load stops the run continues until every tenant's backlog has drained (or
``max_duration`` is reached).
"""

from __future__ import annotations

import csv
import json
import math
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .anchor import Outcome
from .chain import Block, ChainError
from .gateway import GatewayError
from .platform import Platform, build_platform, load_config, merge

CSV_HEADER = ["minute", "sent_tps", "included_tps", "errors"]
TENANT_NAMES = ("alpha", "beta", "gamma", "delta", "epsilon", "zeta", "eta", "theta", "iota", "kappa")
PAPER_CAP_TPS = 15.2
PAPER_LOAD_END = 59 * 60.0
PAPER_RUN = 60 * 60.0
DESK_RUN = 10 * 60.0


class ConfigInvalid(ValueError):
    pass


@dataclass(frozen=True)
class LoadSegment:
    start: float
    end: float
    rate_start: float
    rate_end: float

    def rate(self, t: float) -> float:
        frac = (t - self.start) / (self.end - self.start)
        return self.rate_start + frac * (self.rate_end - self.rate_start)

    def integral(self, a: float, b: float) -> float:
        a, b = max(a, self.start), min(b, self.end)
        if b <= a:
            return 0.0
        return (b - a) * (self.rate(a) + self.rate(b)) / 2


@dataclass(frozen=True)
class LoadProfile:
    """Target transactions per second over time, piecewise linear."""

    segments: tuple[LoadSegment, ...] = ()

    @classmethod
    def constant(cls, rate: float, end: float, start: float = 0.0) -> LoadProfile:
        return cls((LoadSegment(start, end, rate, rate),))

    @classmethod
    def ramp(cls, rate_start: float, rate_end: float, end: float, start: float = 0.0) -> LoadProfile:
        return cls((LoadSegment(start, end, rate_start, rate_end),))

    @property
    def end(self) -> float:
        return max((s.end for s in self.segments), default=0.0)

    def rate(self, t: float) -> float:
        return sum(s.rate(t) for s in self.segments if s.start <= t < s.end)

    def expected(self, a: float, b: float) -> float:
        return sum(s.integral(a, b) for s in self.segments)

    def scaled(self, rate_factor: float = 1.0, time_factor: float = 1.0) -> LoadProfile:
        return LoadProfile(tuple(
            LoadSegment(s.start * time_factor, s.end * time_factor, s.rate_start * rate_factor, s.rate_end * rate_factor)
            for s in self.segments
        ))

    def truncated(self, end: float) -> LoadProfile:
        return LoadProfile(tuple(
            LoadSegment(s.start, min(s.end, end), s.rate_start, s.rate(min(s.end, end)))
            for s in self.segments if s.start < end
        ))

    def validate(self) -> None:
        for s in self.segments:
            if s.end <= s.start or s.start < 0:
                raise ConfigInvalid(f"bad segment bounds {s}")
            if s.rate_start < 0 or s.rate_end < 0:
                raise ConfigInvalid("load rates must be non-negative")

    def to_list(self) -> list[dict]:
        return [asdict(s) for s in self.segments]

    @classmethod
    def from_list(cls, items: list[dict]) -> LoadProfile:
        return cls(tuple(LoadSegment(**d) for d in items))


# paper-scale profiles; load runs from minute 0 to 59
TEST_PROFILES: dict[int, LoadProfile] = {
    1: LoadProfile.constant(12.0, PAPER_LOAD_END),
    2: LoadProfile.ramp(18.0, PAPER_CAP_TPS, PAPER_LOAD_END),
    3: LoadProfile.ramp(18.0, 25.0, PAPER_LOAD_END),
    4: LoadProfile.ramp(18.0, 25.0, PAPER_LOAD_END),
}
TEST_TENANTS = {1: 1, 2: 1, 3: 1, 4: 3}


def arrival_times(profile: LoadProfile, rng: np.random.Generator, *, jitter: bool = True) -> np.ndarray:
    """Submission instants for ``profile``.

    With jitter: a Poisson count per one-second bucket, spread uniformly in
    the bucket. Without: evenly spaced where the cumulative load crosses
    each integer.
    """
    end = profile.end
    if end <= 0:
        return np.zeros(0)
    edges = np.arange(0.0, math.ceil(end) + 1.0)
    means = np.array([profile.expected(a, b) for a, b in zip(edges[:-1], edges[1:])])
    if jitter:
        counts = rng.poisson(means)
        times = [np.sort(a + rng.random(c)) for a, c in zip(edges[:-1], counts) if c]
        out = np.concatenate(times) if times else np.zeros(0)
    else:
        cum = np.concatenate([[0.0], np.cumsum(means)])
        targets = np.arange(1, int(math.floor(cum[-1] + 1e-9)) + 1)
        out = np.interp(targets, cum, edges)
    return out[out < end]


@dataclass(frozen=True)
class ExperimentConfig:
    test_id: int | str = "custom"
    scale: str = "desk"
    tenants: tuple[str, ...] = ("alpha",)
    profile: LoadProfile = field(default_factory=LoadProfile)
    batch_size: int = 20
    max_duration: float | None = None
    drain: bool = True
    seed: int = 0
    jitter: bool = True
    overrides: dict[str, Any] = field(default_factory=dict, hash=False, compare=False)

    @classmethod
    def for_test(cls, test_id: int, scale: str = "desk", seed: int = 0, **kwargs) -> ExperimentConfig:
        if test_id not in TEST_PROFILES:
            raise ConfigInvalid(f"unknown test {test_id}")
        if scale not in ("desk", "paper"):
            raise ConfigInvalid(f"unknown scale {scale!r}")
        profile = TEST_PROFILES[test_id]
        if scale == "desk":
            desk = load_config(preset="desk")["tenant_chain"]
            profile = profile.scaled(desk_cap(desk) / PAPER_CAP_TPS, DESK_RUN / PAPER_RUN)
        kwargs.setdefault("tenants", TENANT_NAMES[: TEST_TENANTS[test_id]])
        return cls(test_id=test_id, scale=scale, profile=profile, seed=seed, **kwargs)

    def platform_config(self) -> dict:
        cfg = load_config(preset=self.scale)
        cfg = merge(cfg, self.overrides)
        cfg["tenants"] = list(self.tenants)
        return cfg

    def validate(self) -> None:
        if not self.tenants:
            raise ConfigInvalid("at least one tenant")
        if len(set(self.tenants)) != len(self.tenants):
            raise ConfigInvalid("tenant names must be unique")
        if not 1 <= self.batch_size:
            raise ConfigInvalid("batch_size must be positive")
        if self.scale not in ("desk", "paper"):
            raise ConfigInvalid(f"unknown scale {self.scale!r}")
        self.profile.validate()
        if self.max_duration is not None and self.max_duration <= 0:
            raise ConfigInvalid("max_duration must be positive")
        if self.profile.end <= 0 and not self.max_duration:
            raise ConfigInvalid("duration must be positive")

    def to_dict(self) -> dict:
        return {
            "test_id": self.test_id,
            "scale": self.scale,
            "tenants": list(self.tenants),
            "profile": self.profile.to_list(),
            "batch_size": self.batch_size,
            "max_duration": self.max_duration,
            "drain": self.drain,
            "seed": self.seed,
            "jitter": self.jitter,
            "overrides": self.overrides,
        }

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        d = dict(d)
        d["tenants"] = tuple(d.get("tenants", ("alpha",)))
        d["profile"] = LoadProfile.from_list(d.get("profile", []))
        return cls(**d)


def desk_cap(tenant_chain: dict) -> float:
    """Throughput cap in batches per second for a tenant chain section."""
    batch_gas = tenant_chain.get("gas_costs", {}).get("register_batch", 1_050_000)
    return (tenant_chain["gas_limit"] // batch_gas) / tenant_chain["inter_block_time"]


# ---------------------------------------------------------------------------
# metrics


@dataclass
class TenantSeries:
    sent: np.ndarray
    included: np.ndarray
    errors: np.ndarray
    backlog: np.ndarray
    saturated: np.ndarray
    latencies: np.ndarray
    block_counts: np.ndarray  # (timestamp, app txs) per block

    def to_dict(self) -> dict:
        return {k: v.tolist() for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> TenantSeries:
        return cls(
            sent=np.asarray(d["sent"], dtype=np.int64),
            included=np.asarray(d["included"], dtype=np.int64),
            errors=np.asarray(d["errors"], dtype=np.int64),
            backlog=np.asarray(d["backlog"], dtype=np.int64),
            saturated=np.asarray(d["saturated"], dtype=bool),
            latencies=np.asarray(d["latencies"], dtype=float),
            block_counts=np.asarray(d["block_counts"], dtype=float).reshape(-1, 2),
        )


@dataclass
class MetricsSeries:
    config: ExperimentConfig
    minutes: int
    tenants: dict[str, TenantSeries]
    rounds: list[dict]
    cap_tps: float
    end_time: float

    def total(self, attr: str) -> np.ndarray:
        return sum(getattr(t, attr) for t in self.tenants.values())

    def rows(self, tenant: str | None = None) -> list[tuple[int, float, float, int]]:
        if tenant is None:
            sent, inc, err = self.total("sent"), self.total("included"), self.total("errors")
        else:
            t = self.tenants[tenant]
            sent, inc, err = t.sent, t.included, t.errors
        return [(m, sent[m] / 60, inc[m] / 60, int(err[m])) for m in range(self.minutes)]

    @property
    def round_durations(self) -> np.ndarray:
        return np.array([r["duration"] for r in self.rounds if r["outcome"] != Outcome.SKIPPED.value])

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "minutes": self.minutes,
            "cap_tps": self.cap_tps,
            "end_time": self.end_time,
            "tenants": {k: v.to_dict() for k, v in self.tenants.items()},
            "rounds": self.rounds,
        }

    @classmethod
    def from_dict(cls, d: dict) -> MetricsSeries:
        return cls(
            config=ExperimentConfig.from_dict(d["config"]),
            minutes=d["minutes"],
            tenants={k: TenantSeries.from_dict(v) for k, v in d["tenants"].items()},
            rounds=d["rounds"],
            cap_tps=d["cap_tps"],
            end_time=d["end_time"],
        )


class _Recorder:
    """Per-tenant counters fed by block listeners and the load generator."""

    def __init__(self, platform: Platform, name: str, block_time: float):
        self.node = platform.node(name)
        self.writers = {t.writer for t in platform.gateway.triggers(name)}
        self.block_time = block_time
        self.sent: dict[int, int] = {}
        self.included: dict[int, int] = {}
        self.errors: dict[int, int] = {}
        self.blocks: dict[int, int] = {}
        self.unsaturated: set[int] = set()
        self.latencies: list[float] = []
        self.block_counts: list[tuple[float, int]] = []
        self.outstanding = 0
        self.node.block_listeners.append(self.on_block)

    @staticmethod
    def _bump(d: dict[int, int], minute: int, n: int = 1) -> None:
        d[minute] = d.get(minute, 0) + n

    def on_send(self, now: float, ok: bool) -> None:
        m = int(now // 60)
        self._bump(self.sent, m)
        if ok:
            self.outstanding += 1
        else:
            self._bump(self.errors, m)

    def on_block(self, block: Block) -> None:
        t = block.header.timestamp
        m = int(t // 60)
        count = 0
        for tx, err in zip(block.transactions, block.errors):
            if tx.sender not in self.writers:
                continue
            self.outstanding -= 1
            if err is None:
                count += 1
                self.latencies.append(t - tx.submitted_at)
            else:
                self._bump(self.errors, m)
        self._bump(self.included, m, count)
        self._bump(self.blocks, m)
        self.block_counts.append((t, count))
        if self.outstanding <= 0:
            self.unsaturated.add(m)

    def series(self, minutes: int) -> TenantSeries:
        def arr(d):
            return np.array([d.get(m, 0) for m in range(minutes)], dtype=np.int64)

        sent, inc, err = arr(self.sent), arr(self.included), arr(self.errors)
        full = round(60 / self.block_time)
        saturated = np.array(
            [self.blocks.get(m, 0) == full and m not in self.unsaturated for m in range(minutes)], dtype=bool
        )
        return TenantSeries(
            sent=sent,
            included=inc,
            errors=err,
            backlog=np.cumsum(sent) - np.cumsum(inc) - np.cumsum(err),
            saturated=saturated,
            latencies=np.array(self.latencies, dtype=float),
            block_counts=np.array(self.block_counts, dtype=float).reshape(-1, 2),
        )


def _tenant_rng(seed: int, name: str) -> np.random.Generator:
    # keyed by name so a tenant's load is the same whatever else runs beside it
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def run_experiment(config: ExperimentConfig, *, setup: Callable[[Platform], None] | None = None) -> MetricsSeries:
    """Drive one experiment on a fresh virtual clock.

    ``setup`` receives the platform before the clock starts, which lets a
    caller attach observers such as continuous auditors.
    """
    config.validate()
    platform = build_platform(config.platform_config())
    if setup is not None:
        setup(platform)
    env, gateway = platform.env, platform.gateway
    tcfg = platform.config["tenant_chain"]
    token = next(c["token"] for c in platform.config["credentials"] if c["role"] == "platform-writer")

    recorders = {name: _Recorder(platform, name, float(tcfg["inter_block_time"])) for name in config.tenants}

    def load(name: str, times: np.ndarray):
        rec = recorders[name]
        prefix = name.encode() + b"-"
        for n, at in enumerate(times):
            if at > env.now:
                yield env.timeout(at - env.now)
            ids = [prefix + b"%09d-%02d" % (n, i) for i in range(config.batch_size)]
            try:
                gateway.create_unique_ids(token, name, ids)
                rec.on_send(env.now, True)
            except (GatewayError, ChainError):
                rec.on_send(env.now, False)

    for name in config.tenants:
        times = arrival_times(config.profile, _tenant_rng(config.seed, name), jitter=config.jitter)
        env.process(load(name, times))

    load_end = config.profile.end
    limit = config.max_duration if config.max_duration is not None else (load_end * 3 + 600 if config.drain else load_end)
    horizon = min(load_end, limit) if load_end > 0 else limit
    if horizon > env.now:
        env.run(until=horizon)
    step = float(tcfg["inter_block_time"])
    while config.drain and env.now < limit and any(r.outstanding > 0 for r in recorders.values()):
        env.run(until=min(env.now + step, limit))

    end = env.now
    minutes = max(1, math.ceil(end / 60 - 1e-9))
    rounds = [r.to_dict() for r in platform.engine.round_history()]
    return MetricsSeries(
        config=config,
        minutes=minutes,
        tenants={name: rec.series(minutes) for name, rec in recorders.items()},
        rounds=rounds,
        cap_tps=desk_cap(tcfg),
        end_time=end,
    )


# ---------------------------------------------------------------------------
# aggregation and export


@dataclass(frozen=True)
class Summary:
    test_id: int | str
    scale: str
    plateau_tps: float
    id_rate: float
    cap_tps: float
    total_sent: int
    total_included: int
    errors: int
    error_rate: float
    final_backlog: int
    saturated_minutes: int
    min_round: float | None
    max_round: float | None
    rounds_succeeded: int
    rounds_failed: int
    skip_count: int
    per_tenant_plateau: dict[str, float]

    def to_dict(self) -> dict:
        return asdict(self)

    def lines(self) -> list[str]:
        def r(x: float | None) -> str:
            return "n/a" if x is None else f"{x:.2f}s"

        out = [
            f"test {self.test_id} ({self.scale}): plateau {self.plateau_tps:.2f} tps "
            f"(cap {self.cap_tps:.2f}), {self.id_rate:.1f} ids/s",
            f"sent {self.total_sent}, included {self.total_included}, errors {self.errors} "
            f"({self.error_rate:.4%}), final backlog {self.final_backlog}",
            f"anchor rounds: {self.rounds_succeeded} ok, {self.rounds_failed} failed, "
            f"{self.skip_count} skipped, duration {r(self.min_round)}..{r(self.max_round)}",
        ]
        if len(self.per_tenant_plateau) > 1:
            out.append("per tenant: " + ", ".join(f"{k} {v:.2f}" for k, v in self.per_tenant_plateau.items()))
        return out


def tenant_plateau(series: TenantSeries) -> float:
    """Median included tps over saturated minutes (loaded minutes if none)."""
    inc = series.included / 60
    if series.saturated.any():
        return float(np.median(inc[series.saturated]))
    loaded = series.sent > 0
    return float(np.median(inc[loaded])) if loaded.any() else 0.0


def summarize(series: MetricsSeries) -> Summary:
    per_tenant = {k: tenant_plateau(v) for k, v in series.tenants.items()}
    plateau = float(np.median(list(per_tenant.values())))
    sent = int(series.total("sent").sum())
    included = int(series.total("included").sum())
    errors = int(series.total("errors").sum())
    durations = series.round_durations
    outcomes = [r["outcome"] for r in series.rounds]
    return Summary(
        test_id=series.config.test_id,
        scale=series.config.scale,
        plateau_tps=plateau,
        id_rate=plateau * series.config.batch_size,
        cap_tps=series.cap_tps,
        total_sent=sent,
        total_included=included,
        errors=errors,
        error_rate=errors / sent if sent else 0.0,
        final_backlog=sent - included - errors,
        saturated_minutes=int(max(v.saturated.sum() for v in series.tenants.values())),
        min_round=float(durations.min()) if len(durations) else None,
        max_round=float(durations.max()) if len(durations) else None,
        rounds_succeeded=outcomes.count(Outcome.SUCCESS.value),
        rounds_failed=outcomes.count(Outcome.FAILED.value),
        skip_count=outcomes.count(Outcome.SKIPPED.value),
        per_tenant_plateau=per_tenant,
    )


def export_csv(series: MetricsSeries, path, tenant: str | None = None) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for minute, sent, inc, err in series.rows(tenant):
            w.writerow([minute, repr(float(sent)), repr(float(inc)), err])
    return path


def parse_csv(path) -> list[tuple[int, float, float, int]]:
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != CSV_HEADER:
            raise ValueError(f"unexpected header {header}")
        return [(int(m), float(s), float(i), int(e)) for m, s, i, e in reader]


def save_run(series: MetricsSeries, out_dir) -> list[Path]:
    """Write metrics.json, throughput CSVs and anchor rounds into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = [export_csv(series, out / "throughput.csv")]
    if len(series.tenants) > 1:
        written += [export_csv(series, out / f"throughput-{t}.csv", t) for t in series.tenants]
    metrics = out / "metrics.json"
    metrics.write_text(json.dumps(series.to_dict(), sort_keys=True))
    rounds = out / "rounds.jsonl"
    rounds.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in series.rounds))
    summary = out / "summary.json"
    summary.write_text(json.dumps(summarize(series).to_dict(), sort_keys=True, indent=2) + "\n")
    return written + [metrics, rounds, summary]


def load_run(path) -> MetricsSeries:
    p = Path(path)
    if p.is_dir():
        p = p / "metrics.json"
    return MetricsSeries.from_dict(json.loads(p.read_text()))


__all__ = [
    "ConfigInvalid",
    "ExperimentConfig",
    "LoadProfile",
    "LoadSegment",
    "MetricsSeries",
    "Summary",
    "TEST_PROFILES",
    "arrival_times",
    "export_csv",
    "load_run",
    "parse_csv",
    "run_experiment",
    "save_run",
    "summarize",
]
