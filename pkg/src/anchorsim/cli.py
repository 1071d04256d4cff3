"""Command line entry point: ``anchorsim bench|audit|anchor|serve``."""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import yaml

from . import faults
from .bench import ConfigInvalid, ExperimentConfig, load_run, run_experiment, save_run, summarize
from .chain import InvalidConfig
from .merkle import LeafRecord
from .platform import build_platform, load_config


def _read_yaml(path: str | None) -> dict:
    if path is None:
        return {}
    data = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(data, dict):
        raise click.BadParameter("config root must be a mapping")
    return data


@click.group()
def main() -> None:
    """Multi-tenant anchoring simulator."""


# -- bench ------------------------------------------------------------------


@main.group()
def bench() -> None:
    """Throughput experiments (Tests 1-4)."""


@bench.command("run")
@click.option("--test", "test_id", type=click.IntRange(1, 4), required=True)
@click.option("--scale", type=click.Choice(["desk", "paper"]), default="desk", show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(file_okay=False), default=None, help="directory for CSV/JSON output")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="YAML overrides: platform keys plus an optional 'experiment' section")
@click.option("--json", "as_json", is_flag=True, help="print the summary as JSON")
def bench_run(test_id: int, scale: str, seed: int, out: str | None, config_path: str | None, as_json: bool) -> None:
    """Run one test and print its summary."""
    overrides = _read_yaml(config_path)
    experiment = overrides.pop("experiment", {}) or {}
    try:
        cfg = ExperimentConfig.for_test(test_id, scale, seed, overrides=overrides, **experiment)
        series = run_experiment(cfg)
    except (ConfigInvalid, InvalidConfig, TypeError) as exc:
        raise click.ClickException(f"invalid config: {exc}") from exc
    summary = summarize(series)
    if out:
        for p in save_run(series, out):
            click.echo(f"wrote {p}", err=True)
    click.echo(json.dumps(summary.to_dict(), indent=2) if as_json else "\n".join(summary.lines()))


@bench.command("summarize")
@click.argument("run_dir", type=click.Path(exists=True))
@click.option("--json", "as_json", is_flag=True)
def bench_summarize(run_dir: str, as_json: bool) -> None:
    """Summarize a saved run (directory written by ``bench run --out``)."""
    summary = summarize(load_run(run_dir))
    click.echo(json.dumps(summary.to_dict(), indent=2) if as_json else "\n".join(summary.lines()))


# -- audit --------------------------------------------------------------------


def _demo_platform(config_path: str | None, tenants: int, preset: str):
    raw = _read_yaml(config_path)
    if "tenants" not in raw:
        raw["tenants"] = [f"tenant-{i}" for i in range(tenants)]
    cfg = load_config(raw, preset=preset)
    return build_platform(cfg, start_anchoring=False)


def _write_some(platform, batches: int = 5, tag: str = "0") -> None:
    gw = platform.gateway
    token = next(c["token"] for c in platform.config["credentials"] if c["role"] == "platform-writer")
    for name in platform.tenants:
        for b in range(batches):
            gw.create_unique_ids(token, name, [f"{name}-{tag}-{b}-{i}".encode() for i in range(gw.max_batch)])


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--tenants", type=int, default=3, show_default=True)
@click.option("--rounds", type=int, default=3, show_default=True)
@click.option("--preset", type=click.Choice(["desk", "paper"]), default="desk", show_default=True)
@click.option("--tamper", type=click.Choice(["none", "state", "tree", "root"]), default="none", show_default=True,
              help="inject a fault before the final audit")
@click.option("--json", "as_json", is_flag=True)
def audit(config_path, tenants, rounds, preset, tamper, as_json) -> None:
    """Simulate anchoring rounds, then audit every tenant. Exits 1 on any Fail."""
    platform = _demo_platform(config_path, tenants, preset)
    engine = platform.engine
    for r in range(rounds):
        _write_some(platform, tag=str(r))
        if tamper == "root" and r == rounds - 1:
            faults.fabricate_public_root(engine, b"\xee" * 32)
        engine.run_once()
    first = next(iter(platform.tenants))
    latest = engine.latest_anchor()
    if tamper == "state" and latest is not None:
        leaf = engine.tree.get(platform.node(first).chain_id)
        faults.tamper_tenant_state(platform.node(first).chain, LeafRecord.decode(leaf).block_number)
    elif tamper == "tree" and latest is not None:
        faults.tamper_stored_tree(platform.node(first).chain, latest.round_id)
    reports = []
    for name in platform.tenants:
        reports.append(platform.auditor(name).audit())
    if as_json:
        click.echo(json.dumps([r.to_dict() for r in reports], indent=2))
    else:
        for r in reports:
            click.echo(r.summary())
    if not all(r.passed for r in reports):
        sys.exit(1)


# -- anchor -------------------------------------------------------------------


@main.group()
def anchor() -> None:
    """Anchoring engine operations."""


@anchor.command("run-once")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--tenants", type=int, default=3, show_default=True)
@click.option("--preset", type=click.Choice(["desk", "paper"]), default="desk", show_default=True)
def anchor_run_once(config_path, tenants, preset) -> None:
    """Run a single anchoring round and print its report as JSON."""
    platform = _demo_platform(config_path, tenants, preset)
    _write_some(platform, batches=1)
    report = platform.engine.run_once()
    click.echo(json.dumps(report.to_dict(), indent=2))
    if report.outcome.value != "success":
        sys.exit(1)


# -- serve --------------------------------------------------------------------


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--preset", type=click.Choice(["desk", "paper"]), default="desk", show_default=True)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8000, show_default=True)
@click.option("--speed", type=float, default=1.0, show_default=True, help="virtual seconds per wall second")
def serve(config_path, preset, host, port, speed) -> None:
    """Start the gateway HTTP API over a wall-clock paced simulation."""
    import uvicorn

    from .http import create_app
    from .sim import Pacer

    platform = build_platform(load_config(config_path, preset=preset))
    pacer = Pacer(platform.env, speed=speed)
    pacer.start()
    try:
        uvicorn.run(create_app(platform, pacer.lock), host=host, port=port)
    finally:
        pacer.stop()


if __name__ == "__main__":
    main()
