"""
Assembly of a full simulated deployment from a declarative config.

Config schema (YAML or a plain dict; every key optional):

    tenants: [alpha, beta, gamma]
    tenant_chain:
      inter_block_time: 5
      gas_limit: 80000000
      authorities: 3
      confirmations: 1
      gas_costs: {register_batch: 1050000, record_scan: 100000,
                  store_trie: 200000, public_anchor: 100000}
    public_chain:
      inter_block_time: 15
      confirmations: 2
    anchor:
      anchor_interval: 600
      query_timeout: 5
      query_latency: 0.2
      commit_deadline: 600
      app_max_gas_price: 10
      prioritize: true
    gateway:
      max_batch: 20
      gas_price: 10
    credentials:
      - {token: owner-secret, role: platform-writer}
      - {token: alpha-reader, role: tenant-reader, tenant: alpha}
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import simpy
import yaml

from .anchor import AnchorConfig, AnchorEngine
from .audit import Auditor
from .chain import Chain, ChainConfig, GasTable, InvalidConfig, ReadOnlyChain
from .gateway import Gateway, Role
from .sim import ChainNode

PRESETS: dict[str, dict[str, Any]] = {
    "paper": {
        "tenant_chain": {"inter_block_time": 5, "gas_limit": 80_000_000},
        "public_chain": {"inter_block_time": 15, "confirmations": 2},
        "anchor": {"anchor_interval": 600},
    },
    "desk": {
        "tenant_chain": {"inter_block_time": 1, "gas_limit": 8_000_000},
        "public_chain": {"inter_block_time": 15, "confirmations": 2},
        "anchor": {"anchor_interval": 60},
    },
}

_DEFAULTS: dict[str, Any] = {
    "tenants": ["alpha"],
    "tenant_chain": {
        "inter_block_time": 5,
        "gas_limit": 80_000_000,
        "authorities": 3,
        "confirmations": 1,
        "gas_costs": {},
    },
    "public_chain": {"inter_block_time": 15, "gas_limit": 80_000_000, "authorities": 1, "confirmations": 2},
    "anchor": {},
    "gateway": {"max_batch": 20, "gas_price": 10},
    "credentials": [{"token": "owner-secret", "role": "platform-writer"}],
}


def merge(base: dict, override: dict) -> dict:
    """Recursive dict merge; ``override`` wins."""
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(source: str | Path | dict | None = None, preset: str | None = None) -> dict:
    """Defaults, then the preset, then ``source`` (a YAML path or a dict)."""
    cfg = copy.deepcopy(_DEFAULTS)
    if preset is not None:
        if preset not in PRESETS:
            raise InvalidConfig(f"unknown preset {preset!r}")
        cfg = merge(cfg, PRESETS[preset])
    if source is not None:
        if not isinstance(source, dict):
            source = yaml.safe_load(Path(source).read_text()) or {}
        if not isinstance(source, dict):
            raise InvalidConfig("config root must be a mapping")
        cfg = merge(cfg, source)
    return cfg


def chain_config(seed: str, section: dict, *, empty_blocks: bool = False) -> ChainConfig:
    return ChainConfig.with_authorities(
        seed,
        int(section.get("authorities", 3)),
        inter_block_time=float(section["inter_block_time"]),
        gas_limit=int(section["gas_limit"]),
        confirmations_required=int(section.get("confirmations", 1)),
        gas_costs=GasTable(**section.get("gas_costs", {})),
        produce_empty_blocks=empty_blocks,
    )


def anchor_config(section: dict) -> AnchorConfig:
    known = AnchorConfig.__dataclass_fields__
    unknown = set(section) - set(known)
    if unknown:
        raise InvalidConfig(f"unknown anchor settings: {sorted(unknown)}")
    return AnchorConfig(**section)


@dataclass
class Platform:
    env: simpy.Environment
    public: ChainNode
    tenants: dict[str, ChainNode]
    engine: AnchorEngine
    gateway: Gateway
    config: dict = field(default_factory=dict)

    def node(self, tenant: str) -> ChainNode:
        return self.tenants[tenant]

    def auditor(self, tenant: str, **kwargs) -> Auditor:
        return Auditor(ReadOnlyChain(self.tenants[tenant].chain), ReadOnlyChain(self.public.chain), **kwargs)

    def run(self, until: float) -> None:
        self.env.run(until=until)


def build_platform(config: dict | None = None, *, env: simpy.Environment | None = None, start_anchoring: bool = True) -> Platform:
    cfg = config if config is not None else load_config()
    env = env or simpy.Environment()
    public = ChainNode(env, Chain(chain_config("public", cfg["public_chain"], empty_blocks=True)))
    acfg = anchor_config(cfg["anchor"])
    gw_section = cfg["gateway"]
    if int(gw_section.get("gas_price", 10)) > acfg.app_max_gas_price:
        raise InvalidConfig("gateway gas_price exceeds anchor app_max_gas_price")
    engine = AnchorEngine(env, public, acfg)
    gateway = Gateway(lambda: env.now, max_batch=int(gw_section.get("max_batch", 20)),
                      gas_price=int(gw_section.get("gas_price", 10)))
    tenants: dict[str, ChainNode] = {}
    for name in cfg["tenants"]:
        node = ChainNode(env, Chain(chain_config(f"tenant/{name}", cfg["tenant_chain"])))
        tenants[name] = node
        engine.register_node(node)
        gateway.add_tenant(name, node.chain)
    for c in cfg.get("credentials", []):
        gateway.grant(c["token"], Role(c["role"]), c.get("tenant"))
    if start_anchoring:
        engine.start()
    return Platform(env, public, tenants, engine, gateway, cfg)
