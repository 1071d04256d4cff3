"""Multi-tenant blockchain anchoring simulator."""

from .anchor import AnchorConfig, AnchorEngine, Outcome, RoundReport
from .audit import AuditReport, Auditor, audit_tenant
from .chain import Chain, ChainConfig, create_chain
from .gateway import Gateway, Role
from .merkle import MerkleMap, map_insert, map_prove, map_root, verify_proof
from .platform import Platform, build_platform, load_config

__version__ = "0.1.0"

__all__ = [
    "AnchorConfig",
    "AnchorEngine",
    "AuditReport",
    "Auditor",
    "Chain",
    "ChainConfig",
    "Gateway",
    "MerkleMap",
    "Outcome",
    "Platform",
    "Role",
    "RoundReport",
    "audit_tenant",
    "build_platform",
    "create_chain",
    "load_config",
    "map_insert",
    "map_prove",
    "map_root",
    "verify_proof",
]
