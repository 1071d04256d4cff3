"""
Platform owner's gateway: routing, triggers, and the registry API.

Writes for a tenant are spread round-robin over that tenant's triggers (one
per authority node). Reads go to the tenant's read-only node and only see
committed state. Every call is checked against a static credential table.
"""

from __future__ import annotations

import enum
import itertools
import struct
import threading
from dataclasses import dataclass, field
from typing import Callable

from .chain import (
    AccountId,
    Chain,
    ReadOnlyChain,
    RecordScan,
    RegisterUniqueIds,
    Transaction,
    TxHandle,
    account,
    scan_key,
    uid_key,
)

_U64 = struct.Struct(">Q")

MAX_ID_LENGTH = 64


class GatewayError(Exception):
    pass


class Unauthorized(GatewayError):
    pass


class UnknownTenant(GatewayError, LookupError):
    pass


class UnknownUniqueId(GatewayError, LookupError):
    pass


class DuplicateId(GatewayError):
    pass


class BatchTooLarge(GatewayError, ValueError):
    pass


class InvalidRequest(GatewayError, ValueError):
    pass


class Role(enum.Enum):
    PLATFORM_WRITER = "platform-writer"
    TENANT_READER = "tenant-reader"
    AUDITOR_READER = "auditor-reader"


READ_ROLES = (Role.PLATFORM_WRITER, Role.TENANT_READER, Role.AUDITOR_READER)


@dataclass(frozen=True)
class Credential:
    token: str
    role: Role
    tenant: str | None = None  # None: every tenant (platform owner only)

    def covers(self, tenant: str) -> bool:
        return self.tenant is None or self.tenant == tenant


@dataclass
class Trigger:
    """Submits transactions for one tenant through one authority node."""

    tenant: str
    authority: AccountId
    writer: AccountId
    next_nonce: int = 0
    submitted: int = 0
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def submit(self, chain: Chain, payload, gas_price: int, now: float) -> TxHandle:
        with self.lock:
            tx = Transaction(
                sender=self.writer,
                nonce=self.next_nonce,
                gas_price=gas_price,
                gas_cost=chain.config.gas_costs.cost(payload),
                payload=payload,
                submitted_at=now,
            )
            handle = chain.submit(tx)
            self.next_nonce += 1
            self.submitted += 1
            return handle


@dataclass(frozen=True)
class HistoryEntry:
    kind: str  # "registration" | "scan"
    writer: AccountId
    at: float
    meta: bytes = b""

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "writer": self.writer.hex(),
            "at": self.at,
            "meta": self.meta.decode("utf-8", "backslashreplace"),
        }


@dataclass
class _Tenant:
    name: str
    chain: Chain
    triggers: list[Trigger]
    rr: itertools.cycle
    reserved: set[bytes] = field(default_factory=set)

    @property
    def reader(self) -> ReadOnlyChain:
        return ReadOnlyChain(self.chain)


class Gateway:
    def __init__(
        self,
        clock: Callable[[], float],
        *,
        max_batch: int = 20,
        gas_price: int = 10,
    ):
        self.clock = clock
        self.max_batch = max_batch
        self.gas_price = gas_price
        self._tenants: dict[str, _Tenant] = {}
        self._by_chain: dict[bytes, str] = {}
        self._credentials: dict[str, Credential] = {}
        self._lock = threading.Lock()

    # -- administration ------------------------------------------------------

    def add_tenant(self, name: str, chain: Chain) -> None:
        if name in self._tenants or chain.chain_id in self._by_chain:
            raise InvalidRequest(f"tenant {name!r} or its chain already registered")
        triggers = [
            Trigger(name, auth, account(f"{name}/trigger/{i}"))
            for i, auth in enumerate(chain.config.authorities)
        ]
        self._tenants[name] = _Tenant(name, chain, triggers, itertools.cycle(triggers))
        self._by_chain[chain.chain_id] = name

    def grant(self, token: str, role: Role, tenant: str | None = None) -> Credential:
        if role is not Role.PLATFORM_WRITER and tenant is None:
            raise InvalidRequest("reader credentials must be scoped to one tenant")
        cred = Credential(token, role, tenant)
        self._credentials[token] = cred
        return cred

    @property
    def tenant_names(self) -> list[str]:
        return list(self._tenants)

    def chain_of(self, tenant: str) -> Chain:
        return self._tenant(tenant).chain

    def tenant_of_chain(self, chain_id: bytes) -> str:
        return self._by_chain[chain_id]

    def triggers(self, tenant: str) -> list[Trigger]:
        return list(self._tenant(tenant).triggers)

    # -- access control ------------------------------------------------------

    def _tenant(self, name: str) -> _Tenant:
        try:
            return self._tenants[name]
        except KeyError:
            raise UnknownTenant(name) from None

    def credential(self, token: str | None) -> Credential:
        cred = self._credentials.get(token or "")
        if cred is None:
            raise Unauthorized("unknown credential")
        return cred

    def authorize(self, token: str | None, tenant: str, *roles: Role) -> Credential:
        # checked before tenant lookup so a scoped caller cannot probe other tenants
        cred = self._credentials.get(token or "")
        if cred is None or cred.role not in roles or not cred.covers(tenant):
            raise Unauthorized(f"credential not allowed for tenant {tenant!r}")
        return cred

    # -- routing ---------------------------------------------------------------

    def route(self, tenant: str, write: bool = True) -> Trigger | ReadOnlyChain:
        t = self._tenant(tenant)
        if not write:
            return t.reader
        with self._lock:
            return next(t.rr)

    # -- operations --------------------------------------------------------------

    def create_unique_ids(self, token: str | None, tenant: str, ids: list[bytes]) -> TxHandle:
        self.authorize(token, tenant, Role.PLATFORM_WRITER)
        t = self._tenant(tenant)
        if not ids:
            raise InvalidRequest("empty batch")
        if len(ids) > self.max_batch:
            raise BatchTooLarge(f"{len(ids)} > {self.max_batch}")
        if any(not 0 < len(i) <= MAX_ID_LENGTH for i in ids):
            raise InvalidRequest(f"ids must be 1..{MAX_ID_LENGTH} bytes")
        ids = [bytes(i) for i in ids]
        with self._lock:
            if len(set(ids)) != len(ids) or any(i in t.reserved for i in ids):
                raise DuplicateId("batch repeats an id or reuses a registered one")
            if any(t.chain.read_state(uid_key(i)) is not None for i in ids):
                raise DuplicateId("id already registered")
            t.reserved.update(ids)
            trigger = next(t.rr)
        try:
            return trigger.submit(t.chain, RegisterUniqueIds(tuple(ids)), self.gas_price, self.clock())
        except Exception:
            with self._lock:
                t.reserved.difference_update(ids)
            raise

    def record_scan(
        self,
        token: str | None,
        tenant: str,
        unique_id: bytes,
        meta: bytes = b"",
        scanned_at: float | None = None,
    ) -> TxHandle:
        self.authorize(token, tenant, Role.PLATFORM_WRITER)
        t = self._tenant(tenant)
        if t.chain.read_state(uid_key(unique_id)) is None:
            raise UnknownUniqueId(unique_id.hex())
        now = self.clock()
        payload = RecordScan(unique_id, now if scanned_at is None else scanned_at, meta)
        return self.route(tenant).submit(t.chain, payload, self.gas_price, now)

    def read_history(self, token: str | None, tenant: str, unique_id: bytes) -> list[HistoryEntry]:
        self.authorize(token, tenant, *READ_ROLES)
        t = self._tenant(tenant)
        reader = t.reader
        height = reader.committed_height
        reg = reader.read_state(uid_key(unique_id), height)
        if reg is None:
            raise UnknownUniqueId(unique_id.hex())
        (millis,) = _U64.unpack(reg[20:28])
        history = [HistoryEntry("registration", reg[:20], millis / 1000)]
        seq = 0
        while (scan := reader.read_state(scan_key(unique_id, seq), height)) is not None:
            (millis,) = _U64.unpack(scan[20:28])
            history.append(HistoryEntry("scan", scan[:20], millis / 1000, scan[28:]))
            seq += 1
        return history
