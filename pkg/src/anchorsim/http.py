"""
HTTP front end for the gateway.

Requests carry ``Authorization: Bearer <token>``. Ids, unique ids and scan
metadata travel as UTF-8 strings. Error mapping:

    Unauthorized                      403 (401 without a token)
    UnknownTenant, UnknownUniqueId    404
    NoAnchorYet                       404
    DuplicateId                       409
    BatchTooLarge                     413
    InvalidRequest                    422
    NodeUnavailable                   503
"""

from __future__ import annotations

import contextlib
import threading

from fastapi import Depends, FastAPI, Request
from fastapi.responses import JSONResponse
from fastapi.security import HTTPAuthorizationCredentials, HTTPBearer
from pydantic import BaseModel, Field

from .anchor import read_committed_anchor
from .audit import Auditor, NoAnchorYet
from .chain import NodeUnavailable, ReadOnlyChain
from .gateway import (
    READ_ROLES,
    BatchTooLarge,
    DuplicateId,
    InvalidRequest,
    Unauthorized,
    UnknownTenant,
    UnknownUniqueId,
)
from .platform import Platform

STATUS = {
    Unauthorized: 403,
    UnknownTenant: 404,
    UnknownUniqueId: 404,
    NoAnchorYet: 404,
    DuplicateId: 409,
    BatchTooLarge: 413,
    InvalidRequest: 422,
    NodeUnavailable: 503,
}


class IdBatch(BaseModel):
    ids: list[str] = Field(..., description="unique ids to register in one transaction")


class ScanIn(BaseModel):
    unique_id: str
    meta: str = ""


def create_app(platform: Platform, lock: threading.RLock | None = None) -> FastAPI:
    """Build the API. ``lock`` guards simulation state (a Pacer's lock when live)."""
    app = FastAPI(title="anchorsim gateway")
    gw = platform.gateway
    guard = lock if lock is not None else contextlib.nullcontext()
    bearer = HTTPBearer(auto_error=False)
    auditors: dict[str, Auditor] = {}

    def token(creds: HTTPAuthorizationCredentials | None = Depends(bearer)) -> str:
        if creds is None:
            raise _NoToken()
        return creds.credentials

    for exc, code in STATUS.items():
        app.add_exception_handler(exc, _handler(code))
    app.add_exception_handler(_NoToken, _handler(401))

    def handle(h) -> dict:
        return {"chain_id": h.chain_id.hex(), "tx_hash": h.tx_hash.hex()}

    @app.post("/tenants/{tenant}/unique-ids", status_code=202)
    def create_ids(tenant: str, body: IdBatch, tok: str = Depends(token)):
        with guard:
            h = gw.create_unique_ids(tok, tenant, [i.encode() for i in body.ids])
            return {**handle(h), "count": len(body.ids), "status": gw.chain_of(tenant).commit_status(h).state.value}

    @app.post("/tenants/{tenant}/scans", status_code=202)
    def scan(tenant: str, body: ScanIn, tok: str = Depends(token)):
        with guard:
            h = gw.record_scan(tok, tenant, body.unique_id.encode(), body.meta.encode())
            return handle(h)

    @app.get("/tenants/{tenant}/history/{unique_id}")
    def history(tenant: str, unique_id: str, tok: str = Depends(token)):
        with guard:
            entries = gw.read_history(tok, tenant, unique_id.encode())
            return {"tenant": tenant, "unique_id": unique_id, "entries": [e.to_dict() for e in entries]}

    @app.get("/anchors/latest")
    def latest_anchor(tok: str = Depends(token)):
        with guard:
            gw.credential(tok)  # public data: any valid credential
            record = read_committed_anchor(ReadOnlyChain(platform.public.chain))
            if record is None:
                raise NoAnchorYet("no committed anchor")
            return record.to_dict()

    @app.get("/tenants/{tenant}/audit")
    def audit(tenant: str, tok: str = Depends(token)):
        with guard:
            gw.authorize(tok, tenant, *READ_ROLES)
            if tenant not in platform.tenants:
                raise UnknownTenant(tenant)
            auditor = auditors.setdefault(tenant, platform.auditor(tenant))
            return auditor.audit().to_dict()

    return app


class _NoToken(Exception):
    pass


def _handler(code: int):
    async def respond(request: Request, exc: Exception) -> JSONResponse:
        return JSONResponse(status_code=code, content={"error": type(exc).__name__, "detail": str(exc)})

    return respond
