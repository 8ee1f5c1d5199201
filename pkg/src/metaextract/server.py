"""HTTP review API over the tier review store.

Endpoints serve canonical JSON; errors use the {code, message} shape.
"""

from __future__ import annotations

from typing import Any, Optional

from fastapi import FastAPI, Request, Response

from .jsontree import dumps_canonical
from .review import (
    AlreadyDecided,
    InvalidDecision,
    PendingItemsRemain,
    ReviewStore,
    UnknownItem,
)


class UnknownRun(Exception):
    pass


def _canonical(payload: Any, status_code: int = 200) -> Response:
    return Response(content=dumps_canonical(payload),
                    media_type="application/json", status_code=status_code)


def _error(code: str, message: str, status_code: int) -> Response:
    return _canonical({"code": code, "message": message}, status_code)


def create_app(stores: dict[str, ReviewStore],
               metrics: Optional[dict[str, Any]] = None) -> FastAPI:
    """Review service over one store per run id.

    *metrics* maps run id to the precomputed metrics payload served verbatim
    at /api/runs/{run}/metrics.
    """
    app = FastAPI(title="extraction review", docs_url=None, redoc_url=None)
    metrics = metrics or {}

    def store_of(run_id: str) -> ReviewStore:
        store = stores.get(run_id)
        if store is None:
            raise UnknownRun(run_id)
        return store

    @app.exception_handler(UnknownRun)
    async def _unknown_run(_req: Request, exc: UnknownRun) -> Response:
        return _error("unknown_run", f"no run {exc}", 404)

    @app.get("/api/runs/{run_id}/queue")
    async def queue(run_id: str, tier: Optional[str] = None,
                    status: Optional[str] = None) -> Response:
        items = store_of(run_id).queue(tier=tier, status=status)
        return _canonical({"items": [item.to_json() for item in items]})

    @app.get("/api/items/{item_id}")
    async def get_item(item_id: str) -> Response:
        for store in stores.values():
            try:
                return _canonical(store.get(item_id).to_json())
            except UnknownItem:
                continue
        return _error("unknown_item", f"no item {item_id}", 404)

    @app.post("/api/items/{item_id}/decision")
    async def decide(item_id: str, request: Request) -> Response:
        body = await request.json()
        store = None
        for candidate in stores.values():
            try:
                candidate.get(item_id)
                store = candidate
                break
            except UnknownItem:
                continue
        if store is None:
            return _error("unknown_item", f"no item {item_id}", 404)
        try:
            item = store.submit_decision(
                item_id,
                decision=body.get("decision", ""),
                reviewer_id=body.get("reviewer_id", ""),
                token=body.get("token", ""),
                corrected_value=body.get("corrected_value"),
            )
        except InvalidDecision as exc:
            return _error("invalid_decision", str(exc), 400)
        except AlreadyDecided as exc:
            return _error("already_decided", str(exc), 409)
        return _canonical(item.to_json())

    @app.get("/api/runs/{run_id}/metrics")
    async def run_metrics(run_id: str) -> Response:
        store_of(run_id)
        payload = metrics.get(run_id)
        if payload is None:
            return _error("no_metrics", f"run {run_id} has no metrics", 404)
        return _canonical(payload)

    @app.get("/api/runs/{run_id}/effort")
    async def effort(run_id: str) -> Response:
        return _canonical(store_of(run_id).effort_report().to_json())

    @app.post("/api/runs/{run_id}/finalize")
    async def finalize(run_id: str) -> Response:
        try:
            finals, report = store_of(run_id).finalize()
        except PendingItemsRemain as exc:
            return _error("pending_items_remain",
                          "tier-3 items still pending: "
                          + ", ".join(exc.item_ids), 409)
        return _canonical({"documents": finals, "effort": report.to_json()})

    @app.exception_handler(Exception)
    async def _unhandled(_req: Request, exc: Exception) -> Response:
        return _error("internal_error", str(exc), 500)

    return app
