"""
HTTP gateway exposing write, recall, ask and stats over JSON.

Engine calls run on a bounded thread pool so the event loop never blocks on a scan.
Lifecycle maintenance is never triggered from a handler.
"""

from __future__ import annotations

import asyncio
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Callable, Dict, Iterable, Optional, Tuple, Type

import hydra
from aiohttp import web
from omegaconf import DictConfig

from engine import AmvlEngine
from telemetry import TelemetrySink
from utils.config import load_config
from utils.datatypes import AskRequest, ClockMode, RequestKind
from utils.errors import AmvlError, CapExceeded, EmptyContent, UnknownNamespace
from utils.logs import setup_logging

logger = logging.getLogger(__name__)
logging.getLogger("aiohttp.access").setLevel(logging.WARNING)

ENGINE_KEY = web.AppKey("engine", AmvlEngine)
EXECUTOR_KEY = web.AppKey("executor", ThreadPoolExecutor)
NAMESPACES_KEY = web.AppKey("namespaces", frozenset)

ERROR_MAP: Dict[Type[AmvlError], Tuple[int, str]] = {
    EmptyContent: (400, "empty_content"),
    CapExceeded: (400, "cap_exceeded"),
    UnknownNamespace: (403, "unknown_namespace"),
}


@dataclass(frozen=True)
class ApiError:
    status: int
    code: str
    message: str

    @classmethod
    def from_exception(cls, error: AmvlError) -> "ApiError":
        for error_type, (status, code) in ERROR_MAP.items():
            if isinstance(error, error_type):
                return cls(status, code, str(error))
        return cls(500, "store_error", str(error))

    def response(self) -> web.Response:
        return web.json_response(
            {"error": {"code": self.code, "message": self.message}}, status=self.status
        )


async def _body(request: web.Request) -> Dict[str, Any]:
    try:
        body = await request.json()
    except (json.JSONDecodeError, UnicodeDecodeError):
        raise web.HTTPBadRequest(
            text=json.dumps({"error": {"code": "invalid_json", "message": "body is not valid JSON"}}),
            content_type="application/json",
        )
    if not isinstance(body, dict):
        raise web.HTTPBadRequest(
            text=json.dumps({"error": {"code": "invalid_json", "message": "body must be an object"}}),
            content_type="application/json",
        )
    return body


def _to_request(app: web.Application, body: Dict[str, Any], kind: RequestKind, text_key: str) -> AskRequest:
    namespace = str(body.get("namespace", "default"))
    if namespace not in app[NAMESPACES_KEY]:
        raise UnknownNamespace(namespace)
    text = body.get(text_key)
    if not isinstance(text, str) or not text.strip():
        raise EmptyContent()
    n = body.get("n")
    return AskRequest(
        query_text=text,
        namespace=namespace,
        kind=kind,
        t_virtual=body.get("t_virtual"),
        request_index=body.get("request_index"),
        label_value=body.get("label_value"),
        n=int(n) if n is not None else None,
    )


def _refused(body: Dict[str, Any], kind: RequestKind) -> AskRequest:
    """Placeholder request for telemetry when a body is refused before the engine sees it"""
    index = body.get("request_index")
    t_virtual = body.get("t_virtual")
    return AskRequest(
        query_text="",
        kind=kind,
        namespace=str(body.get("namespace", "default")),
        request_index=index if isinstance(index, int) else None,
        t_virtual=float(t_virtual) if isinstance(t_virtual, (int, float)) else None,
    )


async def _run(request: web.Request, kind: RequestKind, text_key: str, render: Callable[..., Dict[str, Any]]) -> web.Response:
    app = request.app
    body = await _body(request)
    engine = app[ENGINE_KEY]
    loop = asyncio.get_running_loop()
    try:
        req = _to_request(app, body, kind, text_key)
    except AmvlError as e:
        # refused requests still pass their turn at the gate
        await loop.run_in_executor(app[EXECUTOR_KEY], engine.reject, _refused(body, kind), e)
        return ApiError.from_exception(e).response()
    except (TypeError, ValueError) as e:
        return ApiError(400, "invalid_request", str(e)).response()

    # engine calls block; keep them off the event loop
    try:
        outcome = await loop.run_in_executor(app[EXECUTOR_KEY], engine.handle, req)
    except AmvlError as e:
        return ApiError.from_exception(e).response()
    return web.json_response(render(engine, outcome))


async def handle_write(request: web.Request) -> web.Response:
    return await _run(
        request,
        RequestKind.WRITE,
        "content",
        lambda engine, outcome: {"id": outcome.item_id, "tier": outcome.tier},
    )


async def handle_recall(request: web.Request) -> web.Response:
    def render(engine: AmvlEngine, outcome: Any) -> Dict[str, Any]:
        ids = [item_id for item_id, _ in outcome.hits]
        contents = engine.store.contents(ids)
        return {
            "hits": [
                {"id": item_id, "similarity": similarity, "content": content}
                for (item_id, similarity), content in zip(outcome.hits, contents)
            ],
            "candidate_size": outcome.candidates.size,
            "vectors_scanned": outcome.scan.vectors_scanned,
        }

    return await _run(request, RequestKind.RECALL, "query", render)


async def handle_ask(request: web.Request) -> web.Response:
    return await _run(
        request,
        RequestKind.ASK,
        "query",
        lambda engine, outcome: {
            "answer": outcome.answer,
            "citations": outcome.citations,
            "token_count": outcome.prompt.token_count,
        },
    )


async def handle_stats(request: web.Request) -> web.Response:
    return web.json_response(request.app[ENGINE_KEY].stats())


def create_app(
    engine: AmvlEngine,
    namespaces: Iterable[str] = ("default",),
    workers: int = 8,
    *,
    close_engine: bool = False,
) -> web.Application:
    """
    Build the aiohttp application around ``engine``.

    On cleanup the worker pool is drained before the engine (and with it telemetry) is
    closed, so in-flight requests finish and are recorded.
    """
    app = web.Application()
    app[ENGINE_KEY] = engine
    app[EXECUTOR_KEY] = ThreadPoolExecutor(max_workers=workers, thread_name_prefix="gateway")
    app[NAMESPACES_KEY] = frozenset(namespaces)
    app.router.add_post("/v1/write", handle_write)
    app.router.add_post("/v1/recall", handle_recall)
    app.router.add_post("/v1/ask", handle_ask)
    app.router.add_get("/v1/stats", handle_stats)

    async def _drain(app: web.Application) -> None:
        loop = asyncio.get_running_loop()
        await loop.run_in_executor(None, lambda: app[EXECUTOR_KEY].shutdown(wait=True))
        if close_engine:
            await loop.run_in_executor(None, engine.close)
        logger.info("Gateway drained")

    app.on_cleanup.append(_drain)
    return app


@hydra.main(version_base=None, config_path="configs", config_name="config")
def main(config: DictConfig) -> None:
    app_config = load_config(config)
    setup_logging(app_config.log_level, app_config.log_dir or "logs", prefix="gateway")
    settings = app_config.gateway
    sink: Optional[TelemetrySink] = (
        TelemetrySink(settings.telemetry_path, app_config.telemetry.queue_size)
        if settings.telemetry_path
        else None
    )
    engine = AmvlEngine.from_app(
        app_config, settings.policy, clock_mode=ClockMode.WALL, telemetry=sink
    )
    engine.start_service(settings.maintenance_interval_s)
    app = create_app(engine, settings.namespaces, settings.workers, close_engine=True)
    logger.info(f"Serving {settings.policy.value} memory on {settings.host}:{settings.port}")
    try:
        web.run_app(app, host=settings.host, port=settings.port, print=None)
    finally:
        if sink is not None:
            sink.close()


if __name__ == "__main__":
    main()
