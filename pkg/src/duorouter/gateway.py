"""HTTP routing gateway: score a query, proxy it to one backend.

The gateway loads a router model artifact at startup, resolves its routing
threshold (deployment override, else the artifact's calibration table for
the configured metric), and serves:

* ``POST /v1/route``    score, decide, forward to exactly one backend
* ``POST /v1/dry-run``  score and decide only, no backend contact
* ``GET  /v1/stats``    monotone counters since process start
* ``GET  /healthz``     liveness

Scoring uses the same featurize/score/decide code as the offline modules,
so live decisions replay bit-for-bit offline. Route records append to a
JSONL log when ``route_log_path`` is configured. Backend failures surface
as 502 responses carrying the route record; there is no failover, which
would silently change the realized cost advantage.
"""

import json
import logging
import math
import os
import threading
import time
import uuid
from contextlib import asynccontextmanager
from dataclasses import dataclass
from pathlib import Path

import httpx
import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from . import policy as policy_mod
from . import router as router_mod

logger = logging.getLogger("duorouter.gateway")

API_STYLES = ("openai_chat", "echo_mock")
ENV_TOKEN_VARS = {"small": "DUOROUTER_SMALL_AUTH_TOKEN", "large": "DUOROUTER_LARGE_AUTH_TOKEN"}


@dataclass(frozen=True)
class BackendConfig:
    base_url: str
    api_style: str
    auth_token: str | None = None
    model: str | None = None  # forwarded model name for openai_chat

    def __post_init__(self):
        if not self.base_url:
            raise ValueError("backend base_url must be non-empty")
        if self.api_style not in API_STYLES:
            raise ValueError(f"api_style must be one of {API_STYLES}, got {self.api_style!r}")


@dataclass(frozen=True)
class GatewayConfig:
    listen_address: str
    small_backend: BackendConfig
    large_backend: BackendConfig
    model_artifact_path: str
    metric: str
    threshold_override: float | None = None
    request_timeout_ms: float = 30000.0
    max_body_bytes: int = 65536
    route_log_path: str | None = None

    def __post_init__(self):
        host, sep, port = self.listen_address.rpartition(":")
        if not sep or not host or not port.isdigit():
            raise ValueError(f"listen_address must be host:port, got {self.listen_address!r}")
        if not self.metric:
            raise ValueError("metric must be non-empty")
        if self.threshold_override is not None and not (
            math.isfinite(self.threshold_override) and 0.0 <= self.threshold_override <= 1.0
        ):
            raise ValueError(f"threshold_override must lie in [0, 1], got {self.threshold_override!r}")
        if self.request_timeout_ms <= 0:
            raise ValueError(f"request_timeout_ms must be > 0, got {self.request_timeout_ms!r}")
        if self.max_body_bytes < 1:
            raise ValueError(f"max_body_bytes must be >= 1, got {self.max_body_bytes!r}")


def _backend_from_dict(raw: dict, side: str) -> BackendConfig:
    if not isinstance(raw, dict):
        raise ValueError(f"{side}_backend must be an object")
    token = os.environ.get(ENV_TOKEN_VARS[side]) or raw.get("auth_token")
    return BackendConfig(
        base_url=raw.get("base_url", ""),
        api_style=raw.get("api_style", ""),
        auth_token=token,
        model=raw.get("model"),
    )


def load_gateway_config(path) -> GatewayConfig:
    """Read a JSON config file; env vars override backend auth tokens."""
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(raw, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    try:
        return GatewayConfig(
            listen_address=raw["listen_address"],
            small_backend=_backend_from_dict(raw["small_backend"], "small"),
            large_backend=_backend_from_dict(raw["large_backend"], "large"),
            model_artifact_path=raw["model_artifact_path"],
            metric=raw["metric"],
            threshold_override=raw.get("threshold_override"),
            request_timeout_ms=float(raw.get("request_timeout_ms", 30000)),
            max_body_bytes=int(raw.get("max_body_bytes", 65536)),
            route_log_path=raw.get("route_log_path"),
        )
    except KeyError as exc:
        raise ValueError(f"{path}: missing config key {exc.args[0]!r}") from exc


def resolve_threshold(model: router_mod.RouterModel, config: GatewayConfig) -> float:
    """Deployment override wins; otherwise the artifact's calibration table.

    Running uncalibrated is a startup error, never a silent default.
    """
    if config.threshold_override is not None:
        return float(config.threshold_override)
    try:
        threshold, _ = router_mod.calibrated_threshold(model, config.metric)
    except KeyError:
        raise ValueError(
            f"model artifact has no calibrated threshold for metric {config.metric!r} "
            "and no threshold_override is set"
        )
    return threshold


# ---- request scoring (shared by route and dry-run) ----


class RequestError(ValueError):
    def __init__(self, status: int, message: str):
        super().__init__(message)
        self.status = status
        self.message = message


def _parse_request(raw: bytes, max_body_bytes: int) -> dict:
    if len(raw) > max_body_bytes:
        raise RequestError(413, f"request body exceeds {max_body_bytes} bytes")
    try:
        body = json.loads(raw)
    except json.JSONDecodeError:
        raise RequestError(400, "request body is not valid JSON")
    if not isinstance(body, dict) or not isinstance(body.get("query_text"), str):
        raise RequestError(400, "request must be an object with a string query_text")
    if "embedding" in body and body["embedding"] is not None and not isinstance(body["embedding"], list):
        raise RequestError(400, "embedding must be a list of numbers")
    return body


class GatewayState:
    """Shared mutable state: model, threshold, counters, log handle."""

    def __init__(self, config: GatewayConfig):
        self.config = config
        self.model = router_mod.load_model(config.model_artifact_path)
        self.threshold = resolve_threshold(self.model, config)
        self.policy = policy_mod.RoutingPolicy.learned(self.threshold)
        self.lock = threading.Lock()
        self.requests_total = 0
        self.routed_small = 0
        self.routed_large = 0
        self.dry_runs = 0
        self.error_counts: dict[str, int] = {}
        self._log_fh = None
        if config.route_log_path:
            self._log_fh = open(config.route_log_path, "a", encoding="utf-8")

    def score_request(self, body: dict) -> tuple[float, str]:
        """Featurize + score + decide; the bit-for-bit offline-replay path."""
        cfg = self.model.featurizer
        embedding = body.get("embedding")
        if cfg.kind == "hashed_ngrams":
            if embedding is not None:
                raise RequestError(
                    400, "this model scores query text; embeddings are not accepted"
                )
            features = router_mod.featurize_text(cfg, body["query_text"])
        else:
            if embedding is None:
                raise RequestError(400, "this model requires an embedding in the request")
            if len(embedding) != cfg.dim:
                raise RequestError(
                    400, f"embedding has {len(embedding)} dims, model expects {cfg.dim}"
                )
            try:
                features = np.asarray(embedding, dtype=np.float64)
            except (TypeError, ValueError):
                raise RequestError(400, "embedding values must be numbers")
            if not np.all(np.isfinite(features)):
                raise RequestError(400, "embedding values must be finite")
        s = router_mod.score(self.model, features)
        return s, policy_mod.decide(self.policy, s)

    def count_decision(self, target: str) -> None:
        with self.lock:
            self.requests_total += 1
            if target == policy_mod.SMALL:
                self.routed_small += 1
            else:
                self.routed_large += 1

    def count_error(self, kind: str) -> None:
        with self.lock:
            self.error_counts[kind] = self.error_counts.get(kind, 0) + 1

    def log_record(self, record: dict) -> None:
        if self._log_fh is None:
            return
        line = json.dumps(record, sort_keys=True) + "\n"
        with self.lock:
            self._log_fh.write(line)
            self._log_fh.flush()

    def close(self) -> None:
        if self._log_fh is not None:
            self._log_fh.close()
            self._log_fh = None


async def _call_backend(client: httpx.AsyncClient, backend: BackendConfig, query_text: str) -> str:
    headers = {}
    if backend.auth_token:
        headers["Authorization"] = f"Bearer {backend.auth_token}"
    if backend.api_style == "echo_mock":
        resp = await client.post("/v1/echo", json={"query_text": query_text}, headers=headers)
        resp.raise_for_status()
        return str(resp.json()["response_text"])
    payload = {"messages": [{"role": "user", "content": query_text}]}
    if backend.model:
        payload["model"] = backend.model
    resp = await client.post("/v1/chat/completions", json=payload, headers=headers)
    resp.raise_for_status()
    return str(resp.json()["choices"][0]["message"]["content"])


def create_app(
    config: GatewayConfig,
    small_transport: httpx.AsyncBaseTransport | None = None,
    large_transport: httpx.AsyncBaseTransport | None = None,
) -> FastAPI:
    """Build the ASGI app. Transports are injectable so tests run in-process."""
    state = GatewayState(config)
    timeout = httpx.Timeout(config.request_timeout_ms / 1000.0)
    clients = {
        policy_mod.SMALL: httpx.AsyncClient(
            base_url=config.small_backend.base_url, timeout=timeout, transport=small_transport
        ),
        policy_mod.LARGE: httpx.AsyncClient(
            base_url=config.large_backend.base_url, timeout=timeout, transport=large_transport
        ),
    }
    backends = {policy_mod.SMALL: config.small_backend, policy_mod.LARGE: config.large_backend}

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        yield
        for client in clients.values():
            await client.aclose()
        state.close()

    app = FastAPI(lifespan=lifespan)
    app.state.gateway = state

    @app.post("/v1/route")
    async def route(request: Request):
        try:
            body = _parse_request(await request.body(), config.max_body_bytes)
            score, target = state.score_request(body)
        except RequestError as exc:
            state.count_error("rejected")
            return JSONResponse({"error": exc.message}, status_code=exc.status)
        state.count_decision(target)
        record = {
            "request_id": uuid.uuid4().hex,
            "score": score,
            "threshold": state.threshold,
            "target": target,
            "backend_latency_ms": 0.0,
            "outcome": "ok",
        }
        started = time.perf_counter()
        try:
            response_text = await _call_backend(clients[target], backends[target], body["query_text"])
        except httpx.TimeoutException:
            record["backend_latency_ms"] = 1000.0 * (time.perf_counter() - started)
            record["outcome"] = "timeout"
        except (httpx.HTTPError, KeyError, ValueError, TypeError):
            record["backend_latency_ms"] = 1000.0 * (time.perf_counter() - started)
            record["outcome"] = "backend_error"
        else:
            record["backend_latency_ms"] = 1000.0 * (time.perf_counter() - started)
            state.log_record(record)
            return JSONResponse({"response_text": response_text, "routing": record})
        state.count_error(record["outcome"])
        state.log_record(record)
        logger.warning("backend %s failed for request %s (%s)", target, record["request_id"], record["outcome"])
        return JSONResponse(
            {"error": f"{target} backend {record['outcome']}", "routing": record}, status_code=502
        )

    @app.post("/v1/dry-run")
    async def dry_run(request: Request):
        try:
            body = _parse_request(await request.body(), config.max_body_bytes)
            score, target = state.score_request(body)
        except RequestError as exc:
            state.count_error("rejected")
            return JSONResponse({"error": exc.message}, status_code=exc.status)
        with state.lock:
            state.dry_runs += 1
        return JSONResponse({"score": score, "target": target, "threshold": state.threshold})

    @app.get("/v1/stats")
    async def stats():
        with state.lock:
            payload = {
                "requests_total": state.requests_total,
                "routed_small": state.routed_small,
                "routed_large": state.routed_large,
                "dry_runs": state.dry_runs,
                "error_counts": dict(state.error_counts),
                "realized_cost_advantage_pct": (
                    100.0 * state.routed_small / state.requests_total
                    if state.requests_total > 0
                    else None
                ),
            }
        return JSONResponse(payload)

    @app.get("/healthz")
    async def healthz():
        return JSONResponse({"status": "ok"})

    return app


# ---- bundled echo backend for integration tests ----


def create_echo_app(name: str, fail: bool = False) -> FastAPI:
    """Mock backend that answers with its own name and counts calls."""
    app = FastAPI()
    app.state.calls = 0

    @app.post("/v1/echo")
    async def echo(request: Request):
        app.state.calls += 1
        if fail:
            return JSONResponse({"error": f"{name} is down"}, status_code=500)
        await request.body()
        return JSONResponse({"response_text": name})

    @app.post("/v1/chat/completions")
    async def chat(request: Request):
        app.state.calls += 1
        if fail:
            return JSONResponse({"error": f"{name} is down"}, status_code=500)
        await request.body()
        return JSONResponse({"choices": [{"message": {"role": "assistant", "content": name}}]})

    return app


def serve(config: GatewayConfig) -> None:
    """Run the gateway under uvicorn (blocking)."""
    import uvicorn

    host, _, port = config.listen_address.rpartition(":")
    app = create_app(config)
    uvicorn.run(app, host=host, port=int(port), log_level="info")
