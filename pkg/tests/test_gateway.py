from __future__ import annotations

import json
import math

import httpx
import numpy as np
import pytest
from fastapi.testclient import TestClient
from httpx import ASGITransport

from duorouter.gateway import (
    BackendConfig,
    GatewayConfig,
    create_app,
    create_echo_app,
    load_gateway_config,
    resolve_threshold,
)
from duorouter.labeling import LabelScheme
from duorouter.router import (
    FeaturizerConfig,
    RouterModel,
    featurize_text,
    load_model,
    record_calibration,
    save_model,
)
from util import make_model

MARKER = "quokka"


def write_zero_model(path) -> None:
    """Hashed-text model that scores every query exactly 0.5."""
    cfg = FeaturizerConfig(kind="hashed_ngrams", dim=256)
    model = RouterModel(
        featurizer=cfg,
        weights=np.zeros(256),
        bias=0.0,
        scheme=LabelScheme("probabilistic"),
        training_meta={"l2": 0.0},
    )
    save_model(model, path)


def write_marker_model(path, threshold: float = 0.7) -> None:
    """Hashed-text model that fires only on the marker token, calibrated."""
    cfg = FeaturizerConfig(kind="hashed_ngrams", dim=4096)
    model = RouterModel(
        featurizer=cfg,
        weights=5.0 * featurize_text(cfg, MARKER),
        bias=0.0,
        scheme=LabelScheme("probabilistic"),
        training_meta={"l2": 0.0},
    )
    record_calibration(
        model,
        "bart_score",
        1.0,
        {
            "threshold": threshold,
            "quality_drop_pct": 0.0,
            "cost_advantage_pct": 50.0,
            "feasible": True,
        },
    )
    save_model(model, path)


def write_embedding_model(path) -> None:
    """Two-dim embedding model: score([1, 0]) is exactly 0.75."""
    model = make_model([math.log(3.0), -math.log(3.0)])
    save_model(model, path)


def gw_config(model_path, **over) -> GatewayConfig:
    kwargs = dict(
        listen_address="127.0.0.1:8800",
        small_backend=BackendConfig(base_url="http://small-echo", api_style="echo_mock"),
        large_backend=BackendConfig(base_url="http://large-echo", api_style="echo_mock"),
        model_artifact_path=str(model_path),
        metric="bart_score",
        threshold_override=0.5,
    )
    kwargs.update(over)
    return GatewayConfig(**kwargs)


def make_client(config, small_app=None, large_app=None, **transports):
    small_t = transports.get("small_transport") or (
        ASGITransport(app=small_app) if small_app is not None else None
    )
    large_t = transports.get("large_transport") or (
        ASGITransport(app=large_app) if large_app is not None else None
    )
    app = create_app(config, small_transport=small_t, large_transport=large_t)
    return TestClient(app)


# ---- configuration ----


def test_load_gateway_config_reads_all_fields(tmp_path) -> None:
    path = tmp_path / "gw.json"
    path.write_text(
        json.dumps(
            {
                "listen_address": "0.0.0.0:9100",
                "small_backend": {
                    "base_url": "http://s",
                    "api_style": "echo_mock",
                    "auth_token": "file-small",
                },
                "large_backend": {
                    "base_url": "http://l",
                    "api_style": "openai_chat",
                    "auth_token": "file-large",
                    "model": "big-model",
                },
                "model_artifact_path": "model.json",
                "metric": "bart_score",
                "threshold_override": 0.25,
                "request_timeout_ms": 1500,
                "max_body_bytes": 1024,
                "route_log_path": "routes.jsonl",
            }
        ),
        encoding="utf-8",
    )
    config = load_gateway_config(path)
    assert config.listen_address == "0.0.0.0:9100"
    assert config.small_backend == BackendConfig("http://s", "echo_mock", "file-small", None)
    assert config.large_backend == BackendConfig("http://l", "openai_chat", "file-large", "big-model")
    assert config.model_artifact_path == "model.json"
    assert config.metric == "bart_score"
    assert config.threshold_override == 0.25
    assert config.request_timeout_ms == 1500.0
    assert config.max_body_bytes == 1024
    assert config.route_log_path == "routes.jsonl"


def test_env_tokens_override_file_tokens(tmp_path, monkeypatch) -> None:
    path = tmp_path / "gw.json"
    path.write_text(
        json.dumps(
            {
                "listen_address": "127.0.0.1:9100",
                "small_backend": {"base_url": "http://s", "api_style": "echo_mock", "auth_token": "file-small"},
                "large_backend": {"base_url": "http://l", "api_style": "echo_mock", "auth_token": "file-large"},
                "model_artifact_path": "model.json",
                "metric": "bart_score",
            }
        ),
        encoding="utf-8",
    )
    monkeypatch.setenv("DUOROUTER_SMALL_AUTH_TOKEN", "env-small")
    config = load_gateway_config(path)
    assert config.small_backend.auth_token == "env-small"
    assert config.large_backend.auth_token == "file-large"
    assert config.threshold_override is None


def test_load_gateway_config_names_the_missing_key(tmp_path) -> None:
    path = tmp_path / "gw.json"
    path.write_text(
        json.dumps(
            {
                "listen_address": "127.0.0.1:9100",
                "small_backend": {"base_url": "http://s", "api_style": "echo_mock"},
                "large_backend": {"base_url": "http://l", "api_style": "echo_mock"},
                "model_artifact_path": "model.json",
            }
        ),
        encoding="utf-8",
    )
    with pytest.raises(ValueError, match="metric"):
        load_gateway_config(path)


def test_config_validations(tmp_path) -> None:
    with pytest.raises(ValueError):
        BackendConfig(base_url="", api_style="echo_mock")
    with pytest.raises(ValueError):
        BackendConfig(base_url="http://s", api_style="grpc")
    with pytest.raises(ValueError):
        gw_config(tmp_path / "m.json", listen_address="no-port")
    with pytest.raises(ValueError):
        gw_config(tmp_path / "m.json", threshold_override=1.5)
    with pytest.raises(ValueError):
        gw_config(tmp_path / "m.json", request_timeout_ms=0.0)
    with pytest.raises(ValueError):
        gw_config(tmp_path / "m.json", max_body_bytes=0)
    with pytest.raises(ValueError):
        gw_config(tmp_path / "m.json", metric="")


# ---- threshold resolution ----


def test_resolve_threshold_prefers_the_override(tmp_path) -> None:
    path = tmp_path / "model.json"
    write_marker_model(path, threshold=0.3)
    model = load_model(path)
    assert resolve_threshold(model, gw_config(path, threshold_override=0.9)) == 0.9
    assert resolve_threshold(model, gw_config(path, threshold_override=None)) == 0.3


def test_resolve_threshold_requires_some_source(tmp_path) -> None:
    path = tmp_path / "model.json"
    write_zero_model(path)
    model = load_model(path)
    with pytest.raises(ValueError, match="bart_score"):
        resolve_threshold(model, gw_config(path, threshold_override=None))


# ---- routing ----


def test_route_happy_path_goes_small(tmp_path) -> None:
    path = tmp_path / "model.json"
    write_zero_model(path)
    small = create_echo_app("small-echo")
    large = create_echo_app("large-echo")
    config = gw_config(path, threshold_override=0.4)
    with make_client(config, small, large) as client:
        resp = client.post("/v1/route", json={"query_text": "hello there"})
        assert resp.status_code == 200
        body = resp.json()
        assert body["response_text"] == "small-echo"
        record = body["routing"]
        assert set(record) == {
            "request_id",
            "score",
            "threshold",
            "target",
            "backend_latency_ms",
            "outcome",
        }
        assert record["score"] == 0.5
        assert record["threshold"] == 0.4
        assert record["target"] == "small"
        assert record["outcome"] == "ok"
        assert len(record["request_id"]) == 32
        assert record["backend_latency_ms"] >= 0.0
        stats = client.get("/v1/stats").json()
    assert small.state.calls == 1
    assert large.state.calls == 0
    assert stats["requests_total"] == 1
    assert stats["routed_small"] == 1
    assert stats["realized_cost_advantage_pct"] == 100.0


def test_route_ties_go_large(tmp_path) -> None:
    path = tmp_path / "model.json"
    write_zero_model(path)
    small = create_echo_app("small-echo")
    large = create_echo_app("large-echo")
    with make_client(gw_config(path, threshold_override=0.5), small, large) as client:
        resp = client.post("/v1/route", json={"query_text": "hello there"})
        assert resp.json()["routing"]["target"] == "large"
        assert resp.json()["response_text"] == "large-echo"
    assert small.state.calls == 0
    assert large.state.calls == 1


def test_route_uses_the_calibrated_threshold(tmp_path) -> None:
    path = tmp_path / "model.json"
    write_marker_model(path, threshold=0.7)
    small = create_echo_app("small-echo")
    large = create_echo_app("large-echo")
    config = gw_config(path, threshold_override=None)
    with make_client(config, small, large) as client:
        hit = client.post("/v1/route", json={"query_text": f"please {MARKER} now"})
        miss = client.post("/v1/route", json={"query_text": "plain prose here"})
        assert hit.json()["routing"]["target"] == "small"
        assert hit.json()["routing"]["threshold"] == 0.7
        assert miss.json()["routing"]["target"] == "large"
    assert small.state.calls == 1
    assert large.state.calls == 1


def test_route_log_is_jsonl(tmp_path) -> None:
    path = tmp_path / "model.json"
    write_zero_model(path)
    log_path = tmp_path / "routes.jsonl"
    config = gw_config(path, threshold_override=0.4, route_log_path=str(log_path))
    with make_client(config, create_echo_app("s"), create_echo_app("l")) as client:
        first = client.post("/v1/route", json={"query_text": "hello"}).json()["routing"]
        second = client.post("/v1/route", json={"query_text": "again"}).json()["routing"]
    lines = log_path.read_text(encoding="utf-8").splitlines()
    assert [json.loads(line) for line in lines] == [first, second]


# ---- request validation ----


def test_oversized_body_is_413(tmp_path) -> None:
    path = tmp_path / "model.json"
    write_zero_model(path)
    config = gw_config(path, max_body_bytes=64)
    with make_client(config, create_echo_app("s"), create_echo_app("l")) as client:
        resp = client.post("/v1/route", json={"query_text": "x" * 200})
        assert resp.status_code == 413
        assert "64" in resp.json()["error"]
        stats = client.get("/v1/stats").json()
    assert stats["requests_total"] == 0
    assert stats["error_counts"] == {"rejected": 1}


def test_malformed_bodies_are_400(tmp_path) -> None:
    path = tmp_path / "model.json"
    write_zero_model(path)
    with make_client(gw_config(path), create_echo_app("s"), create_echo_app("l")) as client:
        raw = client.post(
            "/v1/route", content=b"{not json", headers={"content-type": "application/json"}
        )
        assert raw.status_code == 400
        missing = client.post("/v1/route", json={"prompt": "hi"})
        assert missing.status_code == 400
        wrong_type = client.post("/v1/route", json={"query_text": 7})
        assert wrong_type.status_code == 400
        bad_embedding = client.post("/v1/route", json={"query_text": "hi", "embedding": "nope"})
        assert bad_embedding.status_code == 400


def test_hashed_model_rejects_embeddings(tmp_path) -> None:
    path = tmp_path / "model.json"
    write_zero_model(path)
    with make_client(gw_config(path), create_echo_app("s"), create_echo_app("l")) as client:
        resp = client.post("/v1/route", json={"query_text": "hi", "embedding": [0.1, 0.2]})
        assert resp.status_code == 400
        assert "embedding" in resp.json()["error"]


def test_embedding_model_validates_the_embedding(tmp_path) -> None:
    path = tmp_path / "model.json"
    write_embedding_model(path)
    small = create_echo_app("s")
    large = create_echo_app("l")
    with make_client(gw_config(path, threshold_override=0.6), small, large) as client:
        no_emb = client.post("/v1/route", json={"query_text": "hi"})
        assert no_emb.status_code == 400
        wrong_dim = client.post("/v1/route", json={"query_text": "hi", "embedding": [1.0]})
        assert wrong_dim.status_code == 400
        assert "2" in wrong_dim.json()["error"]
        non_finite = client.post(
            "/v1/route",
            content=b'{"query_text": "hi", "embedding": [1.0, 1e999]}',
            headers={"content-type": "application/json"},
        )
        assert non_finite.status_code == 400
        not_numbers = client.post(
            "/v1/route", json={"query_text": "hi", "embedding": [1.0, None]}
        )
        assert not_numbers.status_code == 400
        ok = client.post("/v1/route", json={"query_text": "hi", "embedding": [1.0, 0.0]})
        assert ok.status_code == 200
        assert ok.json()["routing"]["score"] == pytest.approx(0.75, abs=1e-12)
        assert ok.json()["routing"]["target"] == "small"


# ---- backend failures ----


def test_backend_failure_is_502_with_record(tmp_path) -> None:
    path = tmp_path / "model.json"
    write_zero_model(path)
    small = create_echo_app("small-echo", fail=True)
    large = create_echo_app("large-echo")
    config = gw_config(path, threshold_override=0.4)
    with make_client(config, small, large) as client:
        resp = client.post("/v1/route", json={"query_text": "hello"})
        assert resp.status_code == 502
        record = resp.json()["routing"]
        assert record["outcome"] == "backend_error"
        assert record["target"] == "small"
        stats = client.get("/v1/stats").json()
    assert large.state.calls == 0
    assert stats["requests_total"] == 1
    assert stats["routed_small"] == 1
    assert stats["error_counts"] == {"backend_error": 1}


def test_backend_timeout_is_reported_as_timeout(tmp_path) -> None:
    path = tmp_path / "model.json"
    write_zero_model(path)

    def never_answers(request):
        raise httpx.ConnectTimeout("backend stalled", request=request)

    config = gw_config(path, threshold_override=0.4)
    with make_client(
        config,
        small_transport=httpx.MockTransport(never_answers),
        large_transport=ASGITransport(app=create_echo_app("l")),
    ) as client:
        resp = client.post("/v1/route", json={"query_text": "hello"})
        assert resp.status_code == 502
        assert resp.json()["routing"]["outcome"] == "timeout"
        stats = client.get("/v1/stats").json()
    assert stats["error_counts"] == {"timeout": 1}


def test_unparseable_backend_response_is_backend_error(tmp_path) -> None:
    path = tmp_path / "model.json"
    write_zero_model(path)

    def wrong_shape(request):
        return httpx.Response(200, json={"unexpected": True})

    config = gw_config(path, threshold_override=0.4)
    with make_client(
        config,
        small_transport=httpx.MockTransport(wrong_shape),
        large_transport=ASGITransport(app=create_echo_app("l")),
    ) as client:
        resp = client.post("/v1/route", json={"query_text": "hello"})
        assert resp.status_code == 502
        assert resp.json()["routing"]["outcome"] == "backend_error"


# ---- dry runs and stats ----


def test_dry_run_never_contacts_backends(tmp_path) -> None:
    path = tmp_path / "model.json"
    write_marker_model(path)
    small = create_echo_app("s")
    large = create_echo_app("l")
    with make_client(gw_config(path, threshold_override=None), small, large) as client:
        hit = client.post("/v1/dry-run", json={"query_text": f"{MARKER} please"})
        miss = client.post("/v1/dry-run", json={"query_text": "plain text"})
        again = client.post("/v1/dry-run", json={"query_text": f"{MARKER} please"})
        assert hit.json()["target"] == "small"
        assert miss.json()["target"] == "large"
        assert again.json() == hit.json()
        stats = client.get("/v1/stats").json()
    assert small.state.calls == 0
    assert large.state.calls == 0
    assert stats["dry_runs"] == 3
    assert stats["requests_total"] == 0


def test_stats_start_at_zero(tmp_path) -> None:
    path = tmp_path / "model.json"
    write_zero_model(path)
    with make_client(gw_config(path), create_echo_app("s"), create_echo_app("l")) as client:
        stats = client.get("/v1/stats").json()
        health = client.get("/healthz").json()
    assert stats == {
        "requests_total": 0,
        "routed_small": 0,
        "routed_large": 0,
        "dry_runs": 0,
        "error_counts": {},
        "realized_cost_advantage_pct": None,
    }
    assert health == {"status": "ok"}


def test_stats_track_the_realized_mix(tmp_path) -> None:
    path = tmp_path / "model.json"
    write_marker_model(path)
    small = create_echo_app("s")
    large = create_echo_app("l")
    with make_client(gw_config(path, threshold_override=None), small, large) as client:
        for _ in range(3):
            client.post("/v1/route", json={"query_text": f"{MARKER} question"})
        client.post("/v1/route", json={"query_text": "ordinary question"})
        stats = client.get("/v1/stats").json()
        assert stats["requests_total"] == 4
        assert stats["routed_small"] == 3
        assert stats["routed_large"] == 1
        assert stats["realized_cost_advantage_pct"] == 75.0
        client.post("/v1/route", json={"query_text": f"{MARKER} again"})
        assert client.get("/v1/stats").json()["requests_total"] == 5


# ---- backend protocol styles ----


def test_openai_chat_style_forwards_model_and_auth(tmp_path) -> None:
    path = tmp_path / "model.json"
    write_zero_model(path)
    captured = {}

    def handler(request):
        captured["auth"] = request.headers.get("authorization")
        captured["path"] = request.url.path
        captured["body"] = json.loads(request.content)
        return httpx.Response(
            200, json={"choices": [{"message": {"role": "assistant", "content": "chat says hi"}}]}
        )

    config = gw_config(
        path,
        threshold_override=0.4,
        small_backend=BackendConfig(
            base_url="http://chat", api_style="openai_chat", auth_token="tok-small", model="tiny"
        ),
    )
    with make_client(
        config,
        small_transport=httpx.MockTransport(handler),
        large_transport=ASGITransport(app=create_echo_app("l")),
    ) as client:
        resp = client.post("/v1/route", json={"query_text": "hello chat"})
        assert resp.status_code == 200
        assert resp.json()["response_text"] == "chat says hi"
    assert captured["auth"] == "Bearer tok-small"
    assert captured["path"] == "/v1/chat/completions"
    assert captured["body"]["model"] == "tiny"
    assert captured["body"]["messages"] == [{"role": "user", "content": "hello chat"}]


def test_echo_style_works_against_the_chat_endpoint_too(tmp_path) -> None:
    path = tmp_path / "model.json"
    write_zero_model(path)
    small = create_echo_app("small-echo")
    config = gw_config(
        path,
        threshold_override=0.4,
        small_backend=BackendConfig(base_url="http://chat", api_style="openai_chat"),
    )
    with make_client(config, small, create_echo_app("l")) as client:
        resp = client.post("/v1/route", json={"query_text": "hello"})
        assert resp.json()["response_text"] == "small-echo"
    assert small.state.calls == 1
