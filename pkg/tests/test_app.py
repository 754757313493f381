import logging

import numpy as np
import pytest
from fastapi.testclient import TestClient

import app as service
from config import Config
from conftest import random_model
from main import DetectorBundle, save_detector
from ood_scores import dmd_fit
from results_store import ExperimentResult, ResultsStore

FEATURES = [0.1, -0.2, 0.3, 0.4]


@pytest.fixture
def detector_path(tmp_path, figure_tree):
    rng = np.random.default_rng(0)
    bundle = DetectorBundle(
        model=random_model(11),
        tree=figure_tree,
        variant="hier",
        beta=10.0,
        bank=dmd_fit(rng.standard_normal((40, 8)), np.repeat(np.arange(4), 10), 4),
        thresholds={"msp": 0.5},
        metadata={"scenario": "L22"},
    )
    path = tmp_path / "detector.npz"
    save_detector(bundle, str(path))
    return str(path)


@pytest.fixture
def client(monkeypatch, detector_path):
    monkeypatch.setattr(Config, "MODEL_PATH", detector_path)
    monkeypatch.setattr(Config, "ALARM_THRESHOLD", None)
    service._load_cached.cache_clear()
    yield TestClient(service.app)
    service._load_cached.cache_clear()


@pytest.fixture
def unconfigured(monkeypatch):
    monkeypatch.setattr(Config, "MODEL_PATH", "")
    service._load_cached.cache_clear()
    yield TestClient(service.app)
    service._load_cached.cache_clear()


def test_index(client):
    response = client.get("/")
    assert response.status_code == 200
    assert response.json()["status"] == "running"


class TestScore:
    def test_uses_checkpoint_threshold(self, client):
        response = client.post("/api/score", json={"features": FEATURES, "method": "msp"})
        assert response.status_code == 200
        body = response.json()
        assert body["success"] is True
        assert body["variant"] == "hier"
        assert body["threshold"] == 0.5
        assert body["alarm"] == (body["score"] > 0.5)
        assert body["predicted_leaf"] in ("L11", "L12", "L21", "L22")

    def test_request_threshold_wins(self, client):
        body = client.post("/api/score", json={"features": FEATURES, "method": "msp", "threshold": -1e9}).json()
        assert body["threshold"] == -1e9
        assert body["alarm"] is True

    def test_environment_threshold(self, client, monkeypatch):
        monkeypatch.setattr(Config, "ALARM_THRESHOLD", "1e9")
        body = client.post("/api/score", json={"features": FEATURES, "method": "msp"}).json()
        assert body["threshold"] == 1e9
        assert body["alarm"] is False

    @pytest.mark.parametrize("method", ["odin", "dmd"])
    def test_other_detectors_without_threshold(self, client, method):
        response = client.post("/api/score", json={"features": FEATURES, "method": method})
        assert response.status_code == 200
        assert response.json()["threshold"] is None
        assert response.json()["alarm"] is None

    def test_wrong_dimension(self, client):
        response = client.post("/api/score", json={"features": [1.0, 2.0], "method": "msp"})
        assert response.status_code == 400
        assert response.json()["success"] is False

    def test_unknown_method(self, client):
        response = client.post("/api/score", json={"features": FEATURES, "method": "energy"})
        assert response.status_code == 400

    def test_empty_features(self, client):
        assert client.post("/api/score", json={"features": []}).status_code == 400

    def test_no_detector_configured(self, unconfigured):
        response = unconfigured.post("/api/score", json={"features": FEATURES})
        assert response.status_code == 503


class TestHealth:
    def test_healthy(self, client):
        body = client.get("/health").json()
        assert body["status"] == "healthy"
        assert body["components"]["detector"]["classes"] == 4
        assert body["components"]["detector"]["thresholds"] == ["msp"]

    def test_degraded_without_detector(self, unconfigured):
        response = unconfigured.get("/health")
        assert response.status_code == 200
        assert response.json()["status"] == "degraded"

    def test_unhealthy_when_checkpoint_is_broken(self, monkeypatch, tmp_path):
        broken = tmp_path / "broken.npz"
        broken.write_bytes(b"not a checkpoint")
        monkeypatch.setattr(Config, "MODEL_PATH", str(broken))
        service._load_cached.cache_clear()
        client = TestClient(service.app)
        assert client.get("/health").status_code == 503
        assert client.post("/api/score", json={"features": FEATURES}).status_code == 503
        service._load_cached.cache_clear()


class TestResults:
    @pytest.fixture
    def output_dir(self, tmp_path, monkeypatch):
        out = tmp_path / "results"
        monkeypatch.setattr(Config, "OUTPUT_DIR", str(out))
        monkeypatch.setattr(Config, "REPORT_BETAS", "10,100")
        store = ResultsStore(str(out))
        store.append([
            ExperimentResult(scenario="A12", method="msp", variant=variant, beta=beta, seed=s,
                             learning_rate=0.01, auroc=0.5 + 0.1 * s, threshold=0.0)
            for variant, beta in (("flat", None), ("hier", 1.0))
            for s in range(3)
        ])
        return out

    def test_default_file(self, client, output_dir):
        response = client.get("/api/results")
        assert response.status_code == 200
        body = response.json()
        assert body["rows"] == 6
        assert body["scenarios"]["A12"]["f_msp"] == {"n": 3, "median": pytest.approx(0.6)}
        assert body["scenarios"]["A12"]["h_msp"] == {"n": 0, "median": None}

    def test_hier_cells_follow_report_betas(self, client, output_dir, monkeypatch):
        monkeypatch.setattr(Config, "REPORT_BETAS", "1")
        body = client.get("/api/results", params={"path": "results.csv"}).json()
        assert body["scenarios"]["A12"]["h_msp"] == {"n": 3, "median": pytest.approx(0.6)}

    def test_missing_file(self, client, output_dir):
        response = client.get("/api/results", params={"path": "none.csv"})
        assert response.status_code == 404
        assert response.json()["error"] == "Results file not found"

    @pytest.mark.parametrize("path", ["../elsewhere/secret.csv", "/etc/passwd", "sub/../../results.csv"])
    def test_paths_outside_output_dir(self, client, output_dir, tmp_path, path):
        elsewhere = tmp_path / "elsewhere"
        ResultsStore(str(elsewhere)).append([
            ExperimentResult(scenario="A12", method="msp", variant="flat", beta=None, seed=0,
                             learning_rate=0.01, auroc=0.5, threshold=0.0)
        ])
        (elsewhere / "results.csv").rename(elsewhere / "secret.csv")
        response = client.get("/api/results", params={"path": path})
        assert response.status_code == 404
        assert response.json()["error"] == "Results file not found"


def test_lifespan_replaces_startup_hooks(client, caplog):
    caplog.set_level(logging.INFO, logger="app")
    assert service.app.router.on_startup == []
    with TestClient(service.app) as running:
        assert running.get("/").status_code == 200
    assert "API starting" in caplog.text
    assert "shutting down" in caplog.text
