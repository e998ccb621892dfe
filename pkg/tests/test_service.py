"""HTTP service flows over the in-process test client."""

import json

import pytest
from fastapi.testclient import TestClient

from deconfrec.service import create_app

SMALL_CONFIG = {
    "use_synthetic": True,
    "synthetic_users": 80,
    "synthetic_items": 50,
    "synthetic_visual_dim": 16,
    "synthetic_textual_dim": 12,
    "embed_dim": 16,
    "latent_dim": 8,
    "num_strata": 4,
    "knn_k": 5,
    "diffusion_steps": 4,
    "epochs": 2,
    "warm_epochs": 1,
    "batch_size": 512,
    "eval_ks": [5, 10],
    "seed": 0,
}


@pytest.fixture()
def client(tmp_path, monkeypatch):
    monkeypatch.setenv("DECONFREC_OUTPUT_ROOT", str(tmp_path / "runs"))
    with TestClient(create_app()) as c:
        c.workdir = tmp_path
        yield c


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("svc-train")
    with TestClient(create_app()) as c:
        config = dict(SMALL_CONFIG, output_dir=str(root / "run"))
        resp = c.post("/train", json={"config": config})
    assert resp.status_code == 200, resp.text
    return resp.json()


class TestHealth:
    def test_health(self, client):
        resp = client.get("/health")
        assert resp.status_code == 200
        body = resp.json()
        assert body["status"] == "ok"
        assert body["version"]


class TestTrain:
    def test_train_writes_artifacts_and_reports(self, trained):
        out = trained["output_dir"]
        from pathlib import Path

        files = {p.name for p in Path(out).iterdir()}
        assert {"checkpoint.pt", "manifest.json", "epochs.csv", "report.json",
                "report.csv", "config.json"} <= files
        assert trained["report"]["config_hash"] == trained["config_hash"]
        metrics = trained["report"]["metrics"]
        assert set(metrics) == {"validation", "test", "deconfounded"}
        assert metrics["test"]["ks"] == [5, 10]
        assert set(metrics["test"]["metrics"]) == {"5", "10"}

    def test_unknown_config_key_is_400_with_valid_keys(self, client):
        resp = client.post("/train", json={"config": {"embeddim": 4}})
        assert resp.status_code == 400
        assert "unknown config keys" in resp.json()["detail"]
        assert "embed_dim" in resp.json()["detail"]

    def test_no_data_source_is_400(self, client):
        resp = client.post("/train", json={"config": {"epochs": 1}})
        assert resp.status_code == 400
        assert "no data source" in resp.json()["detail"]

    def test_malformed_body_is_422(self, client):
        resp = client.post("/train", json={"config": [1, 2]})
        assert resp.status_code == 422


class TestEvaluate:
    def test_evaluate_matches_train_report(self, trained, tmp_path):
        with TestClient(create_app()) as c:
            resp = c.post("/evaluate", json={
                "checkpoint": trained["output_dir"] + "/checkpoint.pt",
                "ks": [5, 10],
                "output_path": str(tmp_path / "eval.json"),
            })
        assert resp.status_code == 200, resp.text
        body = resp.json()
        assert body["report"]["metrics"] == trained["report"]["metrics"]
        written = json.loads((tmp_path / "eval.json").read_text())
        assert written == body["report"]

    def test_missing_checkpoint_is_400(self, client):
        resp = client.post("/evaluate", json={"checkpoint": "/nope/checkpoint.pt"})
        assert resp.status_code == 400
        assert "checkpoint not found" in resp.json()["detail"]


class TestSynth:
    def test_synth_writes_dataset(self, client):
        out_dir = str(client.workdir / "ds")
        resp = client.post("/synth", json={
            "out_dir": out_dir, "num_users": 40, "num_items": 30,
            "num_confounders": 3, "visual_dim": 8, "textual_dim": 6, "seed": 1,
        })
        assert resp.status_code == 200, resp.text
        body = resp.json()
        assert body["num_users"] == 40 and body["num_items"] == 30
        assert set(body["files"]) == {
            "interactions", "visual", "textual", "ground_truth", "deconfounded_test",
        }
        from pathlib import Path

        for path in body["files"].values():
            assert Path(path).exists()

    def test_degenerate_spec_is_400(self, client):
        resp = client.post("/synth", json={"num_users": 0})
        assert resp.status_code == 400


class TestExport:
    @pytest.mark.parametrize("what,filename", [
        ("environments", "environments.json"),
        ("pruned_graph", "pruned_graph.tsv"),
    ])
    def test_export_kinds(self, trained, tmp_path, what, filename):
        out = str(tmp_path / filename)
        with TestClient(create_app()) as c:
            resp = c.post("/export", json={
                "checkpoint": trained["output_dir"] + "/checkpoint.pt",
                "what": what, "out_path": out,
            })
        assert resp.status_code == 200, resp.text
        body = resp.json()
        assert body["kind"] == what
        assert body["num_records"] > 0
        from pathlib import Path

        text = Path(out).read_text()
        if what == "environments":
            records = json.loads(text)
            assert len(records) == body["num_records"]
            assert {"item", "stratum", "soft"} <= set(records[0])
        else:
            lines = text.strip().split("\n")
            assert lines[0] == "user_id\titem_id\trho"
            assert len(lines) == body["num_records"] + 1

    def test_unknown_kind_is_422(self, client):
        # Literal type rejects it before the handler runs
        resp = client.post("/export", json={"checkpoint": "x", "what": "weights"})
        assert resp.status_code == 422
