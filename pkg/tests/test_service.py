"""Service endpoints: contracts, file outputs, error category mapping."""

import numpy as np
import pytest
from fastapi.testclient import TestClient

from impression import codes as C
from impression import network as N
from impression.datasets import ManifestEntry, generate_domain, write_manifest
from impression.images import load_image, save_image
from impression.service.app import create_app


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A trained tiny checkpoint plus image files and manifests."""
    root = tmp_path_factory.mktemp("svc")
    spec = N.small_spec(3, 16, 2, widths=(6, 12))
    rng = np.random.default_rng(0)
    from impression.datasets import generate_two_domain

    data = generate_two_domain(80, size=16, seed=0)
    net = N.train_template(spec, data.images, data.labels, epochs=1, lr=2e-3, batch_size=32, seed=0,
                           dataset_name=data.name)
    N.save_checkpoint(net, root / "net.impr")

    src = generate_domain(0, 4, size=16, seed=5)
    for i, img in enumerate(src):
        save_image(img, root / f"src_{i}.png")
    (root / "domB").mkdir()
    for i, img in enumerate(generate_domain(1, 5, size=16, seed=6)):
        save_image(img, root / "domB" / f"b_{i}.png")
    write_manifest([ManifestEntry(f"s{i}", root / f"src_{i}.png", "0") for i in range(3)], root / "seeds.tsv")
    corpus = [ManifestEntry(f"a{i}", root / f"src_{i}.png", "0") for i in range(4)]
    corpus += [ManifestEntry(f"b{i}", root / "domB" / f"b_{i}.png", "1") for i in range(5)]
    write_manifest(corpus, root / "corpus.tsv")
    return root, net


@pytest.fixture(scope="module")
def client():
    return TestClient(create_app())


class TestBasicEndpoints:
    def test_health(self, client):
        body = client.get("/health").json()
        assert body["status"] == "ok"

    def test_task_table(self, client):
        tasks = client.get("/tasks").json()["tasks"]
        assert tasks["summer2winter"] == 8e-6
        assert len(tasks) == 8


class TestEncodeEndpoint:
    def test_single_image(self, client, workspace):
        root, net = workspace
        resp = client.post("/encode", json={
            "net": str(root / "net.impr"), "input": str(root / "src_0.png"),
            "out": str(root / "c0.json"),
        })
        assert resp.status_code == 200, resp.text
        body = resp.json()
        assert body["ensemble_size"] == 1
        assert body["fingerprint"] == net.fingerprint()
        code = C.load_code(root / "c0.json")
        assert code.dimension == body["dimension"]

    def test_ensemble_directory(self, client, workspace):
        root, _ = workspace
        resp = client.post("/encode", json={
            "net": str(root / "net.impr"), "input": str(root / "domB"),
            "out": str(root / "cB.json"), "ensemble": True, "schema": "meanvar",
        })
        assert resp.status_code == 200, resp.text
        assert resp.json()["ensemble_size"] == 5

    def test_multi_image_without_ensemble_is_config_error(self, client, workspace):
        root, _ = workspace
        resp = client.post("/encode", json={
            "net": str(root / "net.impr"), "input": str(root / "domB"),
            "out": str(root / "nope.json"),
        })
        assert resp.status_code == 400
        assert resp.json()["category"] == "config"

    def test_missing_checkpoint_is_io_error(self, client, workspace):
        root, _ = workspace
        resp = client.post("/encode", json={
            "net": str(root / "missing.impr"), "input": str(root / "src_0.png"),
            "out": str(root / "x.json"),
        })
        assert resp.status_code == 400
        assert resp.json()["category"] == "io"

    def test_unknown_field_is_rejected(self, client, workspace):
        root, _ = workspace
        resp = client.post("/encode", json={
            "net": str(root / "net.impr"), "input": str(root / "src_0.png"),
            "out": str(root / "x.json"), "bogus": 1,
        })
        assert resp.status_code == 422
        assert resp.json()["category"] == "config"


class TestSynthEndpoint:
    def test_outputs_and_losses(self, client, workspace):
        root, _ = workspace
        client.post("/encode", json={
            "net": str(root / "net.impr"), "input": str(root / "src_0.png"),
            "out": str(root / "target.json"),
        })
        resp = client.post("/synth", json={
            "net": str(root / "net.impr"), "target_code": str(root / "target.json"),
            "out_dir": str(root / "synth"), "batch": 3, "iters": 12, "seed": 1,
        })
        assert resp.status_code == 200, resp.text
        body = resp.json()
        assert len(body["images"]) == 3
        assert len(body["per_image_losses"]) == 3
        csv_lines = (root / "synth" / "loss.csv").read_text().splitlines()
        assert csv_lines[0] == "iteration,loss"
        assert len(csv_lines) == 13
        img = load_image(root / "synth" / "image_000.png")
        assert img.shape == (3, 16, 16)

    def test_incompatible_code_category(self, client, workspace, tmp_path):
        root, net = workspace
        other = N.NetworkCheckpoint(net.spec, N.init_params(net.spec, seed=9), net.norm_mean, net.norm_std)
        rng = np.random.default_rng(0)
        code = C.encode(other, rng.random((1, 3, 16, 16)).astype(np.float32))
        C.save_code(code, tmp_path / "foreign.json")
        resp = client.post("/synth", json={
            "net": str(root / "net.impr"), "target_code": str(tmp_path / "foreign.json"),
            "out_dir": str(tmp_path / "o"), "iters": 2, "batch": 1,
        })
        assert resp.status_code == 400
        assert resp.json()["category"] == "incompatible"


class TestTranslateEndpoint:
    def test_task_resolves_lambda(self, client, workspace):
        root, _ = workspace
        client.post("/encode", json={
            "net": str(root / "net.impr"), "input": str(root / "domB"),
            "out": str(root / "codeB.json"), "ensemble": True,
        })
        resp = client.post("/translate", json={
            "net": str(root / "net.impr"), "source": str(root / "src_0.png"),
            "target_code": str(root / "codeB.json"), "out_dir": str(root / "tr"),
            "task": "summer2winter", "iters": 8, "seed": 2,
        })
        assert resp.status_code == 200, resp.text
        body = resp.json()
        assert body["lam"] == 8e-6
        assert body["images"] == ["translated_src_0.png"]
        header = (root / "tr" / "loss.csv").read_text().splitlines()[0]
        assert header == "iteration,total,impression,content"

    def test_lam_task_conflict(self, client, workspace):
        root, _ = workspace
        resp = client.post("/translate", json={
            "net": str(root / "net.impr"), "source": str(root / "src_0.png"),
            "target_code": str(root / "codeB.json"), "out_dir": str(root / "x"),
            "task": "horse2zebra", "lam": 1e-4, "iters": 2,
        })
        assert resp.status_code == 400
        assert resp.json()["category"] == "config"

    def test_neither_lam_nor_task(self, client, workspace):
        root, _ = workspace
        resp = client.post("/translate", json={
            "net": str(root / "net.impr"), "source": str(root / "src_0.png"),
            "target_code": str(root / "codeB.json"), "out_dir": str(root / "x"), "iters": 2,
        })
        assert resp.status_code == 400
        assert resp.json()["category"] == "config"


class TestRetrieveEndpoint:
    def test_ranking_and_selection(self, client, workspace):
        root, _ = workspace
        resp = client.post("/retrieve", json={
            "net": str(root / "net.impr"), "seed_images": str(root / "seeds.tsv"),
            "corpus": str(root / "corpus.tsv"), "out": str(root / "rank.csv"), "n_t": 4,
        })
        assert resp.status_code == 200, resp.text
        body = resp.json()
        assert body["ranked_count"] == 9
        assert len(body["selected"]) == 4
        lines = (root / "rank.csv").read_text().splitlines()
        assert lines[0] == "id,distance,rank"
        assert len(lines) == 10


class TestGridifyEndpoint:
    def test_montage(self, client, workspace):
        root, _ = workspace
        resp = client.post("/gridify", json={
            "inputs": str(root / "domB"), "out": str(root / "grid.png"), "cols": 2,
        })
        assert resp.status_code == 200, resp.text
        body = resp.json()
        assert body["image_count"] == 5 and body["rows"] == 3
        grid = load_image(root / "grid.png")
        assert grid.shape[0] == 3


class TestDistanceEndpoint:
    def test_identical_codes(self, client, workspace):
        root, _ = workspace
        resp = client.post("/distance", json={
            "code_a": str(root / "c0.json"), "code_b": str(root / "c0.json"),
        })
        assert resp.status_code == 200
        assert resp.json()["distance"] == 0.0

    def test_incompatible_maps_to_category(self, client, workspace, tmp_path):
        root, net = workspace
        rng = np.random.default_rng(1)
        code = C.encode(net, rng.random((1, 3, 16, 16)).astype(np.float32), C.CodeSchema.MEAN_ONLY)
        C.save_code(code, tmp_path / "mean_only.json")
        resp = client.post("/distance", json={
            "code_a": str(root / "c0.json"), "code_b": str(tmp_path / "mean_only.json"),
        })
        assert resp.status_code == 400
        assert resp.json()["category"] == "incompatible"
