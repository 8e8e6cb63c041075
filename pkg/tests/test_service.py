import base64

import numpy as np
import pytest
import torch
from fastapi.testclient import TestClient

from conftest import MICRO_SIZE
from maskdiff.masks import mask_to_rgb_png_bytes
from maskdiff.server import ServiceState, create_app
from maskdiff.vae import decode, encode


@pytest.fixture(scope="module")
def client(micro_models, micro_sched):
    state = ServiceState(workers=2, request_timeout_s=60.0)
    state.attach(micro_models, micro_sched)
    app = create_app(state=state)
    with TestClient(app) as c:
        yield c


@pytest.fixture(scope="module")
def mask_b64(micro_sample):
    return base64.b64encode(mask_to_rgb_png_bytes(micro_sample.masks)).decode("ascii")


def _png_to_image(b64png: str) -> np.ndarray:
    import io

    from PIL import Image

    raw = base64.b64decode(b64png)
    with Image.open(io.BytesIO(raw)) as im:
        u8 = np.asarray(im.convert("L"), dtype=np.uint8)
    return (u8.astype(np.float32) / np.float32(127.5) - np.float32(1.0))[None]


class TestHealthAndCatalog:
    def test_health_ready(self, client):
        body = client.get("/api/health").json()
        assert body["ready"] is True
        assert body["image_size"] == MICRO_SIZE
        assert set(body["checkpoints"]) == {"ldm_vae", "anatomy_vae", "denoiser", "classifier"}
        assert body["checkpoints"]["ldm_vae"]

    def test_not_ready_returns_503(self):
        app = create_app(state=ServiceState())
        with TestClient(app) as c:
            assert c.get("/api/health").status_code == 503
            assert c.get("/api/presets").status_code == 503
            r = c.post("/api/generate", json={"preset": "phantom-3", "seed": 1})
            assert r.status_code == 503

    def test_labels(self, client):
        names = [l["name"] for l in client.get("/api/labels").json()["labels"]]
        assert names[0] == "NO_FINDING" and "CARDIOMEGALY" in names

    def test_presets(self, client):
        presets = client.get("/api/presets").json()["presets"]
        assert len(presets) >= 1
        assert all(p["size"] == MICRO_SIZE for p in presets)


class TestGenerate:
    def test_deterministic_image_payloads(self, client, mask_b64):
        req = {"anatomy_mask": mask_b64, "seed": 4, "s": 5,
               "pathology": {"label": "OPACITY_LEFT_LUNG", "box": [18, 12, 8, 8]}}
        a = client.post("/api/generate", json=req)
        b = client.post("/api/generate", json=req)
        assert a.status_code == b.status_code == 200
        assert a.json()["image"] == b.json()["image"]
        assert a.json()["manifest"]["seed"] == 4

    def test_preset_generation_with_intermediate(self, client):
        r = client.post("/api/generate", json={"preset": "phantom-3", "seed": 9, "s": 5,
                                               "include_intermediate": True})
        assert r.status_code == 200
        body = r.json()
        assert body["intermediate"] is not None
        assert body["timing_ms"] > 0

    def test_box_outside_bounds_is_400_with_field(self, client, mask_b64):
        r = client.post("/api/generate", json={
            "anatomy_mask": mask_b64, "seed": 1,
            "pathology": {"label": "OPACITY_LEFT_LUNG", "box": [30, 30, 10, 10]},
        })
        assert r.status_code == 400
        assert any(e["field"] == "pathology.box" for e in r.json()["errors"])

    def test_unknown_label_field_error(self, client, mask_b64):
        r = client.post("/api/generate", json={
            "anatomy_mask": mask_b64, "pathology": {"label": "GLITTER", "box": [2, 2, 4, 4]}})
        assert r.status_code == 400
        assert any(e["field"] == "pathology.label" for e in r.json()["errors"])

    def test_mask_xor_preset_required(self, client, mask_b64):
        assert client.post("/api/generate", json={"seed": 1}).status_code == 400
        r = client.post("/api/generate", json={"seed": 1, "preset": "phantom-3",
                                               "anatomy_mask": mask_b64})
        assert r.status_code == 400

    def test_schema_violation_maps_to_400(self, client):
        r = client.post("/api/generate", json={"preset": "phantom-3", "s": -4})
        assert r.status_code == 400
        assert r.json()["errors"]

    def test_bad_base64_field_error(self, client):
        r = client.post("/api/generate", json={"anatomy_mask": "@@@not-base64@@@"})
        assert r.status_code == 400
        assert any(e["field"] == "anatomy_mask" for e in r.json()["errors"])


class TestEdit:
    def test_no_finding_empty_box_is_vae_roundtrip(self, client, micro_models, micro_sample):
        import io

        from PIL import Image

        u8 = np.round((micro_sample.image[0] + 1.0) * 127.5).astype(np.uint8)
        buf = io.BytesIO()
        Image.fromarray(u8, mode="L").save(buf, format="PNG")
        payload = base64.b64encode(buf.getvalue()).decode("ascii")
        r = client.post("/api/edit", json={"image": payload, "seed": 2,
                                           "pathology": {"label": "NO_FINDING", "box": None}})
        assert r.status_code == 200
        out = _png_to_image(r.json()["image"])
        image = torch.from_numpy(micro_sample.image)
        roundtrip = decode(encode(image, micro_models.ldm_vae), micro_models.ldm_vae).numpy()
        assert float(((out - roundtrip) ** 2).mean()) < 1e-4

    def test_edit_requires_box_for_pathology(self, client, micro_sample):
        import io

        from PIL import Image

        u8 = np.round((micro_sample.image[0] + 1.0) * 127.5).astype(np.uint8)
        buf = io.BytesIO()
        Image.fromarray(u8, mode="L").save(buf, format="PNG")
        payload = base64.b64encode(buf.getvalue()).decode("ascii")
        r = client.post("/api/edit", json={"image": payload,
                                           "pathology": {"label": "CARDIOMEGALY", "box": None}})
        assert r.status_code == 400
        assert any(e["field"] == "pathology.box" for e in r.json()["errors"])

    def test_wrong_image_size_rejected(self, client):
        import io

        from PIL import Image

        buf = io.BytesIO()
        Image.fromarray(np.zeros((16, 16), dtype=np.uint8), mode="L").save(buf, format="PNG")
        payload = base64.b64encode(buf.getvalue()).decode("ascii")
        r = client.post("/api/edit", json={"image": payload,
                                           "pathology": {"label": "NO_FINDING", "box": None}})
        assert r.status_code == 400
        assert any(e["field"] == "image" for e in r.json()["errors"])


class TestManifestReplayViaCli:
    def test_service_manifest_replays_through_cmd_generate(self, client, micro_sample, micro_sched, tmp_path):
        import json

        from maskdiff.cli import main
        from maskdiff.masks import save_mask_png

        box = [18, 12, 8, 8]
        mask = micro_sample.masks.with_box(tuple(box))
        req = {"anatomy_mask": base64.b64encode(mask_to_rgb_png_bytes(mask)).decode("ascii"),
               "seed": 6, "s": 5, "pathology": {"label": "OPACITY_LEFT_LUNG", "box": box}}
        body = client.post("/api/generate", json=req).json()
        service_png = base64.b64decode(body["image"])

        (tmp_path / "manifest.json").write_text(json.dumps(body["manifest"]))
        save_mask_png(mask, tmp_path / "mask.png")
        # CLI replays from the manifest against fingerprint-matched checkpoints
        models_dir = tmp_path / "models"
        models_dir.mkdir()
        from conftest import build_micro_bundle

        build_micro_bundle(micro_sched, models_dir)  # same seed -> same weights as the service fixture
        rc = main(["generate", "--models", str(models_dir), "--mask", str(tmp_path / "mask.png"),
                   "--replay", str(tmp_path / "manifest.json"), "--label", "ignored",
                   "--out", str(tmp_path / "out")])
        assert rc == 0
        assert (tmp_path / "out" / "image.png").read_bytes() == service_png


class TestConcurrency:
    def test_concurrent_identical_requests_identical_images(self, client, mask_b64):
        import concurrent.futures

        req = {"anatomy_mask": mask_b64, "seed": 77, "s": 4}
        with concurrent.futures.ThreadPoolExecutor(4) as pool:
            bodies = list(pool.map(lambda _: client.post("/api/generate", json=req).json(), range(4)))
        assert all(b["image"] == bodies[0]["image"] for b in bodies)
        assert all(b["manifest"]["mask_fingerprints"] == bodies[0]["manifest"]["mask_fingerprints"]
                   for b in bodies)
