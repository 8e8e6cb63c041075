"""HTTP JSON API over preloaded checkpoints: generate, edit, labels, presets, health.

Requests are stateless and deterministic given a seed; images and masks
travel as base64 PNG (masks as RGB with R=lungs, G=heart, B=aorta; generated
images as 8-bit grayscale). A bounded worker pool serializes heavy generation
work; requests exceeding the per-request budget return 504. Endpoints return
503 until checkpoints finish loading.
"""
from __future__ import annotations

import base64
import io
import threading
import time
from concurrent.futures import ThreadPoolExecutor, TimeoutError as FutureTimeout

import numpy as np
import torch
from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from PIL import Image
from pydantic import BaseModel, Field

from .controllers import generate_two_stage, generate_with_anatomy, infuse_pathology
from .errors import MaskdiffError
from .labels import DEFAULT_LABELS, NO_FINDING, label_by_name
from .masks import MaskSet, mask_from_rgb_png_bytes, mask_to_rgb_png_bytes
from .phantoms import PhantomSpec, sample_phantom
from .runtime import load_bundle

MAX_PNG_BYTES = 1 << 20  # 1 MiB transport cap per image/mask payload
PRESET_SEEDS = (3, 17, 29, 41)


class FieldError(Exception):
    """Validation failure attributable to one request field (HTTP 400)."""

    def __init__(self, field: str, message: str):
        super().__init__(message)
        self.field = field


class PathologySpec(BaseModel):
    label: str
    box: tuple[int, int, int, int] | None = None


class GenerateRequest(BaseModel):
    anatomy_mask: str | None = None  # base64 RGB PNG
    preset: str | None = None
    pathology: PathologySpec | None = None
    seed: int | None = None
    s: int | None = Field(default=None, ge=0)
    include_intermediate: bool = False


class EditRequest(BaseModel):
    image: str  # base64 grayscale PNG
    pathology: PathologySpec
    seed: int | None = None


class ServiceState:
    """Checkpoints plus the worker pool; immutable once ready."""

    def __init__(self, workers: int = 2, request_timeout_s: float = 60.0):
        self.ready = False
        self.error: str | None = None
        self.bundle = None
        self.classifier = None
        self.sched = None
        self.presets: list = []
        self.pool = ThreadPoolExecutor(max_workers=max(1, workers))
        self.request_timeout_s = request_timeout_s

    def load(self, models_dir) -> None:
        bundle, classifier, sched = load_bundle(models_dir)
        self.attach(bundle, sched, classifier)

    def attach(self, bundle, sched, classifier=None) -> None:
        self.bundle = bundle
        self.sched = sched
        self.classifier = classifier
        size = bundle.ldm_vae.config.image_size
        spec = PhantomSpec(size=size)
        self.presets = []
        for seed in PRESET_SEEDS:
            masks = sample_phantom(seed, spec).masks
            self.presets.append({
                "id": f"phantom-{seed}",
                "name": f"Phantom anatomy {seed}",
                "size": size,
                "mask": base64.b64encode(mask_to_rgb_png_bytes(masks)).decode("ascii"),
            })
        self.ready = True

    @property
    def image_size(self) -> int:
        return self.bundle.ldm_vae.config.image_size


def _decode_b64(field: str, payload: str) -> bytes:
    try:
        raw = base64.b64decode(payload, validate=True)
    except Exception as exc:
        raise FieldError(field, f"invalid base64: {exc}") from exc
    if len(raw) > MAX_PNG_BYTES:
        raise FieldError(field, f"payload exceeds {MAX_PNG_BYTES} bytes")
    return raw


def _image_to_b64_png(image: torch.Tensor) -> str:
    u8 = np.round((image.numpy()[0] + 1.0) * 127.5).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(u8, mode="L").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def _image_from_b64_png(field: str, payload: str, expected_size: int) -> torch.Tensor:
    raw = _decode_b64(field, payload)
    try:
        with Image.open(io.BytesIO(raw)) as im:
            u8 = np.asarray(im.convert("L"), dtype=np.uint8)
    except Exception as exc:
        raise FieldError(field, f"not a decodable PNG: {exc}") from exc
    if u8.shape != (expected_size, expected_size):
        raise FieldError(field, f"image must be {expected_size}x{expected_size}, got {u8.shape}")
    arr = (u8.astype(np.float32) / np.float32(127.5) - np.float32(1.0))[None]
    return torch.from_numpy(arr)


def _resolve_mask(state: ServiceState, req: GenerateRequest) -> MaskSet:
    if (req.anatomy_mask is None) == (req.preset is None):
        raise FieldError("anatomy_mask", "provide exactly one of anatomy_mask or preset")
    if req.preset is not None:
        for preset in state.presets:
            if preset["id"] == req.preset:
                return mask_from_rgb_png_bytes(base64.b64decode(preset["mask"]))
        raise FieldError("preset", f"unknown preset {req.preset!r}")
    raw = _decode_b64("anatomy_mask", req.anatomy_mask)
    try:
        mask = mask_from_rgb_png_bytes(raw)
    except MaskdiffError as exc:
        raise FieldError("anatomy_mask", str(exc)) from exc
    if mask.size != state.image_size:
        raise FieldError("anatomy_mask", f"mask must be {state.image_size}px square, got {mask.size}")
    return mask


def _apply_pathology(state: ServiceState, mask: MaskSet, pathology: PathologySpec | None):
    if pathology is None:
        return mask, NO_FINDING
    try:
        label = label_by_name(pathology.label)
    except MaskdiffError as exc:
        raise FieldError("pathology.label", str(exc)) from exc
    if pathology.box is not None:
        x, y, w, h = pathology.box
        size = state.image_size
        if w <= 0 or h <= 0 or x < 0 or y < 0 or x + w > size or y + h > size:
            raise FieldError("pathology.box", f"box ({x},{y},{w},{h}) outside image bounds {size}x{size}")
        mask = mask.with_box((x, y, w, h))
    else:
        mask = mask.with_box(None)
    if label != NO_FINDING and mask.box is None:
        raise FieldError("pathology.box", f"label {label.name} requires a box")
    return mask, label


def _draw_seed() -> int:
    return int(torch.randint(0, 2**31 - 1, (1,)).item())


def create_app(models_dir=None, *, state: ServiceState | None = None, workers: int = 2,
               request_timeout_s: float = 60.0, cors_origins=("*",)) -> FastAPI:
    """Build the app; pass ``models_dir`` to load from disk at startup, or a
    prebuilt ``state`` (tests, embedded use)."""
    if state is None:
        state = ServiceState(workers=workers, request_timeout_s=request_timeout_s)
        if models_dir is not None:

            def _load():
                try:
                    state.load(models_dir)
                except Exception as exc:  # surfaced via /api/health
                    state.error = str(exc)

            threading.Thread(target=_load, daemon=True).start()

    app = FastAPI(title="maskdiff service")
    app.add_middleware(CORSMiddleware, allow_origins=list(cors_origins), allow_methods=["*"],
                       allow_headers=["*"])
    app.state.service = state

    @app.exception_handler(FieldError)
    async def field_error_handler(_: Request, exc: FieldError):
        return JSONResponse(status_code=400,
                            content={"errors": [{"field": exc.field, "message": str(exc)}]})

    @app.exception_handler(RequestValidationError)
    async def validation_handler(_: Request, exc: RequestValidationError):
        errors = [{"field": ".".join(str(p) for p in err["loc"] if p != "body"),
                   "message": err["msg"]} for err in exc.errors()]
        return JSONResponse(status_code=400, content={"errors": errors})

    @app.exception_handler(MaskdiffError)
    async def maskdiff_error_handler(_: Request, exc: MaskdiffError):
        return JSONResponse(status_code=400,
                            content={"errors": [{"field": "", "message": str(exc)}]})

    def _require_ready():
        if not state.ready:
            detail = {"detail": "checkpoints not loaded", "error": state.error}
            return JSONResponse(status_code=503, content=detail)
        return None

    def _run_bounded(fn):
        future = state.pool.submit(fn)
        try:
            return future.result(timeout=state.request_timeout_s)
        except FutureTimeout:
            return JSONResponse(status_code=504,
                                content={"detail": f"request exceeded {state.request_timeout_s}s budget"})

    @app.get("/api/health")
    def health():
        if not state.ready:
            return JSONResponse(status_code=503,
                                content={"ready": False, "error": state.error})
        return {
            "ready": True,
            "image_size": state.image_size,
            "T": state.sched.T,
            "checkpoints": {
                "ldm_vae": state.bundle.ldm_vae.fingerprint,
                "anatomy_vae": state.bundle.anatomy_vae.fingerprint,
                "denoiser": state.bundle.denoiser.fingerprint,
                "classifier": state.classifier.fingerprint if state.classifier else None,
            },
        }

    @app.get("/api/labels")
    def labels():
        return {"labels": [{"id": l.id, "name": l.name} for l in DEFAULT_LABELS]}

    @app.get("/api/presets")
    def presets():
        not_ready = _require_ready()
        if not_ready:
            return not_ready
        return {"presets": state.presets}

    @app.post("/api/generate")
    def generate(req: GenerateRequest):
        not_ready = _require_ready()
        if not_ready:
            return not_ready
        mask = _resolve_mask(state, req)
        mask, label = _apply_pathology(state, mask, req.pathology)
        seed = req.seed if req.seed is not None else _draw_seed()
        s = req.s if req.s is not None else 50
        if s > state.sched.T:
            raise FieldError("s", f"s={s} exceeds T={state.sched.T}")

        def work():
            t0 = time.perf_counter()
            image, manifest = generate_two_stage(mask, label, seed, state.bundle, state.sched, s=s)
            intermediate = None
            if req.include_intermediate:
                stage1, _ = generate_with_anatomy(mask, NO_FINDING, s, seed, state.bundle, state.sched)
                intermediate = _image_to_b64_png(stage1)
            return {
                "image": _image_to_b64_png(image),
                "intermediate": intermediate,
                "manifest": manifest.to_dict(),
                "timing_ms": round((time.perf_counter() - t0) * 1e3, 3),
            }

        return _run_bounded(work)

    @app.post("/api/edit")
    def edit(req: EditRequest):
        not_ready = _require_ready()
        if not_ready:
            return not_ready
        image = _image_from_b64_png("image", req.image, state.image_size)
        # edits carry their spatial intent entirely in the box; organ channels unused
        size = state.image_size
        empty = {name: np.zeros((size, size), dtype=np.uint8) for name in ("lungs", "heart", "aorta")}
        mask, label = _apply_pathology(state, MaskSet(empty), req.pathology)
        seed = req.seed if req.seed is not None else _draw_seed()

        def work():
            t0 = time.perf_counter()
            out, manifest = infuse_pathology(image, mask, label, seed, state.bundle, state.sched)
            return {
                "image": _image_to_b64_png(out),
                "intermediate": None,
                "manifest": manifest.to_dict(),
                "timing_ms": round((time.perf_counter() - t0) * 1e3, 3),
            }

        return _run_bounded(work)

    return app
