"""Binary anatomy/pathology masks at pixel and latent resolution.

A MaskSet carries one binary channel per organ class plus a rectangular
pathology box, and precomputes the latent-resolution versions used by the
guided sampler. Latent masks use the coverage rule: a latent cell is 1 when
at least half of its pixel block is 1.

On-disk formats (documented for interop):
  * multi-frame grayscale PNG: frames ordered lungs, heart, aorta, then an
    optional pathology frame; pixel 0/255.
  * .npz container: one uint8 array per organ name plus optional "pathology".
  * single RGB PNG (HTTP transport): R=lungs, G=heart, B=aorta, 0/255.
"""
from __future__ import annotations

import io
from pathlib import Path

import numpy as np
from PIL import Image, ImageSequence

from .errors import ConfigError, DataError, ShapeError
from .util import sha256_hex

ORGAN_CLASSES: tuple[str, ...] = ("lungs", "heart", "aorta")


def is_binary(mask: np.ndarray) -> bool:
    return bool(np.isin(mask, (0, 1)).all())


def _as_binary(name: str, mask: np.ndarray) -> np.ndarray:
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise ShapeError(f"{name} mask must be 2-D, got shape {arr.shape}")
    if not is_binary(arr):
        raise ConfigError(f"{name} mask must be exactly {{0,1}}-valued")
    return arr.astype(np.uint8)


def downsample_mask(mask: np.ndarray, factor: int) -> np.ndarray:
    """Binary downsample: latent cell = 1 iff pixel coverage of its block >= 50%."""
    mask = _as_binary("input", mask)
    h, w = mask.shape
    if h % factor or w % factor:
        raise ShapeError(f"mask shape {mask.shape} not divisible by factor {factor}")
    blocks = mask.reshape(h // factor, factor, w // factor, factor)
    return (blocks.mean(axis=(1, 3)) >= 0.5).astype(np.uint8)


def box_mask(size: int, x: int, y: int, w: int, h: int) -> np.ndarray:
    """Filled axis-aligned rectangle; (x, y) is the top-left corner in pixel coords."""
    if w < 0 or h < 0:
        raise ConfigError(f"box width/height must be >= 0, got ({w}, {h})")
    if w and h and not (0 <= x and 0 <= y and x + w <= size and y + h <= size):
        raise ConfigError(f"box ({x},{y},{w},{h}) exceeds image bounds {size}x{size}")
    mask = np.zeros((size, size), dtype=np.uint8)
    mask[y : y + h, x : x + w] = 1
    return mask


def box_from_mask(mask: np.ndarray):
    """Return (x, y, w, h) of a rectangle mask, or None when empty."""
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        return None
    return int(xs.min()), int(ys.min()), int(xs.max() - xs.min() + 1), int(ys.max() - ys.min() + 1)


def _check_rectangle(mask: np.ndarray) -> None:
    box = box_from_mask(mask)
    if box is None:
        return
    x, y, w, h = box
    if int(mask.sum()) != w * h or not mask[y : y + h, x : x + w].all():
        raise ConfigError("pathology mask must be a single filled axis-aligned rectangle")


class MaskSet:
    """Multi-organ anatomy mask plus a rectangular pathology box.

    All channels share one square pixel grid whose side is divisible by
    ``down_factor``. ``anatomy_union`` and the latent-resolution masks are
    derived once at construction; instances are treated as immutable.
    """

    def __init__(self, organ_channels: dict, pathology_box: np.ndarray | None = None, down_factor: int = 4):
        if set(organ_channels) != set(ORGAN_CLASSES):
            raise ConfigError(f"organ channels must be exactly {ORGAN_CLASSES}, got {sorted(organ_channels)}")
        channels = {name: _as_binary(name, organ_channels[name]) for name in ORGAN_CLASSES}
        shapes = {c.shape for c in channels.values()}
        if len(shapes) != 1:
            raise ShapeError(f"organ channels disagree on shape: {shapes}")
        (shape,) = shapes
        if shape[0] != shape[1]:
            raise ShapeError(f"masks must be square, got {shape}")
        if shape[0] % down_factor:
            raise ShapeError(f"mask size {shape[0]} not divisible by down factor {down_factor}")
        if pathology_box is None:
            pathology_box = np.zeros(shape, dtype=np.uint8)
        pathology_box = _as_binary("pathology", pathology_box)
        if pathology_box.shape != shape:
            raise ShapeError(f"pathology mask shape {pathology_box.shape} != organ shape {shape}")
        _check_rectangle(pathology_box)

        self.organ_channels = channels
        self.pathology_box = pathology_box
        self.down_factor = int(down_factor)
        self.size = int(shape[0])
        union = np.zeros(shape, dtype=np.uint8)
        for c in channels.values():
            union |= c
        self.anatomy_union = union
        self.latent_anatomy = downsample_mask(union, down_factor)
        self.latent_pathology = downsample_mask(pathology_box, down_factor)

    def with_box(self, box) -> "MaskSet":
        """Copy with the pathology box replaced by (x, y, w, h) or None."""
        mask = None if box is None else box_mask(self.size, *box)
        return MaskSet(self.organ_channels, mask, self.down_factor)

    @property
    def box(self):
        return box_from_mask(self.pathology_box)

    def fingerprint(self) -> str:
        payload = b"".join(self.organ_channels[n].tobytes() for n in ORGAN_CLASSES)
        payload += self.pathology_box.tobytes()
        return sha256_hex(payload + bytes([self.down_factor]))


def save_mask_png(mask: MaskSet, path: str | Path, include_pathology: bool = True) -> None:
    """Write a multi-frame grayscale PNG (organ frames, then optional pathology frame)."""
    frames = [Image.fromarray(mask.organ_channels[n] * np.uint8(255), mode="L") for n in ORGAN_CLASSES]
    if include_pathology:
        frames.append(Image.fromarray(mask.pathology_box * np.uint8(255), mode="L"))
    frames[0].save(path, format="PNG", save_all=True, append_images=frames[1:])


def load_mask_png(path: str | Path, down_factor: int = 4) -> MaskSet:
    try:
        with Image.open(path) as img:
            frames = [np.asarray(f.convert("L")) for f in ImageSequence.Iterator(img)]
    except Exception as exc:
        raise DataError(f"cannot read mask PNG {path}: {exc}") from exc
    if len(frames) not in (len(ORGAN_CLASSES), len(ORGAN_CLASSES) + 1):
        raise DataError(f"mask PNG {path} has {len(frames)} frames, expected 3 or 4")
    channels = {name: (frames[i] >= 128).astype(np.uint8) for i, name in enumerate(ORGAN_CLASSES)}
    pathology = (frames[3] >= 128).astype(np.uint8) if len(frames) == 4 else None
    return MaskSet(channels, pathology, down_factor)


def save_mask_npz(mask: MaskSet, path: str | Path) -> None:
    np.savez(path, pathology=mask.pathology_box, **mask.organ_channels)


def load_mask_npz(path: str | Path, down_factor: int = 4) -> MaskSet:
    try:
        with np.load(path) as data:
            channels = {name: data[name] for name in ORGAN_CLASSES}
            pathology = data["pathology"] if "pathology" in data.files else None
    except DataError:
        raise
    except KeyError as exc:
        raise DataError(f"mask container {path} is missing channel {exc}") from exc
    except Exception as exc:
        raise DataError(f"cannot read mask container {path}: {exc}") from exc
    return MaskSet(channels, pathology, down_factor)


def load_mask_file(path: str | Path, down_factor: int = 4) -> MaskSet:
    path = Path(path)
    if path.suffix == ".npz":
        return load_mask_npz(path, down_factor)
    return load_mask_png(path, down_factor)


def mask_to_rgb_png_bytes(mask: MaskSet) -> bytes:
    """Encode organ channels into one RGB PNG (R=lungs, G=heart, B=aorta)."""
    rgb = np.stack([mask.organ_channels[n] * np.uint8(255) for n in ORGAN_CLASSES], axis=-1)
    buf = io.BytesIO()
    Image.fromarray(rgb, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def mask_from_rgb_png_bytes(data: bytes, down_factor: int = 4) -> MaskSet:
    try:
        img = Image.open(io.BytesIO(data))
        rgb = np.asarray(img.convert("RGB"))
    except Exception as exc:
        raise DataError(f"cannot decode mask PNG payload: {exc}") from exc
    channels = {name: (rgb[..., i] >= 128).astype(np.uint8) for i, name in enumerate(ORGAN_CLASSES)}
    return MaskSet(channels, None, down_factor)
