"""Procedural chest-phantom rendering with exact ground-truth masks and labels.

Every phantom is a square grayscale image in [-1, 1] built from five tissue
classes rendered back-to-front (background, body, lungs, heart, aorta), each
with a disjoint intensity band. Organ occlusion follows a fixed z-order
(aorta over heart over lungs over body) and the recorded masks are the
visible, post-occlusion regions, so the renderer and the band-threshold
oracle segmenter agree by construction.

Pathologies: OPACITY_* adds a soft Gaussian bump strictly inside the chosen
lung (2 px containment margin) and a tight bounding-box pathology mask with a
2 px margin; CARDIOMEGALY enlarges the heart axes and uses the heart bounding
box as the pathology mask. NO_FINDING renders nothing and has an empty box.

Pixel values are snapped to the 8-bit grid (v/127.5 - 1) at render time so
PNG persistence round-trips bit-exactly.

Dataset directory layout (interop-documented):
    images/<id>.png    8-bit grayscale, linear map from [-1, 1]
    masks/<id>.png     palette PNG of class indices 0=bg 1=lungs 2=heart 3=aorta
    manifest.jsonl     one record per sample: files, label, box, seed
    dataset.json       format version, count, full spec, fingerprints
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from filelock import FileLock
from scipy import ndimage

from .errors import ConfigError, DataError
from .labels import (
    CARDIOMEGALY,
    DEFAULT_LABELS,
    NO_FINDING,
    OPACITY_LEFT_LUNG,
    OPACITY_RIGHT_LUNG,
    PathologyLabel,
    label_by_name,
)
from .masks import MaskSet, ORGAN_CLASSES, box_mask
from .util import fingerprint_obj, sha256_hex

DATASET_FORMAT_VERSION = 1

Range = tuple[float, float]


@dataclass(frozen=True)
class PhantomSpec:
    """Parameter ranges for the phantom renderer.

    Positions and axes are fractions of the image side; intensities are in
    [-1, 1]. Ranges are validated at construction so every draw yields
    non-degenerate geometry fully inside the body.
    """

    size: int = 64
    noise_sigma: float = 0.02
    # intensity ranges per tissue class, strictly ordered bands
    background_intensity: Range = (-0.97, -0.93)
    body_intensity: Range = (-0.25, -0.15)
    lung_intensity: Range = (-0.65, -0.55)
    heart_intensity: Range = (0.30, 0.40)
    aorta_intensity: Range = (0.70, 0.80)
    # body ellipse is derived from the drawn lungs (the thorax hugs the lungs),
    # so organ masks fully determine the body outline
    body_margin_x: float = 0.06
    body_margin_y: float = 0.22
    body_cy_offset: float = 0.05
    # lungs (left given; right mirrored in x)
    lung_cx: Range = (0.29, 0.35)
    lung_cy: Range = (0.44, 0.50)
    lung_sx: Range = (0.115, 0.150)
    lung_sy: Range = (0.195, 0.240)
    lung_rot: Range = (-0.12, 0.12)
    # heart ellipse; axes = base * scale, scale range depends on label
    heart_cx: Range = (0.50, 0.54)
    heart_cy: Range = (0.58, 0.62)
    heart_base_sx: float = 0.115
    heart_base_sy: float = 0.150
    heart_scale_normal: Range = (0.85, 1.05)
    heart_scale_cardiomegaly: Range = (1.30, 1.50)
    # aorta arc: ring segment above a horizontal cut
    aorta_cx: Range = (0.45, 0.49)
    aorta_cy: Range = (0.31, 0.35)
    aorta_radius: Range = (0.10, 0.13)
    aorta_half_width: Range = (0.025, 0.040)
    aorta_extent: Range = (0.20, 0.40)
    # focal opacity bump
    lesion_amplitude: Range = (0.45, 0.58)
    lesion_sigma: Range = (0.040, 0.070)
    lesion_cutoff: float = 0.10
    lesion_margin_px: int = 2
    # categorical prior over DEFAULT_LABELS order
    label_priors: tuple[float, ...] = (0.25, 0.25, 0.25, 0.25)

    def __post_init__(self):
        if self.size < 16 or self.size % 4:
            raise ConfigError(f"image size must be >= 16 and divisible by 4, got {self.size}")
        if not 0 <= self.noise_sigma < 0.05:
            raise ConfigError(f"noise sigma {self.noise_sigma} out of supported range [0, 0.05)")
        for name in (
            "background_intensity", "body_intensity", "lung_intensity", "heart_intensity",
            "aorta_intensity", "lung_cx",
            "lung_cy", "lung_sx", "lung_sy", "lung_rot", "heart_cx", "heart_cy",
            "heart_scale_normal", "heart_scale_cardiomegaly", "aorta_cx", "aorta_cy",
            "aorta_radius", "aorta_half_width", "aorta_extent", "lesion_amplitude",
            "lesion_sigma",
        ):
            lo, hi = getattr(self, name)
            if not (math.isfinite(lo) and math.isfinite(hi) and lo <= hi):
                raise ConfigError(f"range {name}={getattr(self, name)} is degenerate")
        # intensity bands must stay strictly ordered with a noise-proof gap
        gap = max(6.0 * self.noise_sigma, 0.05)
        order = [self.background_intensity, self.lung_intensity, self.body_intensity,
                 self.heart_intensity, self.aorta_intensity]
        for (lo_a, hi_a), (lo_b, hi_b) in zip(order, order[1:]):
            if hi_a + gap > lo_b:
                raise ConfigError("tissue intensity bands overlap or are too close for the noise level")
        # the brightest opacity core must stay below the heart band threshold
        lesion_peak = self.lung_intensity[1] + self.lesion_amplitude[1]
        heart_threshold = 0.5 * (self.body_intensity[1] + self.heart_intensity[0])
        if lesion_peak >= heart_threshold:
            raise ConfigError("lesion amplitude range can cross into the heart intensity band")
        if len(self.label_priors) != len(DEFAULT_LABELS):
            raise ConfigError(f"label_priors must have {len(DEFAULT_LABELS)} entries")
        if any(p < 0 for p in self.label_priors) or abs(sum(self.label_priors) - 1.0) > 1e-9:
            raise ConfigError("label_priors must be nonnegative and sum to 1")
        self._check_containment()

    def _check_containment(self):
        # body derivation must leave real margins around the lungs, and the
        # drawn organs must stay inside the unit frame; fine-grained
        # degeneracy (an organ rendered mostly outside the body) is guarded at
        # render time where the actual geometry is known
        lung_slop = self.lung_sy[1] * abs(math.sin(max(map(abs, self.lung_rot))))
        if self.body_margin_x <= lung_slop:
            raise ConfigError("body_margin_x too small for the lung rotation range")
        if self.body_margin_y <= self.body_cy_offset:
            raise ConfigError("body_margin_y must exceed body_cy_offset")
        frame = [
            ("lung", self.lung_cx[0] - self.lung_sy[1], 1 - self.lung_cx[0] + self.lung_sy[1],
             self.lung_cy[0] - self.lung_sy[1], self.lung_cy[1] + self.lung_sy[1] + self.body_margin_y),
            ("heart", self.heart_cx[0] - self.heart_base_sx * self.heart_scale_cardiomegaly[1],
             self.heart_cx[1] + self.heart_base_sx * self.heart_scale_cardiomegaly[1],
             self.heart_cy[0] - self.heart_base_sy * self.heart_scale_cardiomegaly[1],
             self.heart_cy[1] + self.heart_base_sy * self.heart_scale_cardiomegaly[1]),
            ("aorta", self.aorta_cx[0] - self.aorta_radius[1] - self.aorta_half_width[1],
             self.aorta_cx[1] + self.aorta_radius[1] + self.aorta_half_width[1],
             self.aorta_cy[0] - self.aorta_radius[1] - self.aorta_half_width[1],
             self.aorta_cy[1] + self.aorta_radius[1] + self.aorta_half_width[1]),
        ]
        for name, x_lo, x_hi, y_lo, y_hi in frame:
            if x_lo < 0.01 or x_hi > 0.99 or y_lo < 0.01 or y_hi > 0.99:
                raise ConfigError(f"{name} geometry range can leave the image frame")

    def to_dict(self) -> dict:
        d = asdict(self)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        kwargs = {}
        for key, value in d.items():
            kwargs[key] = tuple(value) if isinstance(value, list) else value
        return cls(**kwargs)

    def spec_hash(self) -> str:
        return fingerprint_obj(self.to_dict())

    # band thresholds shared by renderer sanity checks and the oracle segmenter
    def band_thresholds(self) -> dict:
        return {
            "bg_lung": 0.5 * (self.background_intensity[1] + self.lung_intensity[0]),
            "lung_body": 0.5 * (self.lung_intensity[1] + self.body_intensity[0]),
            "body_heart": 0.5 * (self.body_intensity[1] + self.heart_intensity[0]),
            "heart_aorta": 0.5 * (self.heart_intensity[1] + self.aorta_intensity[0]),
        }


@dataclass(frozen=True)
class PhantomSample:
    image: np.ndarray  # float32, (1, S, S), values on the 8-bit grid in [-1, 1]
    masks: MaskSet
    label: PathologyLabel
    seed: int
    spec_hash: str

    def equals(self, other: "PhantomSample") -> bool:
        return (
            np.array_equal(self.image, other.image)
            and all(np.array_equal(self.masks.organ_channels[n], other.masks.organ_channels[n]) for n in ORGAN_CLASSES)
            and np.array_equal(self.masks.pathology_box, other.masks.pathology_box)
            and self.label == other.label
            and self.seed == other.seed
            and self.spec_hash == other.spec_hash
        )


def _coords(size: int):
    y, x = np.mgrid[0:size, 0:size]
    return x.astype(np.float64), y.astype(np.float64)


def _ellipse(xx, yy, cx, cy, sx, sy, rot=0.0) -> np.ndarray:
    dx, dy = xx - cx, yy - cy
    c, s = math.cos(rot), math.sin(rot)
    u = (dx * c + dy * s) / sx
    v = (-dx * s + dy * c) / sy
    return (u * u + v * v) <= 1.0


def _uniform(rng, lohi: Range) -> float:
    lo, hi = lohi
    return float(lo + rng.random() * (hi - lo))


def _draw_layout(rng, spec: PhantomSpec, label: PathologyLabel) -> dict:
    """Draw all geometry/intensity parameters in a fixed order (pixel units).

    Lungs are drawn first and the body ellipse is derived from them, so the
    body outline is a function of the organ masks (the anatomy translator can
    only see those).
    """
    S = spec.size
    p = {
        "bg": _uniform(rng, spec.background_intensity),
        "body_int": _uniform(rng, spec.body_intensity),
        "lung_int": _uniform(rng, spec.lung_intensity),
        "heart_int": _uniform(rng, spec.heart_intensity),
        "aorta_int": _uniform(rng, spec.aorta_intensity),
    }
    lungs = {}
    for side in ("left", "right"):
        cx = _uniform(rng, spec.lung_cx)
        if side == "right":
            cx = 1.0 - cx
        lungs[side] = (cx * S, _uniform(rng, spec.lung_cy) * S,
                       _uniform(rng, spec.lung_sx) * S, _uniform(rng, spec.lung_sy) * S,
                       _uniform(rng, spec.lung_rot))
    p["lungs"] = lungs
    (lcx, lcy, lsx, lsy, _), (rcx, rcy, rsx, rsy, _) = lungs["left"], lungs["right"]
    p["body"] = (
        (lcx + rcx) / 2.0,
        (lcy + rcy) / 2.0 + spec.body_cy_offset * S,
        (rcx - lcx) / 2.0 + max(lsx, rsx) + spec.body_margin_x * S,
        max(lsy, rsy) + spec.body_margin_y * S,
    )
    scale_range = spec.heart_scale_cardiomegaly if label == CARDIOMEGALY else spec.heart_scale_normal
    p["heart"] = (_uniform(rng, spec.heart_cx) * S, _uniform(rng, spec.heart_cy) * S,
                  _uniform(rng, scale_range))
    p["aorta"] = (_uniform(rng, spec.aorta_cx) * S, _uniform(rng, spec.aorta_cy) * S,
                  _uniform(rng, spec.aorta_radius) * S, _uniform(rng, spec.aorta_half_width) * S,
                  _uniform(rng, spec.aorta_extent))
    return p


def _scramble_layout(p: dict, spec: PhantomSpec) -> dict:
    """Rearrange organs into an anatomically wrong but in-body configuration.

    Lungs become horizontal and sit low, the heart moves to the upper left
    chest, the aorta to the lower right. Local textures and intensity bands
    are untouched.
    """
    S = spec.size
    q = dict(p)
    lungs = {}
    for side, cx_frac in (("left", 0.36), ("right", 0.64)):
        _, _, sx, sy, rot = p["lungs"][side]
        lungs[side] = (cx_frac * S, 0.70 * S, sy, sx, rot)  # axes swapped: horizontal lungs
    q["lungs"] = lungs
    q["heart"] = (0.32 * S, 0.36 * S, p["heart"][2])
    acx, acy, r, hw, extent = p["aorta"]
    q["aorta"] = (0.60 * S, 0.60 * S, r, hw, extent)
    return q


def _render_from_layout(rng, spec: PhantomSpec, label: PathologyLabel, p: dict):
    S = spec.size
    xx, yy = _coords(S)
    body = _ellipse(xx, yy, *p["body"])
    lung_l = _ellipse(xx, yy, *p["lungs"]["left"]) & body
    lung_r = _ellipse(xx, yy, *p["lungs"]["right"]) & body
    hcx, hcy, hscale = p["heart"]
    heart = _ellipse(xx, yy, hcx, hcy, spec.heart_base_sx * hscale * S, spec.heart_base_sy * hscale * S) & body
    acx, acy, ar, ahw, aextent = p["aorta"]
    d2 = (xx - acx) ** 2 + (yy - acy) ** 2
    aorta = (d2 >= (ar - ahw) ** 2) & (d2 <= (ar + ahw) ** 2) & (yy <= acy + aextent * ar) & body

    # z-order: aorta over heart over lungs over body
    heart_v = heart & ~aorta
    lung_l_v = lung_l & ~heart_v & ~aorta
    lung_r_v = lung_r & ~heart_v & ~aorta
    lungs_v = lung_l_v | lung_r_v

    unit2 = (S / 64.0) ** 2
    for name, mask, min_area in (("lungs", lungs_v, 80 * unit2), ("heart", heart_v, 30 * unit2),
                                 ("aorta", aorta, 10 * unit2)):
        if mask.sum() < min_area:
            raise ConfigError(f"degenerate geometry: visible {name} area {int(mask.sum())} px "
                              f"below minimum {int(min_area)} (check spec ranges)")

    img = np.full((S, S), p["bg"], dtype=np.float64)
    img[body] = p["body_int"]
    img[lungs_v] = p["lung_int"]
    img[heart_v] = p["heart_int"]
    img[aorta] = p["aorta_int"]

    # pathology rendering
    box = None
    if label in (OPACITY_LEFT_LUNG, OPACITY_RIGHT_LUNG):
        lung_v = lung_l_v if label == OPACITY_LEFT_LUNG else lung_r_v
        amplitude = _uniform(rng, spec.lesion_amplitude)
        sigma = _uniform(rng, spec.lesion_sigma) * S
        margin = spec.lesion_margin_px
        radius_factor = math.sqrt(2.0 * math.log(amplitude / spec.lesion_cutoff))
        dist = ndimage.distance_transform_edt(lung_v)
        needed = sigma * radius_factor + margin
        valid_ys, valid_xs = np.nonzero(dist >= needed)
        if valid_ys.size:
            pick = int(rng.integers(valid_ys.size))
            cy_l, cx_l = float(valid_ys[pick]), float(valid_xs[pick])
        else:
            # shrink the lesion so it fits at the deepest interior point
            flat = int(np.argmax(dist))
            cy_l, cx_l = np.unravel_index(flat, dist.shape)
            rng.integers(1)  # keep the draw count fixed across both branches
            sigma = max((float(dist[cy_l, cx_l]) - margin) / radius_factor, 0.8 * S / 64.0)
        bump = amplitude * np.exp(-((xx - cx_l) ** 2 + (yy - cy_l) ** 2) / (2.0 * sigma * sigma))
        support = bump > spec.lesion_cutoff
        img = img + np.where((bump > 0.02) & lung_v, bump, 0.0)
        ys, xs = np.nonzero(support)
        x0 = max(int(xs.min()) - margin, 0)
        y0 = max(int(ys.min()) - margin, 0)
        x1 = min(int(xs.max()) + margin, S - 1)
        y1 = min(int(ys.max()) + margin, S - 1)
        box = (x0, y0, x1 - x0 + 1, y1 - y0 + 1)
        lesion_mask = support.astype(np.uint8)
    elif label == CARDIOMEGALY:
        ys, xs = np.nonzero(heart_v)
        box = (int(xs.min()), int(ys.min()), int(xs.max() - xs.min() + 1), int(ys.max() - ys.min() + 1))
        lesion_mask = None
    else:
        lesion_mask = None

    if spec.noise_sigma > 0:
        img = img + rng.normal(0.0, spec.noise_sigma, size=(S, S))
    img = np.clip(img, -1.0, 1.0)
    # snap to the 8-bit grid via the exact PNG decode path so persistence is lossless
    u8 = np.round((img + 1.0) * 127.5).astype(np.uint8)
    img = u8.astype(np.float32) / np.float32(127.5) - np.float32(1.0)

    channels = {
        "lungs": lungs_v.astype(np.uint8),
        "heart": heart_v.astype(np.uint8),
        "aorta": aorta.astype(np.uint8),
    }
    mask_set = MaskSet(channels, box_mask(S, *box) if box else None)
    return img.astype(np.float32)[None, :, :], mask_set, lesion_mask


def _rng_for(seed: int, spec: PhantomSpec):
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFF, int(spec.spec_hash()[:12], 16)])


def draw_label(seed: int, spec: PhantomSpec) -> PathologyLabel:
    """The label a given seed will render (first draw of the sample stream)."""
    rng = _rng_for(seed, spec)
    return DEFAULT_LABELS[int(rng.choice(len(DEFAULT_LABELS), p=list(spec.label_priors)))]


def sample_phantom(seed: int, spec: PhantomSpec, force_label: PathologyLabel | None = None) -> PhantomSample:
    """Render one phantom deterministically from (seed, spec).

    ``force_label`` overrides the prior draw (the draw still happens so the
    downstream stream is unchanged); used by controlled experiment suites.
    """
    rng = _rng_for(seed, spec)
    drawn = DEFAULT_LABELS[int(rng.choice(len(DEFAULT_LABELS), p=list(spec.label_priors)))]
    label = force_label if force_label is not None else drawn
    layout = _draw_layout(rng, spec, label)
    image, mask_set, _ = _render_from_layout(rng, spec, label, layout)
    return PhantomSample(image=image, masks=mask_set, label=label, seed=int(seed), spec_hash=spec.spec_hash())


def sample_phantom_scrambled(seed: int, spec: PhantomSpec) -> PhantomSample:
    """Render the organ-scrambled artifact twin of ``sample_phantom(seed, spec)``.

    Same tissue intensities and textures, anatomically wrong organ placement;
    always NO_FINDING.
    """
    rng = _rng_for(seed, spec)
    rng.choice(len(DEFAULT_LABELS), p=list(spec.label_priors))  # keep stream aligned
    layout = _scramble_layout(_draw_layout(rng, spec, NO_FINDING), spec)
    image, mask_set, _ = _render_from_layout(rng, spec, NO_FINDING, layout)
    return PhantomSample(image=image, masks=mask_set, label=NO_FINDING, seed=int(seed), spec_hash=spec.spec_hash())


def lesion_support_mask(sample_seed: int, spec: PhantomSpec) -> np.ndarray | None:
    """Exact rendered-lesion support for a seed (None for non-opacity labels)."""
    rng = _rng_for(sample_seed, spec)
    label = DEFAULT_LABELS[int(rng.choice(len(DEFAULT_LABELS), p=list(spec.label_priors)))]
    layout = _draw_layout(rng, spec, label)
    _, _, lesion = _render_from_layout(rng, spec, label, layout)
    return lesion


def oracle_segment(image, spec: PhantomSpec) -> dict:
    """Analytic band-threshold segmenter for phantom-family images.

    Valid for images rendered by this spec family; best-effort on generated
    images (small components are dropped, lesion holes inside lungs are
    filled, heart/aorta keep their largest component).
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img[0]
    S = img.shape[0]
    thr = spec.band_thresholds()
    unit2 = (S / 64.0) ** 2

    lung_band = (img >= thr["bg_lung"]) & (img < thr["lung_body"])
    lungs = ndimage.binary_fill_holes(lung_band)
    lungs = _drop_small(lungs, max(8, int(20 * unit2)))

    heart = _largest_component((img >= thr["body_heart"]) & (img < thr["heart_aorta"]), max(8, int(12 * unit2)))
    aorta = _largest_component(img >= thr["heart_aorta"], max(4, int(6 * unit2)))
    return {"lungs": lungs.astype(np.uint8), "heart": heart.astype(np.uint8), "aorta": aorta.astype(np.uint8)}


def _drop_small(mask: np.ndarray, min_area: int) -> np.ndarray:
    labeled, n = ndimage.label(mask)
    if not n:
        return np.zeros_like(mask, dtype=bool)
    sizes = ndimage.sum_labels(np.ones_like(labeled), labeled, index=np.arange(1, n + 1))
    keep = np.flatnonzero(sizes >= min_area) + 1
    return np.isin(labeled, keep)


def _largest_component(mask: np.ndarray, min_area: int) -> np.ndarray:
    labeled, n = ndimage.label(mask)
    if not n:
        return np.zeros_like(mask, dtype=bool)
    sizes = ndimage.sum_labels(np.ones_like(labeled), labeled, index=np.arange(1, n + 1))
    best = int(np.argmax(sizes)) + 1
    if sizes[best - 1] < min_area:
        return np.zeros_like(mask, dtype=bool)
    return labeled == best


# ---------------------------------------------------------------------------
# dataset persistence

_MASK_PALETTE = [0, 0, 0, 90, 160, 255, 255, 120, 120, 255, 230, 100]  # bg, lungs, heart, aorta


def image_to_png(img: np.ndarray, path: str | Path) -> None:
    """Write a (1, H, W) [-1, 1] image as 8-bit grayscale PNG (lossless on the 8-bit grid)."""
    img = np.asarray(img)
    u8 = np.round((img[0] + 1.0) * 127.5).astype(np.uint8)
    Image.fromarray(u8, mode="L").save(path, format="PNG")


def image_from_png(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        u8 = np.asarray(im.convert("L"), dtype=np.uint8)
    return (u8.astype(np.float32) / np.float32(127.5) - np.float32(1.0))[None, :, :]


def _classmap_to_png(masks: MaskSet, path: Path) -> None:
    cmap = np.zeros((masks.size, masks.size), dtype=np.uint8)
    for idx, name in enumerate(ORGAN_CLASSES, start=1):
        cmap[masks.organ_channels[name] == 1] = idx
    im = Image.fromarray(cmap, mode="P")
    im.putpalette(_MASK_PALETTE)
    im.save(path, format="PNG")


def _classmap_from_png(path: Path) -> dict:
    with Image.open(path) as im:
        cmap = np.asarray(im.convert("P"), dtype=np.uint8)
    return {name: (cmap == idx).astype(np.uint8) for idx, name in enumerate(ORGAN_CLASSES, start=1)}


@dataclass
class PhantomDataset:
    spec: PhantomSpec
    samples: list
    fingerprint: str
    path: Path | None = None

    def __len__(self):
        return len(self.samples)


def generate_dataset(spec: PhantomSpec, count: int, seed_base: int) -> list:
    """Render ``count`` samples with seeds seed_base..seed_base+count-1."""
    return [sample_phantom(seed_base + i, spec) for i in range(count)]


def write_dataset(samples: list, path: str | Path, spec: PhantomSpec, overwrite: bool = False) -> str:
    """Persist samples under ``path``; returns the dataset fingerprint.

    Takes an exclusive lock on the directory; refuses to clobber an existing
    dataset unless ``overwrite`` is set.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    with FileLock(str(path / ".lock")):
        if (path / "dataset.json").exists() and not overwrite:
            raise ConfigError(f"dataset already exists at {path} (pass overwrite to replace)")
        (path / "images").mkdir(exist_ok=True)
        (path / "masks").mkdir(exist_ok=True)
        spec_hash = spec.spec_hash()
        lines = []
        for i, sample in enumerate(samples):
            if sample.spec_hash != spec_hash:
                raise ConfigError(f"sample {i} was rendered by a different spec")
            sid = f"{i:06d}"
            image_to_png(sample.image, path / "images" / f"{sid}.png")
            _classmap_to_png(sample.masks, path / "masks" / f"{sid}.png")
            lines.append(json.dumps({
                "id": sid,
                "image": f"images/{sid}.png",
                "mask": f"masks/{sid}.png",
                "label": sample.label.name,
                "box": list(sample.masks.box) if sample.masks.box else None,
                "seed": sample.seed,
            }))
        manifest = ("\n".join(lines) + "\n").encode("utf-8")
        (path / "manifest.jsonl").write_bytes(manifest)
        fingerprint = sha256_hex(manifest)
        (path / "dataset.json").write_text(json.dumps({
            "format_version": DATASET_FORMAT_VERSION,
            "count": len(samples),
            "spec": spec.to_dict(),
            "spec_hash": spec_hash,
            "manifest_fingerprint": fingerprint,
        }, indent=2))
    return fingerprint


def read_dataset(path: str | Path) -> PhantomDataset:
    path = Path(path)
    meta_path = path / "dataset.json"
    if not meta_path.exists():
        raise DataError(f"{path} is not a phantom dataset (missing dataset.json)")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"corrupt dataset.json in {path}: {exc}") from exc
    if meta.get("format_version") != DATASET_FORMAT_VERSION:
        raise DataError(f"unsupported dataset format version {meta.get('format_version')}")
    spec = PhantomSpec.from_dict(meta["spec"])
    if spec.spec_hash() != meta["spec_hash"]:
        raise DataError("dataset spec hash mismatch (spec entry rewritten?)")
    manifest_bytes = (path / "manifest.jsonl").read_bytes()
    if sha256_hex(manifest_bytes) != meta["manifest_fingerprint"]:
        raise DataError("manifest.jsonl does not match its recorded fingerprint (truncated or edited)")
    lines = manifest_bytes.decode("utf-8").splitlines()
    if len(lines) != meta["count"]:
        raise DataError(f"manifest has {len(lines)} records, dataset.json says {meta['count']}")
    samples = []
    for line in lines:
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"corrupt manifest record: {exc}") from exc
        try:
            image = image_from_png(path / rec["image"])
            channels = _classmap_from_png(path / rec["mask"])
        except (FileNotFoundError, OSError) as exc:
            raise DataError(f"dataset file missing or unreadable: {exc}") from exc
        box = box_mask(spec.size, *rec["box"]) if rec["box"] else None
        samples.append(PhantomSample(
            image=image,
            masks=MaskSet(channels, box),
            label=label_by_name(rec["label"]),
            seed=int(rec["seed"]),
            spec_hash=meta["spec_hash"],
        ))
    return PhantomDataset(spec=spec, samples=samples, fingerprint=meta["manifest_fingerprint"], path=path)
