"""End-to-end quantitative evaluation over a held-out phantom suite.

For every suite item the two-stage pipeline regenerates an image from the
item's anatomy mask, pathology box and label; the report aggregates

  * MS-SSIM against the reference phantom (realism proxy), for the guided
    pipeline and for an unconditional baseline (s = 0, no guidance),
  * mean oracle Dice between segmented organs of the generated image and the
    input anatomy mask,
  * macro F1/AUC of the evaluation classifier against the intended labels,
  * Fréchet distance between classifier features of generated and real sets
    (with a real-vs-real control),
  * guidance-strength sweep (Dice as a function of s),
  * editing locality (inside-box vs outside-box change) and pathology
    removal success on lesioned items,
  * the Fréchet/Dice dissociation demonstration: an organ-scrambled set
    scores a *lower* Fréchet distance than a blurred-but-anatomically-correct
    set while being drastically worse anatomically, so distribution distance
    alone cannot certify realism.

Per-item seeds are derived from the base seed; the whole report is
deterministic given (suite, checkpoints, config).
"""
from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from .controllers import ModelBundle, generate_with_anatomy, infuse_pathology
from .errors import ConfigError
from .labels import NO_FINDING, OPACITY_LEFT_LUNG, OPACITY_RIGHT_LUNG, label_by_name
from .masks import ORGAN_CLASSES, MaskSet, box_mask
from .metrics import FeatureExtractor, classification_scores, dice, frechet_distance, ms_ssim
from .phantoms import PhantomDataset, oracle_segment, sample_phantom_scrambled
from .schedule import NoiseSchedule
from .util import log_event
from .vae import decode, encode


@dataclass
class ReportRow:
    name: str
    n: int
    ms_ssim: float
    frechet: float
    dice_mean: float
    dice_per_organ: dict
    f1_macro: float
    auc_macro: float | None


@dataclass
class MetricReport:
    header: dict
    rows: list
    controls: dict = field(default_factory=dict)
    monotonicity: dict = field(default_factory=dict)
    locality: dict = field(default_factory=dict)
    dissociation: dict = field(default_factory=dict)
    box_sweep: dict = field(default_factory=dict)
    sanity: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        rows = [ReportRow(**r) for r in d.pop("rows")]
        return cls(rows=rows, **d)

    @classmethod
    def load(cls, path) -> "MetricReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _mean_organ_dice(image, masks: MaskSet, spec) -> tuple[float, dict]:
    seg = oracle_segment(image, spec)
    per = {organ: dice(seg[organ], masks.organ_channels[organ]) for organ in ORGAN_CLASSES}
    return float(np.mean(list(per.values()))), per


def _item_seed(base: int, index: int, salt: int = 0) -> int:
    return int(base) + 100_003 * (index + 1) + salt


def evaluate_pipeline(eval_dataset: PhantomDataset, models: ModelBundle, clf: FeatureExtractor,
                      sched: NoiseSchedule, *, suite_size: int = 200, seed: int = 0, s: int = 50,
                      msssim_levels: int = 3, monotonicity_s=(0, 10, 25, 50), blur_sigma: float = 2.5,
                      box_sweep_positions: int = 4, run_sweeps: bool = True,
                      strict: bool = True) -> MetricReport:
    spec = eval_dataset.spec
    samples = eval_dataset.samples
    if len(samples) < suite_size + 4:
        raise ConfigError(f"eval dataset has {len(samples)} samples; need > suite_size={suite_size}")
    suite = samples[:suite_size]
    reference_pool = samples[suite_size:]

    t_start = time.time()
    gen_images, stage1_images = [], []
    msssim_gen, dice_gen, dice_stage1 = [], [], []
    per_organ_acc = {organ: [] for organ in ORGAN_CLASSES}
    locality_inside, locality_outside = [], []
    union_fractions, anatomy_preservation = [], []

    for i, item in enumerate(suite):
        seed_i = _item_seed(seed, i)
        stage1, _ = generate_with_anatomy(item.masks, NO_FINDING, s, seed_i, models, sched, strict=strict)
        final, _ = infuse_pathology(stage1, item.masks, item.label, seed_i + 1, models, sched, strict=strict)
        gen = final.numpy()
        gen_images.append(gen)
        stage1_images.append(stage1.numpy())

        msssim_gen.append(ms_ssim(gen, item.image, levels=msssim_levels))
        d_mean, per = _mean_organ_dice(gen, item.masks, spec)
        dice_gen.append(d_mean)
        for organ, value in per.items():
            per_organ_acc[organ].append(value)
        d1, _ = _mean_organ_dice(stage1.numpy(), item.masks, spec)
        dice_stage1.append(d1)

        seg_union = np.zeros(gen.shape[-2:], dtype=bool)
        seg = oracle_segment(gen, spec)
        for organ in ORGAN_CLASSES:
            seg_union |= seg[organ].astype(bool)
        union_fractions.append(float(seg_union.mean()))

        # pathology infusion must not rewrite the anatomy laid down in stage 1
        seg_stage1 = oracle_segment(stage1.numpy(), spec)
        anatomy_preservation.append(float(np.mean([dice(seg[o], seg_stage1[o]) for o in ORGAN_CLASSES])))

        if item.label != NO_FINDING and item.masks.box is not None:
            roundtrip = decode(encode(stage1, models.ldm_vae), models.ldm_vae).numpy()
            delta = np.abs(gen - roundtrip)[0]
            box = item.masks.pathology_box.astype(bool)
            locality_inside.append(float(delta[box].mean()))
            locality_outside.append(float(delta[~box].mean()))
        if (i + 1) % 25 == 0:
            log_event("eval_progress", phase="suite", done=i + 1, total=suite_size)

    # unconditional baseline (s = 0; anatomy guidance disabled)
    uncond_images, msssim_uncond, dice_uncond = [], [], []
    for i, item in enumerate(suite):
        img, _ = generate_with_anatomy(item.masks, NO_FINDING, 0, _item_seed(seed, i, salt=7), models, sched,
                                       strict=strict)
        uncond_images.append(img.numpy())
        msssim_uncond.append(ms_ssim(img.numpy(), item.image, levels=msssim_levels))
        d_mean, _ = _mean_organ_dice(img.numpy(), item.masks, spec)
        dice_uncond.append(d_mean)
    log_event("eval_progress", phase="unconditional", done=suite_size, total=suite_size)

    # classifier scores against intended labels
    labels = np.array([item.label.id for item in suite])
    cls_gen = classification_scores(np.stack(gen_images), labels, clf)
    cls_uncond = classification_scores(np.stack(uncond_images), labels, clf)

    # Fréchet rows and controls
    real_feats = clf.features(np.stack([r.image for r in reference_pool]))
    half = len(reference_pool) // 2
    gen_feats = clf.features(np.stack(gen_images))
    uncond_feats = clf.features(np.stack(uncond_images))
    fd_gen = frechet_distance(real_feats, gen_feats)
    fd_uncond = frechet_distance(real_feats, uncond_feats)
    fd_real_real = frechet_distance(real_feats[:half], real_feats[half:])

    rows = [
        ReportRow(name="two_stage_guided", n=suite_size,
                  ms_ssim=float(np.mean(msssim_gen)), frechet=fd_gen,
                  dice_mean=float(np.mean(dice_gen)),
                  dice_per_organ={o: float(np.mean(v)) for o, v in per_organ_acc.items()},
                  f1_macro=cls_gen.f1_macro, auc_macro=cls_gen.auc_macro),
        ReportRow(name="unconditional", n=suite_size,
                  ms_ssim=float(np.mean(msssim_uncond)), frechet=fd_uncond,
                  dice_mean=float(np.mean(dice_uncond)), dice_per_organ={},
                  f1_macro=cls_uncond.f1_macro, auc_macro=cls_uncond.auc_macro),
    ]

    controls = {
        "frechet_real_vs_real": fd_real_real,
        "frechet_real_vs_unconditional": fd_uncond,
        "real_vs_real_ratio": fd_real_real / fd_uncond if fd_uncond > 0 else None,
    }

    report = MetricReport(
        header={
            "suite_size": suite_size,
            "seed": seed,
            "s": s,
            "schedule": sched.params(),
            "spec_hash": spec.spec_hash(),
            "dataset_fingerprint": eval_dataset.fingerprint,
            "classifier_fingerprint": clf.fingerprint or "",
            "checkpoint_fingerprints": {
                "ldm_vae": models.ldm_vae.fingerprint or "",
                "anatomy_vae": models.anatomy_vae.fingerprint or "",
                "denoiser": models.denoiser.fingerprint or "",
            },
            "conventions": "F1 threshold 0.5; macro over pathology classes (NO_FINDING excluded); "
                           "empty-vs-empty Dice = 1.0; Frechet eps 1e-6",
            "msssim_levels": msssim_levels,
        },
        rows=rows,
        controls=controls,
        locality={
            "inside_box_mean_change": float(np.mean(locality_inside)) if locality_inside else None,
            "outside_box_mean_change": float(np.mean(locality_outside)) if locality_outside else None,
            "outside_over_inside": (float(np.mean(locality_outside)) / float(np.mean(locality_inside))
                                    if locality_inside else None),
            "n_items": len(locality_inside),
            "anatomy_preservation_dice": float(np.mean(anatomy_preservation)),
        },
        sanity={
            "union_fraction_min": float(np.min(union_fractions)),
            "union_fraction_max": float(np.max(union_fractions)),
            "union_fraction_violations": int(sum(1 for f in union_fractions if not 0.02 <= f <= 0.60)),
        },
        monotonicity={"dice_by_s": {str(0): float(np.mean(dice_uncond)), str(s): float(np.mean(dice_stage1))}},
    )

    for value in (report.rows[0].ms_ssim, report.rows[0].frechet, report.rows[0].dice_mean,
                  report.rows[0].f1_macro):
        if value is None or not np.isfinite(value):
            raise ConfigError(f"non-finite metric in report: {report.rows[0]}")

    if run_sweeps:
        _run_monotonicity_sweep(report, suite, models, sched, spec, seed, monotonicity_s, s, strict)
        _run_removal(report, suite, models, sched, clf, seed, strict)
        _run_dissociation(report, reference_pool, real_feats, clf, spec, blur_sigma)
        _run_box_sweep(report, suite, stage1_images, models, sched, spec, seed, box_sweep_positions, strict)

    log_event("eval_done", seconds=round(time.time() - t_start, 1))
    return report


def _run_monotonicity_sweep(report, suite, models, sched, spec, seed, monotonicity_s, s_main, strict):
    """Mean stage-1 Dice as a function of guided step count (same seeds per s)."""
    dice_by_s = dict(report.monotonicity.get("dice_by_s", {}))
    for s_val in monotonicity_s:
        if str(s_val) in dice_by_s:
            continue
        values = []
        for i, item in enumerate(suite):
            img, _ = generate_with_anatomy(item.masks, NO_FINDING, s_val, _item_seed(seed, i), models,
                                           sched, strict=strict)
            d, _ = _mean_organ_dice(img.numpy(), item.masks, spec)
            values.append(d)
        dice_by_s[str(s_val)] = float(np.mean(values))
        log_event("eval_progress", phase="monotonicity", s=s_val, dice=dice_by_s[str(s_val)])
    report.monotonicity["dice_by_s"] = dice_by_s
    report.monotonicity["s_values"] = sorted(int(k) for k in dice_by_s)


def _run_removal(report, suite, models, sched, clf, seed, strict):
    """Remove real lesions by NO_FINDING inpainting; classifier score must drop."""
    class_names = clf.config.class_names
    removed_scores, before_scores, successes = [], [], 0
    cardio = {"n": 0, "removed_scores": []}
    n = 0
    for i, item in enumerate(suite):
        if item.masks.box is None or item.label == NO_FINDING:
            continue
        target = class_names.index(item.label.name)
        removed, _ = infuse_pathology(torch.from_numpy(item.image), item.masks, NO_FINDING,
                                      _item_seed(seed, i, salt=13), models, sched, strict=strict)
        after = float(clf.scores(removed.numpy()[None])[0, target])
        before = float(clf.scores(item.image[None])[0, target])
        if item.label.name == "CARDIOMEGALY":
            cardio["n"] += 1
            cardio["removed_scores"].append(after)
            continue  # geometric finding:箱-inpainting removal tracked as informational only
        n += 1
        removed_scores.append(after)
        before_scores.append(before)
        if after < 0.3:
            successes += 1
    report.locality.update({
        "removal_n": n,
        "removal_success_rate": successes / n if n else None,
        "removal_mean_score_before": float(np.mean(before_scores)) if before_scores else None,
        "removal_mean_score_after": float(np.mean(removed_scores)) if removed_scores else None,
        "cardiomegaly_removal_mean_score": (float(np.mean(cardio["removed_scores"]))
                                            if cardio["removed_scores"] else None),
        "cardiomegaly_removal_n": cardio["n"],
    })
    log_event("eval_progress", phase="removal", n=n, success_rate=report.locality["removal_success_rate"])


def _run_dissociation(report, reference_pool, real_feats, clf, spec, blur_sigma):
    """Organ-scrambled vs blurred-but-correct: Fréchet must invert the Dice order."""
    sources = reference_pool[: min(200, len(reference_pool))]
    scrambled_imgs, blurred_imgs = [], []
    dice_scrambled, dice_blurred = [], []
    for item in sources:
        twin = sample_phantom_scrambled(item.seed, spec)
        scrambled_imgs.append(twin.image)
        d, _ = _mean_organ_dice(twin.image, item.masks, spec)
        dice_scrambled.append(d)
        blurred = ndimage.gaussian_filter(item.image[0].astype(np.float64), blur_sigma)
        blurred_imgs.append(blurred.astype(np.float32)[None])
        d, _ = _mean_organ_dice(blurred_imgs[-1], item.masks, spec)
        dice_blurred.append(d)
    fd_scrambled = frechet_distance(real_feats, clf.features(np.stack(scrambled_imgs)))
    fd_blurred = frechet_distance(real_feats, clf.features(np.stack(blurred_imgs)))
    report.dissociation.update({
        "n": len(sources),
        "blur_sigma": blur_sigma,
        "frechet_scrambled": fd_scrambled,
        "frechet_blurred": fd_blurred,
        "dice_scrambled": float(np.mean(dice_scrambled)),
        "dice_blurred": float(np.mean(dice_blurred)),
        "dissociation_exposed": bool(fd_scrambled < fd_blurred
                                     and np.mean(dice_scrambled) <= np.mean(dice_blurred) - 0.3),
    })
    log_event("eval_progress", phase="dissociation", **{k: v for k, v in report.dissociation.items() if k != "n"})


def _right_lung_box_positions(masks: MaskSet, count: int, box_w: int, box_h: int):
    """Vertically spread boxes inside the right (image-side) lung."""
    size = masks.size
    lungs = masks.organ_channels["lungs"].astype(bool)
    right = lungs & (np.arange(size)[None, :] >= size // 2)
    ys, xs = np.nonzero(right)
    if ys.size == 0:
        return []
    cx = int(np.clip(np.median(xs) - box_w // 2, 0, size - box_w))
    y_lo, y_hi = int(ys.min()), int(ys.max() - box_h)
    if y_hi <= y_lo:
        return []
    return [(cx, int(round(y)), box_w, box_h)
            for y in np.linspace(y_lo, y_hi, count)]


def _run_box_sweep(report, suite, stage1_images, models, sched, spec, seed, positions, strict):
    """Move the pathology box vertically; the image response must follow it."""
    idx = next((i for i, item in enumerate(suite) if item.label == NO_FINDING), None)
    if idx is None:
        report.box_sweep.update({"n": 0})
        return
    item = suite[idx]
    base_image = torch.from_numpy(stage1_images[idx])
    size = item.masks.size
    box_w = box_h = max(8, int(round(size * 0.19)))
    entries = []
    roundtrip = decode(encode(base_image, models.ldm_vae), models.ldm_vae).numpy()
    for j, box in enumerate(_right_lung_box_positions(item.masks, positions, box_w, box_h)):
        masked = item.masks.with_box(box)
        out, _ = infuse_pathology(base_image, masked, OPACITY_RIGHT_LUNG,
                                  _item_seed(seed, idx, salt=17 + j), models, sched, strict=strict)
        delta = np.abs(out.numpy() - roundtrip)[0]
        total = float(delta.sum())
        yy, xx = np.mgrid[0:size, 0:size]
        cy = float((delta * yy).sum() / total)
        cx = float((delta * xx).sum() / total)
        box_cy, box_cx = box[1] + box_h / 2.0, box[0] + box_w / 2.0
        entries.append({
            "box": list(box),
            "response_centroid": [cx, cy],
            "box_centroid": [box_cx, box_cy],
            "centroid_distance": float(np.hypot(cx - box_cx, cy - box_cy)),
            "vertical_offset": abs(cy - box_cy),
        })
    report.box_sweep.update({
        "n": len(entries),
        "box_size": [box_w, box_h],
        "entries": entries,
        "max_vertical_offset": max((e["vertical_offset"] for e in entries), default=None),
        "follows_box": bool(entries) and all(e["vertical_offset"] <= box_h for e in entries),
    })
    log_event("eval_progress", phase="box_sweep", n=len(entries),
              follows_box=report.box_sweep.get("follows_box"))


# ---------------------------------------------------------------------------
# report rendering


def render_text_table(report: MetricReport) -> str:
    lines = []
    lines.append("Model                 MS-SSIM^   Frechet_d  Dice^    F1^      AUC^       n")
    for row in report.rows:
        auc = f"{row.auc_macro:8.3f}" if row.auc_macro is not None else "     n/a"
        lines.append(f"{row.name:<20}  {row.ms_ssim:8.3f}  {row.frechet:9.3f}  {row.dice_mean:6.3f}  "
                     f"{row.f1_macro:7.3f}  {auc}  {row.n:5d}")
    lines.append("")
    if report.controls:
        lines.append(f"control: Frechet(real half A, real half B) = {report.controls['frechet_real_vs_real']:.4f}"
                     f"  (vs unconditional {report.controls['frechet_real_vs_unconditional']:.4f})")
    if report.monotonicity.get("dice_by_s"):
        pairs = sorted(report.monotonicity["dice_by_s"].items(), key=lambda kv: int(kv[0]))
        lines.append("guidance sweep: " + "  ".join(f"s={k}: {v:.3f}" for k, v in pairs))
    if report.locality.get("outside_over_inside") is not None:
        lines.append(f"editing locality: outside/inside change = {report.locality['outside_over_inside']:.4f}"
                     f"  removal success = {report.locality.get('removal_success_rate')}")
    if report.dissociation:
        d = report.dissociation
        lines.append(f"dissociation: Frechet scrambled {d['frechet_scrambled']:.3f} vs blurred "
                     f"{d['frechet_blurred']:.3f}; Dice {d['dice_scrambled']:.3f} vs {d['dice_blurred']:.3f}"
                     f" -> exposed={d['dissociation_exposed']}")
    lines.append("")
    lines.append(report.header["conventions"])
    return "\n".join(lines)


def write_report(report: MetricReport, out_dir: str | Path) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "json": out_dir / "report.json",
        "txt": out_dir / "report.txt",
        "csv": out_dir / "report_rows.csv",
    }
    paths["json"].write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    paths["txt"].write_text(render_text_table(report) + "\n")
    with open(paths["csv"], "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["model", "n", "ms_ssim", "frechet", "dice_mean", "f1_macro", "auc_macro"])
        for row in report.rows:
            writer.writerow([row.name, row.n, row.ms_ssim, row.frechet, row.dice_mean,
                             row.f1_macro, row.auc_macro])
    return {k: str(v) for k, v in paths.items()}
