"""Operator command line: dataset generation, training, generation/editing,
evaluation, reporting, artifact verification, and the HTTP server.

Exit codes: 0 success, 1 validation/configuration error, 2 runtime or
training failure. Progress goes to stderr as line-delimited JSON events;
primary results go to stdout.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import checkpoints
from .config import RunConfig
from .controllers import (
    GenerationManifest,
    generate_two_stage,
    generate_with_anatomy,
    infuse_pathology,
)
from .errors import (
    CheckpointError,
    ConfigError,
    ContractError,
    DataError,
    MaskdiffError,
    ShapeError,
    TrainingError,
)
from .evaluation import MetricReport, evaluate_pipeline, render_text_table, write_report
from .labels import label_by_name
from .masks import load_mask_file, save_mask_png
from .metrics import train_eval_classifier
from .phantoms import (
    PhantomSpec,
    generate_dataset,
    image_from_png,
    image_to_png,
    read_dataset,
    sample_phantom,
    write_dataset,
)
from .runtime import load_bundle
from .util import file_fingerprint, log_event
from .vae import encode, mask_channels, train_anatomy_vae, train_ldm_vae

ENV_HOME = "MASKDIFF_HOME"

TRAIN_STAGES = ("ldm-vae", "anatomy-vae", "denoiser", "classifier")


def _default_out(name: str) -> Path:
    root = Path(os.environ.get(ENV_HOME, "maskdiff_out"))
    return root / name


def _parse_box(text: str):
    try:
        x, y, w, h = (int(v) for v in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"--box must be x,y,w,h integers, got {text!r}") from exc
    return x, y, w, h


def _config_from_args(args) -> RunConfig:
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "steps_override", None) is not None:
        overrides["schedule.T"] = args.steps_override
    return RunConfig.load(getattr(args, "config", None), overrides)


def cmd_phantom_gen(args) -> int:
    config = _config_from_args(args)
    spec = config.phantom_spec()
    count = args.count if args.count is not None else config["phantom.count"]
    seed = config["seed"]
    out = Path(args.out) if args.out else _default_out("phantoms")
    log_event("phantom_gen_start", out=str(out), count=count, seed=seed)
    samples = generate_dataset(spec, count, seed_base=seed)
    fingerprint = write_dataset(samples, out, spec, overwrite=args.overwrite)
    log_event("phantom_gen_done", out=str(out), fingerprint=fingerprint)
    print(str(out))
    return 0


def _train_output(args, stage: str) -> Path:
    if args.out:
        out = Path(args.out)
        return out / f"{stage.replace('-', '_')}.ckpt" if out.suffix == "" else out
    return _default_out("models") / f"{stage.replace('-', '_')}.ckpt"


def cmd_train(args) -> int:
    config = _config_from_args(args)
    dataset = read_dataset(args.data)
    if dataset.spec.size != config["image.size"]:
        raise ConfigError(f"dataset image size {dataset.spec.size} != config image.size {config['image.size']}")
    stage = args.stage
    seed = config["seed"]
    out = _train_output(args, stage)
    images = np.stack([s.image for s in dataset.samples])
    log_event("train_start", stage=stage, n=len(images), out=str(out))

    if stage == "ldm-vae":
        from .vae import VaeConfig

        cfg = VaeConfig(kind="ldm", image_size=dataset.spec.size,
                        latent_channels=config["image.latent_channels"],
                        base_width=config["train.ldm_vae.base_width"],
                        kl_weight=config["train.ldm_vae.kl_weight"],
                        structure_weight=config["train.ldm_vae.structure_weight"])
        ckpt = train_ldm_vae(images, cfg, epochs=config["train.ldm_vae.epochs"],
                             lr=config["train.ldm_vae.lr"], batch_size=config["train.ldm_vae.batch"],
                             seed=seed, dataset_fingerprint=dataset.fingerprint)
    elif stage == "anatomy-vae":
        from .vae import VaeConfig

        masks = np.stack([mask_channels(s.masks) for s in dataset.samples])
        cfg = VaeConfig(kind="anatomy", image_size=dataset.spec.size, in_channels=masks.shape[1],
                        latent_channels=config["image.latent_channels"],
                        base_width=config["train.anatomy_vae.base_width"],
                        kl_weight=config["train.anatomy_vae.kl_weight"], structure_weight=0.0)
        ckpt = train_anatomy_vae(masks, images, cfg, epochs=config["train.anatomy_vae.epochs"],
                                 lr=config["train.anatomy_vae.lr"],
                                 batch_size=config["train.anatomy_vae.batch"],
                                 seed=seed, dataset_fingerprint=dataset.fingerprint)
    elif stage == "denoiser":
        from .denoiser import DenoiserConfig, train_denoiser
        from .vae import VaeCheckpoint

        if not args.ldm_vae:
            raise ConfigError("--ldm-vae is required for the denoiser stage (latents are encoded with it)")
        vae = VaeCheckpoint.load(args.ldm_vae)
        sched = config.schedule()
        latents = torch.stack([encode(s.image, vae) for s in dataset.samples])
        labels = np.array([s.label.id for s in dataset.samples])
        cfg = DenoiserConfig(latent_channels=vae.config.latent_channels,
                             latent_size=vae.config.latent_size,
                             base_width=config["train.denoiser.base_width"],
                             emb_dim=config["train.denoiser.emb_dim"],
                             T=sched.T, beta_start=sched.beta_start, beta_end=sched.beta_end,
                             schedule_fingerprint=sched.fingerprint())
        ckpt = train_denoiser(latents, labels, sched, cfg,
                              epochs=config["train.denoiser.epochs"], lr=config["train.denoiser.lr"],
                              batch_size=config["train.denoiser.batch"], seed=seed,
                              label_dropout=config["train.denoiser.label_dropout"],
                              dataset_fingerprint=dataset.fingerprint)
        ckpt.metadata["ldm_vae_fingerprint"] = vae.fingerprint
    elif stage == "classifier":
        from .metrics import ClassifierConfig

        labels = np.array([s.label.id for s in dataset.samples])
        cfg = ClassifierConfig(image_size=dataset.spec.size,
                               base_width=config["train.classifier.base_width"],
                               feature_dim=config["train.classifier.feature_dim"])
        ckpt = train_eval_classifier(images, labels, cfg, epochs=config["train.classifier.epochs"],
                                     lr=config["train.classifier.lr"],
                                     batch_size=config["train.classifier.batch"], seed=seed,
                                     dataset_fingerprint=dataset.fingerprint)
    else:
        raise ConfigError(f"unknown training stage {stage!r}; choose from {TRAIN_STAGES}")

    ckpt.metadata["run_config"] = config.to_dict()
    ckpt.metadata["run_config_fingerprint"] = config.fingerprint()
    fingerprint = ckpt.save(out)
    log_event("train_done", stage=stage, out=str(out), fingerprint=fingerprint)
    print(str(out))
    return 0


def _preset_mask(name: str, image_size: int):
    if not name.startswith("phantom-"):
        raise ConfigError(f"unknown preset {name!r}; presets are named phantom-<seed>")
    try:
        seed = int(name.split("-", 1)[1])
    except ValueError as exc:
        raise ConfigError(f"bad preset name {name!r}") from exc
    spec = PhantomSpec(size=image_size)
    return sample_phantom(seed, spec).masks


def cmd_generate(args) -> int:
    config = _config_from_args(args)
    models, _, sched = load_bundle(args.models)
    image_size = models.ldm_vae.config.image_size
    out = Path(args.out) if args.out else _default_out("generate")
    out.mkdir(parents=True, exist_ok=True)

    if args.replay:
        manifest = GenerationManifest.load(args.replay)
        recorded = manifest.checkpoint_fingerprints
        current = {"ldm_vae": models.ldm_vae.fingerprint, "anatomy_vae": models.anatomy_vae.fingerprint,
                   "denoiser": models.denoiser.fingerprint}
        for name, fp in recorded.items():
            if fp and current.get(name) != fp:
                raise ConfigError(f"replay checkpoint mismatch for {name}: run used {fp[:12]}..., "
                                  f"loaded {str(current.get(name))[:12]}...")
        seed, s, label_name = manifest.seed, manifest.s, manifest.label
    else:
        seed = args.seed if args.seed is not None else config["seed"]
        s = args.s if args.s is not None else config["generate.s"]
        label_name = args.label

    if args.mask:
        mask = load_mask_file(args.mask)
    elif args.preset:
        mask = _preset_mask(args.preset, image_size)
    else:
        raise ConfigError("either --mask or --preset is required")
    if args.box is not None:
        mask = mask.with_box(_parse_box(args.box))
    if mask.size != image_size:
        raise ShapeError(f"mask size {mask.size} does not match model image size {image_size}")
    if args.replay:
        recorded_fp = manifest.mask_fingerprints.get("mask_set")
        if recorded_fp and recorded_fp != mask.fingerprint():
            raise ConfigError("replay mask fingerprint mismatch: supply the mask the manifest was made with")
    label = label_by_name(label_name)
    strict = not args.no_strict

    log_event("generate_start", mode=args.mode, label=label.name, seed=seed, s=s)
    stage1_img = None
    if args.mode == "full":
        image, manifest_out = generate_two_stage(mask, label, seed, models, sched, s=s, strict=strict)
        stage1_img, _ = generate_with_anatomy(mask, "NO_FINDING", s, seed, models, sched, strict=strict)
    elif args.mode == "anatomy":
        image, manifest_out = generate_with_anatomy(mask, label, s, seed, models, sched, strict=strict)
    elif args.mode == "infuse":
        if not args.image:
            raise ConfigError("--image is required for --mode infuse")
        base = image_from_png(args.image)
        image, manifest_out = infuse_pathology(torch.from_numpy(base), mask, label, seed, models, sched,
                                               strict=strict)
    else:
        raise ConfigError(f"unknown mode {args.mode!r}")

    image_to_png(image.numpy(), out / "image.png")
    if stage1_img is not None:
        image_to_png(stage1_img.numpy(), out / "stage1.png")
    manifest_out.outputs["image_png"] = file_fingerprint(out / "image.png")
    (out / "manifest.json").write_text(manifest_out.to_json())
    save_mask_png(mask, out / "mask_used.png")
    log_event("generate_done", out=str(out))
    print(str(out / "image.png"))
    return 0


def cmd_evaluate(args) -> int:
    config = _config_from_args(args)
    models, clf, sched = load_bundle(args.models, require_classifier=True)
    dataset = read_dataset(args.data)
    out = Path(args.out) if args.out else _default_out("evaluation")
    suite_size = args.suite_size if args.suite_size is not None else config["eval.suite_size"]
    report = evaluate_pipeline(
        dataset, models, clf, sched,
        suite_size=suite_size, seed=config["seed"], s=config["generate.s"],
        msssim_levels=config["eval.msssim_levels"],
        monotonicity_s=tuple(config["eval.monotonicity_s"]),
        blur_sigma=config["eval.blur_sigma"],
        box_sweep_positions=config["eval.box_sweep_positions"],
        run_sweeps=not args.no_sweeps,
        strict=not args.no_strict,
    )
    report.header["run_config_fingerprint"] = config.fingerprint()
    paths = write_report(report, out)
    print(render_text_table(report))
    log_event("evaluate_done", **paths)
    return 0


def cmd_report(args) -> int:
    blocks = []
    for path in args.reports:
        report = MetricReport.load(path)
        blocks.append(f"== {path}\n" + render_text_table(report))
    text = "\n\n".join(blocks)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def _verify_one(path: Path) -> list:
    problems = []
    if path.is_dir():
        if (path / "dataset.json").exists():
            dataset = read_dataset(path)  # validates manifest fingerprint and files
            log_event("verify_ok", kind="dataset", path=str(path), fingerprint=dataset.fingerprint)
        else:
            problems.append(f"{path}: directory is not a dataset")
    elif path.suffix == ".ckpt":
        kind, _, metadata, _, fingerprint = checkpoints.load_checkpoint(path)
        log_event("verify_ok", kind=kind, path=str(path), fingerprint=fingerprint,
                  config_fingerprint=metadata.get("run_config_fingerprint", ""))
    elif path.name.endswith("manifest.json"):
        manifest = GenerationManifest.load(path)
        image_path = path.parent / "image.png"
        recorded = manifest.outputs.get("image_png")
        if recorded and image_path.exists() and file_fingerprint(image_path) != recorded:
            problems.append(f"{path}: image.png does not match recorded fingerprint")
        else:
            log_event("verify_ok", kind="manifest", path=str(path), seed=manifest.seed)
    elif path.suffix == ".json":
        MetricReport.load(path)
        log_event("verify_ok", kind="report", path=str(path))
    else:
        problems.append(f"{path}: unknown artifact type")
    return problems


def cmd_verify(args) -> int:
    problems = []
    for p in args.paths:
        path = Path(p)
        if not path.exists():
            problems.append(f"{path}: does not exist")
            continue
        try:
            problems.extend(_verify_one(path))
        except MaskdiffError as exc:
            problems.append(f"{path}: {exc}")
    for problem in problems:
        print(f"FAIL {problem}", file=sys.stderr)
    if problems:
        return 1
    print(f"verified {len(args.paths)} artifact(s)")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .server import create_app

    app = create_app(args.models, workers=args.workers, request_timeout_s=args.timeout)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="maskdiff",
                                     description="Mask-guided latent diffusion for chest phantoms")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat JSON config file (dotted keys)")
        p.add_argument("--seed", type=int, help="override config seed")
        p.add_argument("--steps-override", type=int, help="override schedule.T")

    p = sub.add_parser("phantom-gen", help="render a phantom dataset")
    common(p)
    p.add_argument("--out", help="dataset directory")
    p.add_argument("--count", type=int, help="number of samples (default from config)")
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=cmd_phantom_gen)

    p = sub.add_parser("train", help="train one pipeline stage")
    common(p)
    p.add_argument("--stage", required=True, choices=TRAIN_STAGES)
    p.add_argument("--data", required=True, help="phantom dataset directory")
    p.add_argument("--out", help="checkpoint path or models directory")
    p.add_argument("--ldm-vae", help="LDM VAE checkpoint (denoiser stage)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="generate or edit an image")
    common(p)
    p.add_argument("--models", required=True, help="models directory")
    p.add_argument("--out", help="output directory")
    p.add_argument("--mask", help="mask file (.png multi-frame or .npz)")
    p.add_argument("--preset", help="stock anatomy preset, e.g. phantom-17")
    p.add_argument("--label", default="NO_FINDING")
    p.add_argument("--box", help="pathology box x,y,w,h (overrides the mask's box)")
    p.add_argument("--s", type=int, help="guided step count (default from config)")
    p.add_argument("--mode", choices=("full", "anatomy", "infuse"), default="full")
    p.add_argument("--image", help="input image PNG for --mode infuse")
    p.add_argument("--replay", help="manifest.json to reproduce")
    p.add_argument("--no-strict", action="store_true", help="downgrade schedule mismatch to a warning")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="run the evaluation suite")
    common(p)
    p.add_argument("--models", required=True)
    p.add_argument("--data", required=True, help="held-out phantom dataset directory")
    p.add_argument("--out", help="report output directory")
    p.add_argument("--suite-size", type=int)
    p.add_argument("--no-sweeps", action="store_true", help="skip sweep sections (faster)")
    p.add_argument("--no-strict", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="render metric reports as text")
    p.add_argument("reports", nargs="+")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("verify", help="re-hash artifacts and confirm fingerprints")
    p.add_argument("paths", nargs="+")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("serve", help="run the HTTP generation service")
    p.add_argument("--models", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8765)
    p.add_argument("--workers", type=int, default=2)
    p.add_argument("--timeout", type=float, default=60.0)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DataError, ShapeError, ContractError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (TrainingError, MaskdiffError, RuntimeError) as exc:
        print(f"failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
