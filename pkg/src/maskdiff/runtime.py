"""Loading trained checkpoints into a ready-to-sample bundle."""
from __future__ import annotations

from pathlib import Path

from .controllers import ModelBundle
from .denoiser import DenoiserCheckpoint
from .errors import CheckpointError
from .metrics import FeatureExtractor
from .schedule import NoiseSchedule, make_linear_schedule
from .vae import VaeCheckpoint

BUNDLE_FILES = {
    "ldm_vae": "ldm_vae.ckpt",
    "anatomy_vae": "anatomy_vae.ckpt",
    "denoiser": "denoiser.ckpt",
    "classifier": "classifier.ckpt",
}


def schedule_for(denoiser: DenoiserCheckpoint) -> NoiseSchedule:
    """Rebuild the schedule a denoiser was trained with (checkpoint is the source of truth)."""
    cfg = denoiser.config
    sched = make_linear_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
    if cfg.schedule_fingerprint and sched.fingerprint() != cfg.schedule_fingerprint:
        raise CheckpointError("denoiser checkpoint schedule params do not match its fingerprint")
    return sched


def load_bundle(models_dir: str | Path, require_classifier: bool = False):
    """Load (ModelBundle, classifier-or-None, NoiseSchedule) from a models directory."""
    models_dir = Path(models_dir)
    missing = [name for name, fname in BUNDLE_FILES.items()
               if name != "classifier" and not (models_dir / fname).exists()]
    if missing:
        raise CheckpointError(f"models directory {models_dir} is missing checkpoints: {missing}")
    bundle = ModelBundle(
        ldm_vae=VaeCheckpoint.load(models_dir / BUNDLE_FILES["ldm_vae"]),
        anatomy_vae=VaeCheckpoint.load(models_dir / BUNDLE_FILES["anatomy_vae"]),
        denoiser=DenoiserCheckpoint.load(models_dir / BUNDLE_FILES["denoiser"]),
    )
    clf_path = models_dir / BUNDLE_FILES["classifier"]
    classifier = None
    if clf_path.exists():
        classifier = FeatureExtractor.load(clf_path)
    elif require_classifier:
        raise CheckpointError(f"models directory {models_dir} is missing {BUNDLE_FILES['classifier']}")
    if bundle.ldm_vae.config.image_size != bundle.anatomy_vae.config.image_size:
        raise CheckpointError("LDM and anatomy VAEs disagree on image size")
    if bundle.denoiser.config.latent_size != bundle.ldm_vae.config.latent_size:
        raise CheckpointError("denoiser latent size does not match the LDM VAE")
    return bundle, classifier, schedule_for(bundle.denoiser)
