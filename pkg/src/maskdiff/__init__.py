"""Mask-guided latent diffusion for synthetic chest-phantom radiographs.

Public surface: schedule math, phantom data, the two VAEs, the conditional
denoiser, the mask-guided controllers, evaluation metrics and the report
pipeline. The CLI (``maskdiff``) and the HTTP service wrap these.
"""

from .config import RunConfig
from .controllers import (
    GenerationManifest,
    ModelBundle,
    blend_masked,
    generate_two_stage,
    generate_with_anatomy,
    infuse_pathology,
)
from .denoiser import DenoiserCheckpoint, DenoiserConfig, predict_noise, train_denoiser
from .labels import DEFAULT_LABELS, NO_FINDING, PathologyLabel, label_by_id, label_by_name
from .masks import MaskSet, ORGAN_CLASSES, box_mask, downsample_mask
from .metrics import (
    ClassifierConfig,
    FeatureExtractor,
    classification_scores,
    dice,
    frechet_distance,
    ms_ssim,
    train_eval_classifier,
)
from .phantoms import (
    PhantomDataset,
    PhantomSample,
    PhantomSpec,
    generate_dataset,
    oracle_segment,
    read_dataset,
    sample_phantom,
    write_dataset,
)
from .evaluation import MetricReport, evaluate_pipeline, render_text_table, write_report
from .runtime import load_bundle
from .schedule import (
    NoiseSchedule,
    forward_diffuse,
    make_linear_schedule,
    predict_x0,
    reverse_step,
)
from .vae import VaeCheckpoint, VaeConfig, anatomy_to_proxy, decode, encode, train_anatomy_vae, train_ldm_vae

__version__ = "0.1.0"
