import numpy as np
import pytest
import torch

from maskdiff.controllers import ModelBundle
from maskdiff.denoiser import CondUnet, DenoiserCheckpoint, DenoiserConfig
from maskdiff.phantoms import PhantomSpec, sample_phantom
from maskdiff.schedule import make_linear_schedule
from maskdiff.vae import VaeCheckpoint, VaeConfig, VaeModel


MICRO_SIZE = 32
MICRO_T = 10


@pytest.fixture(scope="session")
def micro_spec():
    return PhantomSpec(size=MICRO_SIZE)


@pytest.fixture(scope="session")
def micro_sched():
    return make_linear_schedule(MICRO_T, 0.0015, 0.0295)


def build_micro_bundle(sched, out_dir, seed=0):
    """Random-init micro models saved and reloaded so fingerprints are real."""
    torch.manual_seed(seed)
    ldm_cfg = VaeConfig(kind="ldm", image_size=MICRO_SIZE, base_width=8)
    ldm = VaeCheckpoint(ldm_cfg, VaeModel(ldm_cfg), {"note": "random init"})
    ldm.save(out_dir / "ldm_vae.ckpt")

    anat_cfg = VaeConfig(kind="anatomy", image_size=MICRO_SIZE, in_channels=3, base_width=8,
                         structure_weight=0.0)
    anat = VaeCheckpoint(anat_cfg, VaeModel(anat_cfg), {"note": "random init"})
    anat.save(out_dir / "anatomy_vae.ckpt")

    den_cfg = DenoiserConfig(latent_size=MICRO_SIZE // 4, base_width=8, channel_mults=(1, 2),
                             emb_dim=16, T=sched.T, schedule_fingerprint=sched.fingerprint())
    den = DenoiserCheckpoint(den_cfg, CondUnet(den_cfg), {"note": "random init"})
    den.save(out_dir / "denoiser.ckpt")

    return ModelBundle(
        ldm_vae=VaeCheckpoint.load(out_dir / "ldm_vae.ckpt"),
        anatomy_vae=VaeCheckpoint.load(out_dir / "anatomy_vae.ckpt"),
        denoiser=DenoiserCheckpoint.load(out_dir / "denoiser.ckpt"),
    )


@pytest.fixture(scope="session")
def micro_models(micro_sched, tmp_path_factory):
    return build_micro_bundle(micro_sched, tmp_path_factory.mktemp("micro_models"))


@pytest.fixture(scope="session")
def micro_sample(micro_spec):
    return sample_phantom(3, micro_spec)


def mean_dice(seg: dict, masks, organs=("lungs", "heart", "aorta")) -> float:
    from maskdiff.metrics import dice

    return float(np.mean([dice(seg[n], masks.organ_channels[n]) for n in organs]))
