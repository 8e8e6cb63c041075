import json

import numpy as np
import pytest
import torch

from maskdiff.checkpoints import MAGIC, save_checkpoint
from maskdiff.errors import CheckpointError, ConfigError, ShapeError, TrainingError
from maskdiff.masks import MaskSet, ORGAN_CLASSES
from maskdiff.phantoms import PhantomSpec, generate_dataset
from maskdiff.vae import (
    VaeCheckpoint,
    VaeConfig,
    VaeModel,
    anatomy_to_proxy,
    decode,
    encode,
    mask_channels,
    train_anatomy_vae,
    train_ldm_vae,
)


@pytest.fixture(scope="module")
def corpus():
    spec = PhantomSpec(size=32)
    samples = generate_dataset(spec, 520, seed_base=0)
    images = np.stack([s.image for s in samples])
    masks = np.stack([mask_channels(s.masks) for s in samples])
    return spec, samples, images, masks


@pytest.fixture(scope="module")
def trained_ldm(corpus):
    _, _, images, _ = corpus
    cfg = VaeConfig(kind="ldm", image_size=32, base_width=8)
    return train_ldm_vae(images, cfg, epochs=2, seed=0)


class TestShapes:
    def test_encode_decode_shapes(self, micro_models):
        img = torch.zeros(1, 32, 32)
        z = encode(img, micro_models.ldm_vae)
        assert z.shape == (3, 8, 8)
        out = decode(z, micro_models.ldm_vae)
        assert out.shape == (1, 32, 32)

    def test_encode_shape_mismatch(self, micro_models):
        with pytest.raises(ShapeError):
            encode(torch.zeros(1, 16, 16), micro_models.ldm_vae)
        with pytest.raises(ShapeError):
            decode(torch.zeros(3, 4, 4), micro_models.ldm_vae)

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            VaeConfig(kind="ldm", image_size=30)
        with pytest.raises(ConfigError):
            VaeConfig(kind="nope")
        with pytest.raises(ConfigError):
            VaeConfig(kind="ldm", down_factor=8)


class TestDeterminismAndFiniteness:
    def test_encode_bit_identical(self, micro_models, micro_sample):
        a = encode(micro_sample.image, micro_models.ldm_vae)
        b = encode(micro_sample.image, micro_models.ldm_vae)
        assert torch.equal(a, b)

    def test_zero_latent_decodes_finite(self, micro_models):
        out = decode(torch.zeros(3, 8, 8), micro_models.ldm_vae)
        assert torch.isfinite(out).all()
        assert out.min() >= -1.0 and out.max() <= 1.0

    def test_sampled_encoding_differs_from_mean(self, micro_models, micro_sample):
        mean = encode(micro_sample.image, micro_models.ldm_vae)
        g = torch.Generator().manual_seed(0)
        drawn = encode(micro_sample.image, micro_models.ldm_vae, sample=True, generator=g)
        assert not torch.equal(mean, drawn)


class TestAnatomyProxy:
    def test_proxy_shape_and_determinism(self, micro_models, micro_sample):
        a = anatomy_to_proxy(micro_sample.masks, micro_models.anatomy_vae)
        b = anatomy_to_proxy(micro_sample.masks, micro_models.anatomy_vae)
        assert a.shape == (1, 32, 32)
        assert torch.equal(a, b)

    def test_all_background_mask_finite(self, micro_models):
        empty = MaskSet({n: np.zeros((32, 32), dtype=np.uint8) for n in ORGAN_CLASSES})
        out = anatomy_to_proxy(empty, micro_models.anatomy_vae)
        assert torch.isfinite(out).all()

    def test_wrong_vae_kind(self, micro_models, micro_sample):
        with pytest.raises(ConfigError):
            anatomy_to_proxy(micro_sample.masks, micro_models.ldm_vae)


class TestTraining:
    def test_too_few_images(self):
        with pytest.raises(ConfigError):
            train_ldm_vae(np.zeros((10, 1, 32, 32), dtype=np.float32), epochs=1)

    def test_empty_dataset(self):
        with pytest.raises(ConfigError):
            train_ldm_vae(np.zeros((0, 1, 32, 32), dtype=np.float32), epochs=1)

    def test_pair_count_mismatch(self):
        with pytest.raises(ConfigError, match="mismatch"):
            train_anatomy_vae(np.zeros((5, 3, 32, 32), dtype=np.float32),
                              np.zeros((4, 1, 32, 32), dtype=np.float32), epochs=1)

    def test_seeded_rerun_reproduces_loss_curve(self, corpus):
        _, _, images, _ = corpus
        cfg = VaeConfig(kind="ldm", image_size=32, base_width=8)
        a = train_ldm_vae(images, cfg, epochs=2, seed=3)
        b = train_ldm_vae(images, cfg, epochs=2, seed=3)
        assert a.metadata["loss_curve"] == b.metadata["loss_curve"]
        assert a.metadata["val_recon_mse"] == b.metadata["val_recon_mse"]

    def test_reconstruction_below_stored_floor(self, corpus, trained_ldm):
        spec, samples, images, _ = corpus
        fresh = generate_dataset(spec, 8, seed_base=9000)
        mses = []
        for s in fresh:
            recon = decode(encode(s.image, trained_ldm), trained_ldm)
            mses.append(float(((recon - torch.from_numpy(s.image)) ** 2).mean()))
        assert float(np.mean(mses)) <= trained_ldm.metadata["recon_floor"]

    def test_latent_roundtrip_below_floor(self, corpus, trained_ldm):
        spec, _, images, _ = corpus
        fresh = generate_dataset(spec, 8, seed_base=9100)
        errs = []
        for s in fresh:
            z = encode(s.image, trained_ldm)
            z2 = encode(decode(z, trained_ldm), trained_ldm)
            errs.append(float(((z2 - z) ** 2).mean()))
        assert float(np.mean(errs)) <= trained_ldm.metadata["latent_floor"]

    def test_divergence_aborts(self, corpus):
        _, _, images, _ = corpus
        cfg = VaeConfig(kind="ldm", image_size=32, base_width=8, kl_weight=1e6)
        with pytest.raises(TrainingError):
            train_ldm_vae(images, cfg, epochs=3, lr=1e6, seed=0)


class TestCheckpointIo:
    def test_save_load_identical_outputs(self, micro_models, micro_sample, tmp_path):
        vae = micro_models.ldm_vae
        vae.save(tmp_path / "v.ckpt")
        back = VaeCheckpoint.load(tmp_path / "v.ckpt")
        assert back.fingerprint == vae.fingerprint
        assert torch.equal(encode(micro_sample.image, back), encode(micro_sample.image, vae))

    def test_config_mismatch_rejected(self, tmp_path):
        cfg = VaeConfig(kind="ldm", image_size=32, base_width=8)
        torch.manual_seed(0)
        model = VaeModel(cfg)
        tensors = {k: v.detach().numpy() for k, v in model.state_dict().items()}
        lying = dict(cfg.__dict__)
        lying["base_width"] = 16  # claims widths the tensors do not have
        save_checkpoint(tmp_path / "bad.ckpt", "vae_ldm", lying, {}, tensors)
        with pytest.raises(CheckpointError):
            VaeCheckpoint.load(tmp_path / "bad.ckpt")

    def test_wrong_kind_rejected(self, tmp_path):
        save_checkpoint(tmp_path / "c.ckpt", "classifier", {}, {}, {"w": np.ones(3, dtype=np.float32)})
        with pytest.raises(CheckpointError):
            VaeCheckpoint.load(tmp_path / "c.ckpt")
