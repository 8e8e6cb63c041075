"""Quantitative evaluation primitives.

Implements multi-scale SSIM, the Fréchet distance between Gaussian feature
fits, the Dice overlap coefficient, macro F1/AUC for multi-label pathology
classification, and the small CNN whose penultimate activations provide the
feature space for the Fréchet score.

Conventions fixed here (also recorded in report headers): F1 threshold 0.5,
macro averaging over pathology classes (NO_FINDING excluded), degenerate
single-class AUCs skipped and flagged, empty-vs-empty Dice = 1.0, covariance
regularization eps = 1e-6 for the Fréchet distance.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy.ndimage import correlate1d
from scipy.stats import rankdata
from torch import nn

from .checkpoints import load_checkpoint, save_checkpoint
from .errors import CheckpointError, ConfigError, ShapeError, TrainingError
from .labels import PATHOLOGY_NAMES
from .util import log_event

# conventional five-level MS-SSIM weights; the first `levels` are renormalized
_MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
_WIN_SIZE = 11
_WIN_SIGMA = 1.5

FRECHET_EPS = 1e-6


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    w = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return w / w.sum()


def _filter_valid(img: np.ndarray, window: np.ndarray) -> np.ndarray:
    r = len(window) // 2
    out = correlate1d(img, window, axis=0, mode="constant")
    out = correlate1d(out, window, axis=1, mode="constant")
    return out[r:-r, r:-r]


def _ssim_maps(a: np.ndarray, b: np.ndarray, data_range: float):
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    win = _gaussian_window(_WIN_SIZE, _WIN_SIGMA)
    mu_a = _filter_valid(a, win)
    mu_b = _filter_valid(b, win)
    var_a = _filter_valid(a * a, win) - mu_a * mu_a
    var_b = _filter_valid(b * b, win) - mu_b * mu_b
    cov = _filter_valid(a * b, win) - mu_a * mu_b
    luminance = (2 * mu_a * mu_b + c1) / (mu_a**2 + mu_b**2 + c1)
    contrast_structure = (2 * cov + c2) / (var_a + var_b + c2)
    return luminance, contrast_structure


def _downsample2(img: np.ndarray) -> np.ndarray:
    h, w = img.shape
    img = img[: h - h % 2, : w - w % 2]
    return 0.25 * (img[0::2, 0::2] + img[1::2, 0::2] + img[0::2, 1::2] + img[1::2, 1::2])


def ms_ssim(a, b, levels: int = 3, data_range: float = 2.0) -> float:
    """Multi-scale SSIM in [0, 1]; symmetric in (a, b).

    Gaussian window 11x1.5, valid convolution, conventional level weights
    renormalized to the requested level count, negative contrast-structure
    responses clamped to zero, 2x2 mean-pool between scales.
    """
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.ndim == 3:
        x = x[0]
    if y.ndim == 3:
        y = y[0]
    if x.shape != y.shape:
        raise ShapeError(f"image shapes differ: {x.shape} vs {y.shape}")
    if not 1 <= levels <= len(_MSSSIM_WEIGHTS):
        raise ConfigError(f"levels must be in 1..{len(_MSSSIM_WEIGHTS)}")
    if min(x.shape) // (2 ** (levels - 1)) < _WIN_SIZE:
        raise ConfigError(f"image {x.shape} too small for {levels} levels with an {_WIN_SIZE}px window")
    weights = np.asarray(_MSSSIM_WEIGHTS[:levels])
    weights = weights / weights.sum()
    value = 1.0
    for level in range(levels):
        luminance, cs = _ssim_maps(x, y, data_range)
        cs_mean = float(np.maximum(cs, 0.0).mean())
        if level == levels - 1:
            lcs_mean = float(np.maximum(luminance * cs, 0.0).mean())
            value *= lcs_mean ** weights[level]
        else:
            value *= cs_mean ** weights[level]
            x, y = _downsample2(x), _downsample2(y)
    return float(value)


def _psd_sqrt(matrix: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((matrix + matrix.T) / 2.0)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(feats_a, feats_b, eps: float = FRECHET_EPS) -> float:
    """Fréchet distance between Gaussian fits of two feature sets.

    ||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^{1/2}); the matrix square root is
    taken through the symmetrized PSD product with negative eigenvalues
    clipped at zero. Covariances always receive eps * I regularization.
    """
    a = np.asarray(feats_a, dtype=np.float64)
    b = np.asarray(feats_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("feature sets must be 2-D (n_samples, dim)")
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"feature dims differ: {a.shape[1]} vs {b.shape[1]}")
    if len(a) < 2 or len(b) < 2:
        raise ConfigError("need at least 2 samples per feature set")
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    dim = a.shape[1]
    cov_a = np.cov(a, rowvar=False).reshape(dim, dim) + eps * np.eye(dim)
    cov_b = np.cov(b, rowvar=False).reshape(dim, dim) + eps * np.eye(dim)
    sqrt_a = _psd_sqrt(cov_a)
    cross = _psd_sqrt(sqrt_a @ cov_b @ sqrt_a)
    diff = mu_a - mu_b
    value = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(cross))
    return max(value, 0.0)


def dice(mask_a, mask_b) -> float:
    """2|A∩B| / (|A| + |B|); defined as 1.0 when both masks are empty."""
    a = np.asarray(mask_a)
    b = np.asarray(mask_b)
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    if not (np.isin(a, (0, 1)).all() and np.isin(b, (0, 1)).all()):
        raise ConfigError("dice requires exactly {0,1}-valued masks")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a.astype(bool) & b.astype(bool)).sum()) / total


def binary_auc(scores, labels):
    """Mann-Whitney AUC with tie handling; None when only one class is present."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(s)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def binary_f1(predictions, labels) -> float:
    p = np.asarray(predictions).astype(bool)
    y = np.asarray(labels).astype(bool)
    tp = int((p & y).sum())
    denom = 2 * tp + int((p & ~y).sum()) + int((~p & y).sum())
    return 1.0 if denom == 0 else 2.0 * tp / denom


# ---------------------------------------------------------------------------
# evaluation classifier


@dataclass(frozen=True)
class ClassifierConfig:
    image_size: int = 64
    base_width: int = 16
    feature_dim: int = 64
    class_names: tuple[str, ...] = PATHOLOGY_NAMES


class SmallCnn(nn.Module):
    """Three stride-2 conv stages, global average pool, 64-d feature layer."""

    def __init__(self, config: ClassifierConfig):
        super().__init__()
        b = config.base_width
        self.trunk = nn.Sequential(
            nn.Conv2d(1, b, 3, stride=2, padding=1), nn.GroupNorm(min(8, b), b), nn.SiLU(),
            nn.Conv2d(b, 2 * b, 3, stride=2, padding=1), nn.GroupNorm(8, 2 * b), nn.SiLU(),
            nn.Conv2d(2 * b, 4 * b, 3, stride=2, padding=1), nn.GroupNorm(8, 4 * b), nn.SiLU(),
        )
        self.feature_proj = nn.Linear(4 * b, config.feature_dim)
        self.head = nn.Linear(config.feature_dim, len(config.class_names))

    def features(self, x: torch.Tensor) -> torch.Tensor:
        h = self.trunk(x).mean(dim=(2, 3))
        return F.silu(self.feature_proj(h))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))


class FeatureExtractor:
    """Trained classifier used for pathology scoring and Fréchet features."""

    def __init__(self, config: ClassifierConfig, model: SmallCnn, metadata: dict, fingerprint: str | None = None):
        self.config = config
        self.model = model.eval()
        for p in self.model.parameters():
            p.requires_grad_(False)
        self.metadata = dict(metadata)
        self.fingerprint = fingerprint

    def _batches(self, images, batch_size=128):
        x = images.float() if isinstance(images, torch.Tensor) else torch.from_numpy(np.asarray(images)).float()
        if x.ndim != 4 or x.shape[1] != 1 or x.shape[2] != self.config.image_size:
            raise ShapeError(f"images must be (N, 1, {self.config.image_size}, {self.config.image_size})")
        for start in range(0, len(x), batch_size):
            yield x[start : start + batch_size]

    def features(self, images) -> np.ndarray:
        with torch.no_grad():
            return np.concatenate([self.model.features(b).numpy() for b in self._batches(images)])

    def scores(self, images) -> np.ndarray:
        """Per-class sigmoid probabilities, shape (N, n_classes)."""
        with torch.no_grad():
            return np.concatenate([torch.sigmoid(self.model(b)).numpy() for b in self._batches(images)])

    def save(self, path) -> str:
        config = asdict(self.config)
        config["class_names"] = list(self.config.class_names)
        tensors = {k: v.detach().cpu().numpy() for k, v in self.model.state_dict().items()}
        self.fingerprint = save_checkpoint(path, "classifier", config, self.metadata, tensors)
        return self.fingerprint

    @classmethod
    def load(cls, path) -> "FeatureExtractor":
        kind, config_dict, metadata, tensors, fingerprint = load_checkpoint(path)
        if kind != "classifier":
            raise CheckpointError(f"{path} holds a {kind!r} checkpoint, not a classifier")
        config_dict["class_names"] = tuple(config_dict["class_names"])
        config = ClassifierConfig(**config_dict)
        torch.manual_seed(0)
        model = SmallCnn(config)
        try:
            model.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()}, strict=True)
        except RuntimeError as exc:
            raise CheckpointError(f"checkpoint {path} does not match its config: {exc}") from exc
        return cls(config, model, metadata, fingerprint)


def multi_hot(label_ids, n_classes: int) -> np.ndarray:
    """Label ids (0 = NO_FINDING) -> multi-hot pathology targets (N, n_classes)."""
    ids = np.asarray(label_ids, dtype=np.int64)
    y = np.zeros((len(ids), n_classes), dtype=np.float32)
    rows = np.nonzero(ids > 0)[0]
    y[rows, ids[rows] - 1] = 1.0
    return y


_BLUR_SIGMAS = (0.5, 1.0)


def _blur_kernel(sigma: float) -> torch.Tensor:
    x = torch.arange(5, dtype=torch.float32) - 2.0
    w = torch.exp(-(x * x) / (2 * sigma * sigma))
    w = w / w.sum()
    return (w[:, None] * w[None, :]).reshape(1, 1, 5, 5)


def train_eval_classifier(images, label_ids, config: ClassifierConfig | None = None, *,
                          epochs: int = 12, lr: float = 1e-3, batch_size: int = 32, seed: int = 0,
                          augment: bool = True, val_fraction: float = 0.1,
                          dataset_fingerprint: str = "") -> FeatureExtractor:
    """Multi-label BCE training with light noise/blur augmentation.

    Augmentation keeps the scores meaningful on decoder-smoothed generated
    images, not just on crisp renders.
    """
    x_all = images.float() if isinstance(images, torch.Tensor) else torch.from_numpy(np.asarray(images)).float()
    ids = np.asarray(label_ids, dtype=np.int64)
    if len(x_all) == 0:
        raise ConfigError("classifier training set is empty")
    if len(ids) != len(x_all):
        raise ConfigError(f"images/labels disagree: {len(x_all)} vs {len(ids)}")
    if config is None:
        config = ClassifierConfig(image_size=x_all.shape[-1])
    y_all = torch.from_numpy(multi_hot(ids, len(config.class_names)))

    torch.manual_seed(seed)
    model = SmallCnn(config)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    g = torch.Generator().manual_seed(seed)
    kernels = [_blur_kernel(s) for s in _BLUR_SIGMAS]

    n = len(x_all)
    n_val = max(1, int(n * val_fraction))
    perm = torch.randperm(n, generator=g)
    val_idx, train_idx = perm[:n_val], perm[n_val:]

    for epoch in range(1, epochs + 1):
        model.train()
        order = train_idx[torch.randperm(len(train_idx), generator=g)]
        epoch_loss = 0.0
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            x, y = x_all[idx].clone(), y_all[idx]
            if augment:
                if torch.rand((), generator=g) < 0.5:
                    x = x + torch.randn(x.shape, generator=g) * (0.05 * torch.rand((), generator=g))
                if torch.rand((), generator=g) < 0.5:
                    k = kernels[int(torch.randint(len(kernels), (), generator=g))]
                    x = F.conv2d(x, k, padding=2)
            loss = F.binary_cross_entropy_with_logits(model(x), y)
            if not torch.isfinite(loss):
                raise TrainingError(f"classifier loss became non-finite at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += float(loss) * len(idx)
        log_event("classifier_epoch", epoch=epoch, loss=round(epoch_loss / len(order), 6))

    model.eval()
    clf = FeatureExtractor(config, model, {})
    val_scores = clf.scores(x_all[val_idx])
    val_y = y_all[val_idx].numpy()
    aucs = [binary_auc(val_scores[:, c], val_y[:, c]) for c in range(len(config.class_names))]
    aucs = [a for a in aucs if a is not None]
    clf.metadata.update({
        "epochs": epochs, "lr": lr, "batch_size": batch_size, "seed": seed,
        "augment": augment, "n_train": int(len(train_idx)), "n_val": int(n_val),
        "val_macro_auc": float(np.mean(aucs)) if aucs else None,
        "dataset_fingerprint": dataset_fingerprint, "torch_version": torch.__version__,
    })
    return clf


@dataclass
class ClassificationResult:
    f1_macro: float
    auc_macro: float | None
    per_class: dict
    skipped_auc_classes: list
    threshold: float = 0.5
    averaging: str = "macro over pathology classes, NO_FINDING excluded"


def classification_scores(images, label_ids, clf: FeatureExtractor, threshold: float = 0.5) -> ClassificationResult:
    """Macro F1 (fixed threshold) and macro AUC against intended labels."""
    probs = clf.scores(images)
    y = multi_hot(label_ids, len(clf.config.class_names))
    per_class = {}
    skipped = []
    f1s, aucs = [], []
    for c, name in enumerate(clf.config.class_names):
        f1 = binary_f1(probs[:, c] >= threshold, y[:, c])
        auc = binary_auc(probs[:, c], y[:, c])
        per_class[name] = {"f1": f1, "auc": auc, "support": int(y[:, c].sum())}
        f1s.append(f1)
        if auc is None:
            skipped.append(name)
        else:
            aucs.append(auc)
    return ClassificationResult(
        f1_macro=float(np.mean(f1s)),
        auc_macro=float(np.mean(aucs)) if aucs else None,
        per_class=per_class,
        skipped_auc_classes=skipped,
        threshold=threshold,
    )
