"""Instance-level discrimination against a memory bank of feature rows.

Every training instance keeps one unit-norm row in the bank. A batch
contributes two terms: augmented views should be recognized as their own
instance (high softmax probability at their own row), and un-augmented
views of other instances should not be recognized as this one. Bank rows
are constants within a step and are refreshed afterwards by momentum
mixing with the freshly embedded originals.
"""

from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .errors import ConfigError, IntegrityError, UsageError
from .imageops import resize_bilinear


@dataclass(frozen=True)
class AugmentationSpec:
    """Ranges for the deterministic training-time image perturbations.

    All draws come from a generator keyed by (seed, instance_seed, epoch),
    so a given instance is augmented identically across runs.
    """

    flip_prob: float = 0.5
    crop_min: float = 0.8
    crop_max: float = 1.0
    zoom_min: float = 1.0
    zoom_max: float = 1.25
    contrast_min: float = 0.75
    contrast_max: float = 1.25
    occlusion_prob: float = 0.3
    occlusion_min: float = 0.1
    occlusion_max: float = 0.3
    seed: int = 1234

    def validate(self):
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ConfigError(f"flip_prob must be in [0, 1], got {self.flip_prob}")
        if not 0.0 <= self.occlusion_prob <= 1.0:
            raise ConfigError(f"occlusion_prob must be in [0, 1], got {self.occlusion_prob}")
        if not 0.0 < self.crop_min <= self.crop_max <= 1.0:
            raise ConfigError(f"crop range ({self.crop_min}, {self.crop_max}) invalid")
        if not 0.0 < self.zoom_min <= self.zoom_max:
            raise ConfigError(f"zoom range ({self.zoom_min}, {self.zoom_max}) invalid")
        if not 0.0 < self.contrast_min <= self.contrast_max:
            raise ConfigError(f"contrast range ({self.contrast_min}, {self.contrast_max}) invalid")
        if not 0.0 <= self.occlusion_min <= self.occlusion_max <= 1.0:
            raise ConfigError(
                f"occlusion range ({self.occlusion_min}, {self.occlusion_max}) invalid")
        if self.seed < 0:
            raise ConfigError(f"augmentation seed must be non-negative, got {self.seed}")
        return self

    def identity(self):
        """A copy whose transformations all reduce to no-ops."""
        return replace(self, flip_prob=0.0, crop_min=1.0, crop_max=1.0,
                       zoom_min=1.0, zoom_max=1.0, contrast_min=1.0, contrast_max=1.0,
                       occlusion_prob=0.0)


def augment(image, spec, instance_seed, epoch=0):
    """Apply flip, crop, zoom, contrast, and occlusion to a [3, H, W] image.

    The result stays within [0, 1] and keeps the input shape. Degenerate
    crop or zoom windows are clamped to one pixel, never an error. With
    all probabilities zero and identity ranges the input comes back
    unchanged.
    """
    spec.validate()
    img = image.data if isinstance(image, T.Tensor) else np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise UsageError(f"augment expects a [3, H, W] image, got {img.shape}")
    if instance_seed < 0 or epoch < 0:
        raise UsageError("instance_seed and epoch must be non-negative")
    h, w = img.shape[1], img.shape[2]
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, instance_seed, epoch]))
    out = img.astype(np.float64).copy()

    if rng.random() < spec.flip_prob:
        out = out[:, :, ::-1].copy()

    frac = rng.uniform(spec.crop_min, spec.crop_max)
    if frac < 1.0:
        ch = max(1, int(round(frac * h)))
        cw = max(1, int(round(frac * w)))
        top = int(rng.integers(0, h - ch + 1))
        left = int(rng.integers(0, w - cw + 1))
        out = resize_bilinear(out[:, top:top + ch, left:left + cw], h, w)

    zoom = rng.uniform(spec.zoom_min, spec.zoom_max)
    if zoom != 1.0:
        if zoom > 1.0:
            zh = max(1, int(round(h / zoom)))
            zw = max(1, int(round(w / zoom)))
            top = (h - zh) // 2
            left = (w - zw) // 2
            out = resize_bilinear(out[:, top:top + zh, left:left + zw], h, w)
        else:
            zh = max(1, int(round(h * zoom)))
            zw = max(1, int(round(w * zoom)))
            small = resize_bilinear(out, zh, zw)
            fill = out.mean(axis=(1, 2))
            canvas = np.broadcast_to(fill[:, None, None], (3, h, w)).copy()
            top = (h - zh) // 2
            left = (w - zw) // 2
            canvas[:, top:top + zh, left:left + zw] = small
            out = canvas

    # Per-channel gain: imitates camera-dependent color response.
    contrast = rng.uniform(spec.contrast_min, spec.contrast_max, size=3)
    if np.any(contrast != 1.0):
        out = out * contrast[:, None, None]

    if rng.random() < spec.occlusion_prob:
        oh = max(1, int(round(rng.uniform(spec.occlusion_min, spec.occlusion_max) * h)))
        ow = max(1, int(round(rng.uniform(spec.occlusion_min, spec.occlusion_max) * w)))
        top = int(rng.integers(0, h - oh + 1))
        left = int(rng.integers(0, w - ow + 1))
        fill = out.mean(axis=(1, 2))
        out[:, top:top + oh, left:left + ow] = fill[:, None, None]

    return np.clip(out, 0.0, 1.0)


class InstanceBank:
    """One unit-norm feature row per training instance."""

    def __init__(self, features):
        feats = np.asarray(features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] < 1:
            raise UsageError(f"instance bank needs a [n, D] feature matrix, got {feats.shape}")
        self.features = _unit_rows(feats)

    @classmethod
    def restore(cls, features):
        """Rebuild a bank from rows a previous run saved.

        Rows must already be unit norm and are kept bit-for-bit: the
        constructor's renormalization divides by a norm within one ulp of
        1.0, which would perturb restored state and break exact resume.
        """
        feats = np.asarray(features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] < 1:
            raise UsageError(f"instance bank needs a [n, D] feature matrix, got {feats.shape}")
        norms = np.linalg.norm(feats, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-8):
            raise IntegrityError("restored instance-bank rows are not unit norm")
        bank = cls.__new__(cls)
        bank.features = feats.copy()
        return bank

    def __len__(self):
        return self.features.shape[0]

    @property
    def dim(self):
        return self.features.shape[1]

    def update(self, indices, feats, mixing=0.5):
        """Mix fresh features into their rows: v <- mixing*v + (1-mixing)*f,
        then restore unit norm. Duplicate indices in one call are refused
        because the mix would depend on arrival order."""
        if not 0.0 <= mixing <= 1.0:
            raise ConfigError(f"mixing must be in [0, 1], got {mixing}")
        indices = np.asarray(indices, dtype=np.int64)
        feats = np.asarray(feats, dtype=np.float64)
        if indices.ndim != 1 or feats.ndim != 2 or indices.shape[0] != feats.shape[0]:
            raise UsageError("update needs matching 1-D indices and [b, D] features")
        if feats.shape[1] != self.dim:
            raise UsageError(f"feature width {feats.shape[1]} does not match bank {self.dim}")
        if indices.size and (indices.min() < 0 or indices.max() >= len(self)):
            raise UsageError("instance index out of range")
        if np.unique(indices).size != indices.size:
            raise UsageError("duplicate instance indices in one bank update")
        mixed = mixing * self.features[indices] + (1.0 - mixing) * feats
        self.features[indices] = _unit_rows(mixed)


def _unit_rows(m, eps=1e-12):
    norms = np.sqrt((m * m).sum(axis=1, keepdims=True))
    return m / np.maximum(norms, eps)


def _instance_distribution(probe, features, tau):
    if not tau > 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    z = features @ np.asarray(probe, dtype=np.float64) / tau
    z -= z.max()
    e = np.exp(z)
    return e / e.sum()


def p_positive(index, feature, bank, tau):
    """Probability that the augmented feature is recognized as instance
    ``index`` under the bank's softmax distribution."""
    if not 0 <= index < len(bank):
        raise UsageError(f"instance index {index} out of range for bank of {len(bank)}")
    return float(_instance_distribution(feature, bank.features, tau)[index])


def p_negative(index, feature, bank, tau):
    """Probability that some other instance's un-augmented feature is
    recognized as instance ``index``; its complement enters the loss."""
    if not 0 <= index < len(bank):
        raise UsageError(f"instance index {index} out of range for bank of {len(bank)}")
    return float(_instance_distribution(feature, bank.features, tau)[index])


def idl_loss(indices, f_aug, f_orig, bank, tau, reduction="sum"):
    """Instance-discrimination loss for one batch.

    indices: the batch rows' instance ids (no duplicates).
    f_aug:   [B, D] embeddings of augmented views (gradients flow).
    f_orig:  [B, D] embeddings of un-augmented views (gradients flow).
    The positive term pushes each augmented view toward its own bank row;
    the negative term pushes every other batch member's un-augmented view
    away from that row. reduction "sum" adds both terms over the batch;
    "mean" divides the sum by the batch size.
    """
    if reduction not in ("sum", "mean"):
        raise ConfigError(f"reduction must be sum or mean, got {reduction!r}")
    indices = np.asarray(indices, dtype=np.int64)
    if indices.ndim != 1 or indices.size == 0:
        raise UsageError("indices must be a non-empty 1-D array")
    b = indices.size
    if f_aug.data.shape != (b, bank.dim) or f_orig.data.shape != (b, bank.dim):
        raise UsageError(
            f"expected [{b}, {bank.dim}] embeddings, got {f_aug.data.shape} and {f_orig.data.shape}")
    if indices.min() < 0 or indices.max() >= len(bank):
        raise UsageError("instance index out of range")
    if np.unique(indices).size != b:
        raise UsageError("duplicate instance indices in one batch")

    rows = T.Tensor(bank.features)  # constant within the step
    pos_p = T.softmax_rows(T.linear(f_aug, rows), tau)
    pos = T.sum_all(T.log(T.gather_entries(pos_p, np.arange(b), indices)))

    if b > 1:
        neg_rows = np.repeat(np.arange(b), b - 1)
        neg_cols = np.concatenate([np.delete(indices, j) for j in range(b)])
        # entry (j, i): view j judged against instance i for every i != j
        neg_logits = T.linear(f_orig, rows)
        neg = T.sum_all(T.log_complement_softmax_entries(neg_logits, neg_rows, neg_cols, tau))
        total = T.add(pos, neg)
    else:
        total = pos
    scale = -1.0 if reduction == "sum" else -1.0 / b
    return T.scale_shift(total, scale)


def init_bank_from_model(model, images, batch_size=64):
    """Embed every un-augmented image in eval mode and build the bank."""
    return InstanceBank(embed_all(model, images, batch_size))


def embed_all(model, images, batch_size=64):
    """Embed [n, 3, H, W] images without recording gradients."""
    images = np.asarray(images)
    if images.ndim != 4:
        raise UsageError(f"expected [n, 3, H, W] images, got {images.shape}")
    if batch_size < 1:
        raise ConfigError(f"batch_size must be positive, got {batch_size}")
    chunks = []
    with T.no_grad():
        for start in range(0, images.shape[0], batch_size):
            batch = T.Tensor(images[start:start + batch_size])
            chunks.append(model.embed(batch, training=False).data.astype(np.float64))
    if not chunks:
        raise UsageError("no images to embed")
    return np.concatenate(chunks, axis=0)
