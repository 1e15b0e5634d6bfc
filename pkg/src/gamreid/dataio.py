"""Dataset indexing, image loading, and synthetic data generation.

A dataset directory holds train/query/gallery image folders plus an
``index.tsv`` cache mapping each image to its identity, camera, and
split. Filenames follow the ``<id>_c<camera>s<seq>_...`` convention with
identity -1 marking junk images. The synthetic generator renders
identity-coded block patterns under camera-specific tint, shift, and
per-view noise, so identity survives camera changes but raw pixel
similarity does not.
"""

import os
import re
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError, ParseError, UsageError
from .imageops import read_pnm, write_ppm
from .tensorio import TENSOR_MAGIC, load_tensor

INDEX_NAME = "index.tsv"
SPLITS = ("train", "query", "gallery")

# canonical folder names, plus the widely used benchmark layout
_SPLIT_DIRS = {
    "train": ("train", "bounding_box_train"),
    "query": ("query",),
    "gallery": ("gallery", "bounding_box_test"),
}

_NAME_RE = re.compile(r"^(-?\d+)_c(\d+)s(\d+)_")


@dataclass(frozen=True)
class IndexEntry:
    path: str        # relative to the dataset root
    identity: int
    camera: int
    split: str


@dataclass(frozen=True)
class SynthSpec:
    """Shape of a generated dataset."""

    num_identities: int = 16
    views_per_identity: int = 24
    num_cameras: int = 4
    height: int = 32
    width: int = 16
    noise: float = 0.05
    seed: int = 0
    split_mode: str = "disjoint"  # "disjoint" or "shared" identity pools

    def validate(self):
        if self.num_identities < 2:
            raise ConfigError(f"need at least 2 identities, got {self.num_identities}")
        if self.num_cameras < 2:
            raise ConfigError(f"need at least 2 cameras, got {self.num_cameras}")
        if self.height < 8 or self.width < 8:
            raise ConfigError(f"images must be at least 8x8, got {self.height}x{self.width}")
        if self.noise < 0:
            raise ConfigError(f"noise must be non-negative, got {self.noise}")
        if self.seed < 0:
            raise ConfigError(f"seed must be non-negative, got {self.seed}")
        if self.split_mode not in ("disjoint", "shared"):
            raise ConfigError(f"split_mode must be disjoint or shared, got {self.split_mode!r}")
        if self.split_mode == "shared":
            if self.views_per_identity < self.num_cameras + 3:
                raise ConfigError(
                    "shared split needs views_per_identity >= num_cameras + 3 "
                    f"(got {self.views_per_identity} views, {self.num_cameras} cameras)")
        else:
            if self.views_per_identity < 3:
                raise ConfigError("disjoint split needs at least 3 views per identity")
            if self.num_identities < 4:
                raise ConfigError("disjoint split needs at least 4 identities")
        return self


def parse_market_filename(name):
    """Extract (identity, camera) from an ``<id>_c<cam>s<seq>_...`` filename."""
    base = os.path.basename(name)
    m = _NAME_RE.match(base)
    if not m:
        raise ParseError(
            f"cannot parse identity and camera from filename {base!r}; "
            "expected <id>_c<camera>s<sequence>_...")
    return int(m.group(1)), int(m.group(2))


def load_image(path, size=None):
    """Load one image as [3, H, W] floats in [0, 1].

    Supports binary PPM files and single-tensor files holding a [3, H, W]
    array. size=(H, W) resizes bilinearly after loading.
    """
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == TENSOR_MAGIC:
        arr = load_tensor(path)
        if arr.ndim != 3 or arr.shape[0] != 3:
            raise FormatError(f"tensor image must be [3, H, W], got {arr.shape} in {path}")
        img = np.clip(arr, 0.0, 1.0)
    elif magic[:2] in (b"P6", b"P5"):
        img = read_pnm(path)
        if img.shape[0] == 1:
            img = np.repeat(img, 3, axis=0)
    else:
        raise FormatError(
            f"unsupported image file {path}; expected a binary PPM/PGM or a tensor file")
    if size is not None:
        from .imageops import resize_bilinear
        img = resize_bilinear(img, size[0], size[1])
    return img


# ---------------------------------------------------------------------------
# index files


def save_index(path, entries):
    lines = [f"{e.path}\t{e.identity}\t{e.camera}\t{e.split}" for e in entries]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_index(path):
    entries = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise FormatError(f"bad index line {lineno} in {path}: {line!r}")
            rel, ident, cam, split = parts
            if split not in SPLITS:
                raise FormatError(f"unknown split {split!r} at line {lineno} in {path}")
            try:
                entries.append(IndexEntry(rel, int(ident), int(cam), split))
            except ValueError:
                raise FormatError(f"non-integer labels at line {lineno} in {path}") from None
    if not entries:
        raise FormatError(f"index file {path} holds no entries")
    return entries


def scan_dataset(root):
    """Index a dataset directory, preferring the cached index file.

    Without a cache, image folders are scanned and labels parsed from the
    filenames; the cache is then written for next time.
    """
    index_path = os.path.join(root, INDEX_NAME)
    if os.path.isfile(index_path):
        return load_index(index_path)
    if not os.path.isdir(root):
        raise UsageError(f"dataset directory {root} does not exist")
    entries = []
    for split in SPLITS:
        for dirname in _SPLIT_DIRS[split]:
            folder = os.path.join(root, dirname)
            if not os.path.isdir(folder):
                continue
            for fname in sorted(os.listdir(folder)):
                if fname.startswith("."):
                    continue
                ident, cam = parse_market_filename(fname)
                entries.append(IndexEntry(os.path.join(dirname, fname), ident, cam, split))
    if not entries:
        raise UsageError(f"no images found under {root}")
    save_index(index_path, entries)
    return entries


def split_entries(entries, split):
    if split not in SPLITS:
        raise UsageError(f"unknown split {split!r}; expected one of {SPLITS}")
    return [e for e in entries if e.split == split]


def load_split(root, entries, split, size=None):
    """Load one split as ([n, 3, H, W] images, identities, cameras).

    All images must agree in size (after the optional resize).
    """
    subset = split_entries(entries, split)
    if not subset:
        raise UsageError(f"split {split!r} is empty")
    images = [load_image(os.path.join(root, e.path), size) for e in subset]
    shapes = {img.shape for img in images}
    if len(shapes) > 1:
        raise FormatError(
            f"split {split!r} mixes image sizes {sorted(shapes)}; pass an explicit size")
    stack = np.stack(images)
    ids = np.asarray([e.identity for e in subset], dtype=np.int64)
    cams = np.asarray([e.camera for e in subset], dtype=np.int64)
    return stack, ids, cams


# ---------------------------------------------------------------------------
# synthetic data

_NS_IDENTITY = 0
_NS_CAMERA = 1
_NS_VIEW = 2


def _identity_pattern(spec, identity):
    """Block-color pattern unique to one identity, [3, H, W] in [0, 1]."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, _NS_IDENTITY, identity]))
    rows, cols = 4, 2
    colors = rng.uniform(0.08, 0.92, size=(rows, cols, 3))
    img = np.zeros((3, spec.height, spec.width))
    hs = np.linspace(0, spec.height, rows + 1).astype(int)
    ws = np.linspace(0, spec.width, cols + 1).astype(int)
    for r in range(rows):
        for c in range(cols):
            img[:, hs[r]:hs[r + 1], ws[c]:ws[c + 1]] = colors[r, c][:, None, None]
    ramp = np.linspace(-0.06, 0.06, spec.height)[None, :, None]
    return np.clip(img + ramp, 0.0, 1.0)


# Cycled gain templates keep every camera pair strongly separated in at
# least one channel, so cross-camera matching cannot ride on raw color
# statistics no matter how the per-seed jitter lands.
_GAIN_TEMPLATES = (
    (1.00, 1.00, 1.00),
    (0.55, 1.00, 0.80),
    (1.00, 0.55, 0.80),
    (0.80, 1.00, 0.55),
    (1.00, 0.80, 0.55),
    (0.55, 0.80, 1.00),
    (0.80, 0.55, 1.00),
)


def _camera_params(spec, camera):
    """Per-camera tint gains, brightness offset, and pixel shift."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, _NS_CAMERA, camera]))
    base = np.array(_GAIN_TEMPLATES[camera % len(_GAIN_TEMPLATES)])
    gains = np.clip(base + rng.uniform(-0.05, 0.05, size=3), 0.3, 1.0)
    offset = -0.06 + 0.12 * ((camera % 5) / 4.0) + rng.uniform(-0.01, 0.01)
    dy, dx = (int(v) for v in rng.integers(-2, 3, size=2))
    return gains, offset, dy, dx


def _shift(img, dy, dx):
    out = img
    if dy:
        out = np.roll(out, dy, axis=1)
        if dy > 0:
            out[:, :dy, :] = out[:, dy:dy + 1, :]
        else:
            out[:, dy:, :] = out[:, dy - 1:dy, :]
    if dx:
        out = np.roll(out, dx, axis=2)
        if dx > 0:
            out[:, :, :dx] = out[:, :, dx:dx + 1]
        else:
            out[:, :, dx:] = out[:, :, dx - 1:dx]
    return out


def render_view(spec, identity, camera, view):
    """Render one view: identity pattern under camera effects plus noise."""
    base = _identity_pattern(spec, identity)
    gains, offset, dy, dx = _camera_params(spec, camera)
    img = _shift(base.copy(), dy, dx)
    img = img * gains[:, None, None] + offset
    if spec.noise > 0:
        rng = np.random.default_rng(
            np.random.SeedSequence([spec.seed, _NS_VIEW, identity, camera, view]))
        img = img + rng.normal(0.0, spec.noise, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def _plan_views(spec):
    """Yield (identity, view, camera, split) for every image to render."""
    v_total = spec.views_per_identity
    c = spec.num_cameras
    plan = []
    if spec.split_mode == "shared":
        # per identity: most views train, then 2 query, then one gallery
        # view under every camera
        for ident in range(1, spec.num_identities + 1):
            for v in range(v_total):
                cam = v % c
                if v < v_total - c - 2:
                    split = "train"
                elif v < v_total - c:
                    split = "query"
                else:
                    split = "gallery"
                plan.append((ident, v, cam, split))
    else:
        half = spec.num_identities // 2
        for ident in range(1, spec.num_identities + 1):
            train_identity = ident <= spec.num_identities - half
            for v in range(v_total):
                cam = v % c
                if train_identity:
                    split = "train"
                elif v < 2:
                    split = "query"
                else:
                    split = "gallery"
                plan.append((ident, v, cam, split))
    return plan


def generate_synthetic(spec, out_dir, overwrite=False):
    """Render a synthetic dataset to disk; returns the index entries.

    Refuses to write into an existing non-empty directory unless
    overwrite is set.
    """
    spec.validate()
    if os.path.isdir(out_dir) and os.listdir(out_dir) and not overwrite:
        raise UsageError(f"output directory {out_dir} is not empty; pass overwrite to replace")
    entries = []
    for split in SPLITS:
        os.makedirs(os.path.join(out_dir, split), exist_ok=True)
    for ident, view, cam, split in _plan_views(spec):
        img = render_view(spec, ident, cam, view)
        fname = f"{ident:04d}_c{cam + 1}s1_{view:06d}_00.ppm"
        rel = os.path.join(split, fname)
        write_ppm(os.path.join(out_dir, rel), img)
        entries.append(IndexEntry(rel, ident, cam + 1, split))
    save_index(os.path.join(out_dir, INDEX_NAME), entries)
    return entries
