"""Run configuration: flat ``key = value`` text with a closed schema.

Unknown keys are rejected by name, values are parsed by declared type,
and every run echoes its fully resolved configuration so defaults are
never implicit in the artifacts it leaves behind.
"""

from .acl import MergeSchedule
from .backbone import preset
from .dataio import SynthSpec
from .errors import ConfigError
from .idl import AugmentationSpec
from .trainer import TrainConfig


def _parse_int(text):
    try:
        return int(text, 10)
    except ValueError:
        raise ValueError("expected an integer") from None


def _parse_float(text):
    try:
        return float(text)
    except ValueError:
        raise ValueError("expected a number") from None


def _parse_str(text):
    return text


# key -> (default, parser, help)
SCHEMA = {
    "backbone.preset": ("tiny", _parse_str,
                        "network preset: tiny, resnet50-baseline, or resnet50-gam"),
    "backbone.groups": (0, _parse_int,
                        "filter groups for the bottleneck convolutions; 0 keeps the preset value"),
    "backbone.embedding_dim": (0, _parse_int,
                               "embedding width; 0 keeps the preset value"),
    "train.precision": ("f64", _parse_str, "float precision of the model: f64 or f32"),
    "train.batch_size": (32, _parse_int, "instances per training step"),
    "train.lr_init": (0.1, _parse_float, "initial learning rate"),
    "train.lr_drop_epoch": (25, _parse_int,
                            "global epoch at which the learning rate divides"),
    "train.lr_drop_factor": (10.0, _parse_float, "divisor applied at the drop epoch"),
    "train.momentum": (0.9, _parse_float, "SGD momentum coefficient"),
    "train.weight_decay": (5e-4, _parse_float, "L2 penalty folded into the update"),
    "train.tau": (0.1, _parse_float, "softmax temperature for both losses"),
    "train.epochs_per_stage": (2, _parse_int, "epochs between merge rounds"),
    "train.stages": (15, _parse_int,
                     "number of training stages; 0 derives it from the cluster floor"),
    "train.seed": (0, _parse_int, "seed for weights, batch order, and logging"),
    "train.idl_reduction": ("mean", _parse_str,
                            "instance-loss batch reduction: mean or sum"),
    "train.acl_reduction": ("mean", _parse_str,
                            "cluster-loss batch reduction: mean or sum"),
    "train.bank_mixing": (0.5, _parse_float,
                          "momentum kept by instance bank rows on update"),
    "aug.flip_prob": (0.5, _parse_float, "horizontal flip probability"),
    "aug.crop_min": (0.8, _parse_float, "smallest crop fraction"),
    "aug.crop_max": (1.0, _parse_float, "largest crop fraction"),
    "aug.zoom_min": (1.0, _parse_float, "smallest zoom factor"),
    "aug.zoom_max": (1.25, _parse_float, "largest zoom factor"),
    "aug.contrast_min": (0.75, _parse_float, "smallest contrast factor"),
    "aug.contrast_max": (1.25, _parse_float, "largest contrast factor"),
    "aug.occlusion_prob": (0.3, _parse_float, "random occlusion probability"),
    "aug.occlusion_min": (0.1, _parse_float, "smallest occlusion side fraction"),
    "aug.occlusion_max": (0.3, _parse_float, "largest occlusion side fraction"),
    "aug.seed": (1234, _parse_int, "seed stream for augmentation draws"),
    "merge.fraction": (0.04, _parse_float,
                       "cluster merges per round as a fraction of the instance count"),
    "merge.lambda": (0.0005, _parse_float, "size-balance weight in the merge distance"),
    "merge.min_cluster_fraction": (0.1, _parse_float,
                                   "floor on the cluster count as a fraction of instances"),
    "data.height": (0, _parse_int, "resize images to this height; 0 keeps native size"),
    "data.width": (0, _parse_int, "resize images to this width; 0 keeps native size"),
    "synth.num_identities": (16, _parse_int, "identities in a generated dataset"),
    "synth.views_per_identity": (24, _parse_int, "views rendered per identity"),
    "synth.num_cameras": (4, _parse_int, "distinct camera effects"),
    "synth.height": (32, _parse_int, "generated image height"),
    "synth.width": (16, _parse_int, "generated image width"),
    "synth.noise": (0.05, _parse_float, "per-view Gaussian noise level"),
    "synth.seed": (0, _parse_int, "seed for patterns, cameras, and noise"),
    "synth.split_mode": ("disjoint", _parse_str,
                         "identity pools across splits: disjoint or shared"),
}


def defaults():
    return {key: default for key, (default, _, _) in SCHEMA.items()}


def parse_config_text(text, source="<config>"):
    """Parse ``key = value`` lines; returns only the keys that were set."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        _, parser, _ = SCHEMA[key]
        try:
            out[key] = parser(value)
        except ValueError as e:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {e}") from None
    return out


def load_config(path=None):
    """Resolved configuration: defaults overlaid with the optional file."""
    resolved = defaults()
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            resolved.update(parse_config_text(fh.read(), source=path))
    return resolved


def render_config(resolved):
    """Stable text form of a resolved configuration."""
    lines = []
    for key in sorted(resolved):
        value = resolved[key]
        text = repr(value) if isinstance(value, float) else str(value)
        lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"


def describe_keys():
    """Help text: every key with its default and meaning."""
    lines = []
    for key in sorted(SCHEMA):
        default, _, help_text = SCHEMA[key]
        shown = repr(default) if isinstance(default, float) else str(default)
        lines.append(f"  {key} (default {shown}): {help_text}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# builders


def backbone_config_from(resolved):
    groups = resolved["backbone.groups"] or None
    dim = resolved["backbone.embedding_dim"] or None
    return preset(resolved["backbone.preset"], groups=groups, embedding_dim=dim,
                  precision=resolved["train.precision"])


def train_config_from(resolved):
    return TrainConfig(
        batch_size=resolved["train.batch_size"],
        lr_init=resolved["train.lr_init"],
        lr_drop_epoch=resolved["train.lr_drop_epoch"],
        lr_drop_factor=resolved["train.lr_drop_factor"],
        momentum=resolved["train.momentum"],
        weight_decay=resolved["train.weight_decay"],
        tau=resolved["train.tau"],
        epochs_per_stage=resolved["train.epochs_per_stage"],
        stages=resolved["train.stages"],
        seed=resolved["train.seed"],
        idl_reduction=resolved["train.idl_reduction"],
        acl_reduction=resolved["train.acl_reduction"],
        bank_mixing=resolved["train.bank_mixing"],
    ).validate()


def aug_spec_from(resolved):
    return AugmentationSpec(
        flip_prob=resolved["aug.flip_prob"],
        crop_min=resolved["aug.crop_min"],
        crop_max=resolved["aug.crop_max"],
        zoom_min=resolved["aug.zoom_min"],
        zoom_max=resolved["aug.zoom_max"],
        contrast_min=resolved["aug.contrast_min"],
        contrast_max=resolved["aug.contrast_max"],
        occlusion_prob=resolved["aug.occlusion_prob"],
        occlusion_min=resolved["aug.occlusion_min"],
        occlusion_max=resolved["aug.occlusion_max"],
        seed=resolved["aug.seed"],
    ).validate()


def merge_schedule_from(resolved):
    return MergeSchedule(
        merge_fraction=resolved["merge.fraction"],
        lam=resolved["merge.lambda"],
        min_cluster_fraction=resolved["merge.min_cluster_fraction"],
    ).validate()


def synth_spec_from(resolved):
    return SynthSpec(
        num_identities=resolved["synth.num_identities"],
        views_per_identity=resolved["synth.views_per_identity"],
        num_cameras=resolved["synth.num_cameras"],
        height=resolved["synth.height"],
        width=resolved["synth.width"],
        noise=resolved["synth.noise"],
        seed=resolved["synth.seed"],
        split_mode=resolved["synth.split_mode"],
    ).validate()


def image_size_from(resolved):
    h, w = resolved["data.height"], resolved["data.width"]
    if h < 0 or w < 0:
        raise ConfigError(f"data.height/data.width must be non-negative, got {h}x{w}")
    if (h == 0) != (w == 0):
        raise ConfigError("data.height and data.width must be set together")
    return None if h == 0 else (h, w)
