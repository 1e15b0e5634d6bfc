"""Joint training loop: instance discrimination plus cluster-level loss.

A run is a sequence of stages. Within a stage, every epoch walks a
seeded permutation of the train split in fixed batches; each step embeds
the originals and their augmented twins in one forward pass, sums both
losses, and takes one SGD step. After every epoch the cluster centroids
are recomputed from fresh eval-mode embeddings. Between stages, clusters
merge greedily under the balanced distance. All randomness is keyed by
(seed, purpose, epoch), so identical configurations reproduce identical
logs byte for byte.
"""

import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .acl import MemoryBank, MergeSchedule, acl_loss, merge_step, save_assignments, update_bank
from .backbone import Backbone, BackboneConfig
from .errors import ConfigError, IntegrityError, NumericError, UsageError
from .idl import AugmentationSpec, InstanceBank, augment, embed_all, idl_loss
from .tensorio import load_checkpoint, save_checkpoint

_NS_BATCH = 3


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    lr_init: float = 0.1
    lr_drop_epoch: int = 25
    lr_drop_factor: float = 10.0
    momentum: float = 0.9
    weight_decay: float = 5e-4
    tau: float = 0.1
    epochs_per_stage: int = 2
    stages: int = 15              # 0 derives the count from the cluster floor
    seed: int = 0
    idl_reduction: str = "mean"
    acl_reduction: str = "mean"
    bank_mixing: float = 0.5

    def validate(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if not self.lr_init > 0 or not self.lr_drop_factor >= 1:
            raise ConfigError("lr_init must be positive and lr_drop_factor at least 1")
        if self.lr_drop_epoch < 0:
            raise ConfigError(f"lr_drop_epoch must be non-negative, got {self.lr_drop_epoch}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be non-negative, got {self.weight_decay}")
        if not self.tau > 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.epochs_per_stage < 1:
            raise ConfigError(f"epochs_per_stage must be positive, got {self.epochs_per_stage}")
        if self.stages < 0:
            raise ConfigError(f"stages must be non-negative, got {self.stages}")
        if self.seed < 0:
            raise ConfigError(f"seed must be non-negative, got {self.seed}")
        for name, red in (("idl_reduction", self.idl_reduction),
                          ("acl_reduction", self.acl_reduction)):
            if red not in ("sum", "mean"):
                raise ConfigError(f"{name} must be sum or mean, got {red!r}")
        if not 0.0 <= self.bank_mixing <= 1.0:
            raise ConfigError(f"bank_mixing must be in [0, 1], got {self.bank_mixing}")
        return self


def learning_rate(config, epoch):
    """Step schedule: lr_init before the drop epoch, divided after it."""
    if epoch < config.lr_drop_epoch:
        return config.lr_init
    return config.lr_init / config.lr_drop_factor


class SGD:
    """Momentum SGD with decoupled-from-nothing classic weight decay:
    v <- momentum*v + grad + weight_decay*param; param <- param - lr*v."""

    def __init__(self, params, lr, momentum=0.9, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocities = {name: np.zeros_like(p.data) for name, p in self.params}

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None

    def step(self):
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient in parameter {name}")
            v = self.velocities[name]
            v *= self.momentum
            v += g
            if self.weight_decay:
                v += self.weight_decay * p.data
            p.data -= self.lr * v

    def state_arrays(self, prefix="opt"):
        return {f"{prefix}.{name}": v for name, v in self.velocities.items()}

    def load_state_arrays(self, arrays, prefix="opt"):
        for name in self.velocities:
            key = f"{prefix}.{name}"
            if key not in arrays:
                raise IntegrityError(f"checkpoint lacks optimizer state {key}")
            arr = arrays[key]
            if arr.shape != self.velocities[name].shape:
                raise IntegrityError(f"optimizer state {key} has shape {arr.shape}")
            self.velocities[name] = arr.astype(self.velocities[name].dtype)


@dataclass
class LogRow:
    epoch: int
    stage: int
    j_idl: float
    j_acl: float
    j_total: float
    num_clusters: int
    lr: float

    def render(self):
        return (f"{self.epoch}\t{self.stage}\t{self.j_idl!r}\t{self.j_acl!r}"
                f"\t{self.j_total!r}\t{self.num_clusters}\t{self.lr!r}")


def render_log(rows):
    return "".join(row.render() + "\n" for row in rows)


def write_log(path, rows):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(render_log(rows))


def train_epoch(model, opt, ibank, mbank, images, config, aug_spec, epoch, stage):
    """One pass over the train split; returns the epoch's log row."""
    n = images.shape[0]
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, _NS_BATCH, epoch]))
    perm = rng.permutation(n)
    opt.lr = learning_rate(config, epoch)
    idl_sum = 0.0
    acl_sum = 0.0
    steps = 0
    for start in range(0, n, config.batch_size):
        idx = perm[start:start + config.batch_size]
        b = idx.size
        originals = images[idx]
        augmented = np.stack([
            augment(originals[t], aug_spec, int(idx[t]), epoch) for t in range(b)])
        batch = T.Tensor(np.concatenate([originals, augmented], axis=0))
        emb = model.embed(batch, training=True)
        f_orig = T.slice_rows(emb, 0, b)
        f_aug = T.slice_rows(emb, b, 2 * b)
        j_idl = idl_loss(idx, f_aug, f_orig, ibank, config.tau, config.idl_reduction)
        j_acl = acl_loss(f_orig, mbank.assignment[idx], mbank, config.tau,
                         config.acl_reduction)
        total = T.add(j_idl, j_acl)
        opt.zero_grad()
        T.backward(total)
        opt.step()
        ibank.update(idx, f_orig.data, config.bank_mixing)
        idl_sum += j_idl.item()
        acl_sum += j_acl.item()
        steps += 1
    j_idl_mean = idl_sum / steps
    j_acl_mean = acl_sum / steps
    return LogRow(epoch=epoch, stage=stage,
                  j_idl=j_idl_mean, j_acl=j_acl_mean,
                  j_total=j_idl_mean + j_acl_mean,
                  num_clusters=len(mbank), lr=opt.lr)


def train_stage(model, opt, ibank, mbank, images, config, aug_spec, stage, epoch0):
    """Run epochs_per_stage epochs with centroid refresh after each."""
    rows = []
    mb = mbank
    for e in range(config.epochs_per_stage):
        epoch = epoch0 + e
        rows.append(train_epoch(model, opt, ibank, mb, images, config, aug_spec, epoch, stage))
        mb = update_bank(mb, embed_all(model, images, config.batch_size))
    return rows, mb, epoch0 + config.epochs_per_stage


def _num_stages(config, schedule, n):
    if config.stages > 0:
        return config.stages
    floor = schedule.cluster_floor(n)
    n_c = schedule.merges_per_round(n)
    rounds = max(0, int(math.ceil((n - floor) / n_c)))
    return rounds + 1


def _run_config_text(model, config, aug_spec, schedule):
    block = {
        "backbone": json.loads(model.config.to_json()),
        "train": asdict(config),
        "aug": asdict(aug_spec),
        "merge": asdict(schedule),
    }
    return json.dumps(block, sort_keys=True)


def _save_run_checkpoint(path, model, opt, ibank, mbank, config, aug_spec, schedule,
                         stages_done, epoch):
    arrays = {f"model.{k}": v for k, v in model.state_arrays().items()}
    arrays.update(opt.state_arrays("opt"))
    arrays["ibank.features"] = ibank.features
    arrays["mbank.centroids"] = mbank.centroids
    arrays["mbank.sizes"] = mbank.sizes.astype(np.float64)
    arrays["mbank.assignment"] = mbank.assignment.astype(np.float64)
    arrays["meta.progress"] = np.asarray([stages_done, epoch], dtype=np.float64)
    save_checkpoint(path, _run_config_text(model, config, aug_spec, schedule), arrays)


def load_run_checkpoint(path):
    """Read a training checkpoint into (config dict, arrays dict)."""
    config_text, arrays = load_checkpoint(path)
    try:
        block = json.loads(config_text)
    except ValueError:
        raise IntegrityError(f"checkpoint {path} does not carry a run config block") from None
    return block, arrays


def model_from_run_checkpoint(path):
    """Rebuild just the model from a training checkpoint."""
    block, arrays = load_run_checkpoint(path)
    config = BackboneConfig.from_json(json.dumps(block["backbone"]))
    model = Backbone(config, seed=0)
    model.load_state_arrays({k[len("model."):]: v for k, v in arrays.items()
                             if k.startswith("model.")})
    return model


@dataclass
class RunResult:
    rows: list = field(default_factory=list)
    ibank: InstanceBank = None
    mbank: MemoryBank = None


def run(model, images, config, aug_spec=None, schedule=None, out_dir=None, resume=None):
    """Full training run; returns (RunResult) and optionally writes
    train_log.tsv, per-stage checkpoints, and final cluster assignments.

    resume points at a checkpoint written by a previous run with the same
    configuration; training continues after the stage it recorded, and
    the returned rows cover only the resumed portion.
    """
    config.validate()
    aug_spec = (aug_spec or AugmentationSpec()).validate()
    schedule = (schedule or MergeSchedule()).validate()
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[1] != 3:
        raise UsageError(f"train images must be [n, 3, H, W], got {images.shape}")
    n = images.shape[0]
    if n < 2:
        raise UsageError("training needs at least 2 instances")

    opt = SGD(model.params(), learning_rate(config, 0),
              config.momentum, config.weight_decay)
    stage0 = 0
    epoch = 0
    if resume is None:
        features = embed_all(model, images, config.batch_size)
        ibank = InstanceBank(features)
        mbank = MemoryBank.singletons(features)
    else:
        block, arrays = load_run_checkpoint(resume)
        expected = json.loads(_run_config_text(model, config, aug_spec, schedule))
        if block != expected:
            raise IntegrityError("resume checkpoint was written under a different configuration")
        model.load_state_arrays({k[len("model."):]: v for k, v in arrays.items()
                                 if k.startswith("model.")})
        opt.load_state_arrays(arrays, "opt")
        ibank = InstanceBank.restore(arrays["ibank.features"])
        mbank = MemoryBank(arrays["mbank.centroids"],
                           arrays["mbank.sizes"].astype(np.int64),
                           arrays["mbank.assignment"].astype(np.int64))
        stage0, epoch = (int(v) for v in arrays["meta.progress"])
        if ibank.features.shape[0] != n:
            raise IntegrityError(
                f"checkpoint was trained on {ibank.features.shape[0]} instances, data has {n}")

    total_stages = _num_stages(config, schedule, n)
    if stage0 >= total_stages:
        raise UsageError(f"checkpoint already covers all {total_stages} stages")
    n_c = schedule.merges_per_round(n)
    floor = schedule.cluster_floor(n)
    rows = []
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)

    for stage in range(stage0, total_stages):
        stage_rows, mbank, epoch = train_stage(
            model, opt, ibank, mbank, images, config, aug_spec, stage, epoch)
        rows.extend(stage_rows)
        if stage < total_stages - 1:
            allowed = min(n_c, len(mbank) - floor)
            if allowed > 0:
                mbank, _ = merge_step(mbank, allowed, schedule.lam)
        if out_dir:
            _save_run_checkpoint(os.path.join(out_dir, f"stage_{stage:03d}.ckpt"),
                                 model, opt, ibank, mbank, config, aug_spec, schedule,
                                 stage + 1, epoch)

    if out_dir:
        _save_run_checkpoint(os.path.join(out_dir, "final.ckpt"),
                             model, opt, ibank, mbank, config, aug_spec, schedule,
                             total_stages, epoch)
        write_log(os.path.join(out_dir, "train_log.tsv"), rows)
        save_assignments(os.path.join(out_dir, "assignments.tsv"), mbank.assignment)

    return RunResult(rows=rows, ibank=ibank, mbank=mbank)
