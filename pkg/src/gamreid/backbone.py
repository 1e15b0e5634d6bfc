"""Residual bottleneck backbone with optional grouped convolutions and
attention modules, plus analytic parameter accounting.

A backbone is stem -> stages of bottleneck blocks -> global average pool
-> affine embedding head -> row normalization. Grouping applies to the
three bottleneck convolutions; projection shortcuts and the stem stay
ungrouped. When attention is enabled, each block refines its mid-width
map (after the 3x3 convolution) before the 1x1 expansion.
"""

import json
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import tensor as T
from .attention import GroupedAttentionModule
from .errors import ConfigError, IntegrityError, ShapeError, UsageError
from .tensorio import load_checkpoint, save_checkpoint

PRECISIONS = ("f64", "f32")


@dataclass(frozen=True)
class StemConfig:
    channels: int = 64
    kernel: int = 7
    stride: int = 2
    pool: int = 2  # average-pool window after the stem conv; 1 disables


@dataclass(frozen=True)
class BottleneckSpec:
    in_channels: int
    mid_channels: int
    out_channels: int
    stride: int = 1


@dataclass(frozen=True)
class BackboneConfig:
    stem: StemConfig
    stages: tuple
    embedding_dim: int = 2048
    groups: int = 1
    use_gam: bool = False
    use_bn: bool = True
    precision: str = "f64"

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)

    @staticmethod
    def from_json(text):
        try:
            raw = json.loads(text)
            stem = StemConfig(**raw["stem"])
            stages = tuple(tuple(BottleneckSpec(**b) for b in stage) for stage in raw["stages"])
            cfg = BackboneConfig(
                stem=stem, stages=stages,
                embedding_dim=raw["embedding_dim"], groups=raw["groups"],
                use_gam=raw["use_gam"], use_bn=raw["use_bn"],
                precision=raw.get("precision", "f64"))
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"bad backbone config block: {e}") from None
        validate_config(cfg)
        return cfg


def validate_config(config):
    stem = config.stem
    if stem.channels < 1 or stem.kernel < 1 or stem.kernel % 2 == 0:
        raise ConfigError(f"stem needs positive channels and an odd kernel, got {stem}")
    if stem.stride < 1 or stem.pool < 1:
        raise ConfigError(f"stem stride and pool must be at least 1, got {stem}")
    if config.groups < 1:
        raise ConfigError(f"groups must be at least 1, got {config.groups}")
    if config.embedding_dim < 1:
        raise ConfigError(f"embedding_dim must be at least 1, got {config.embedding_dim}")
    if config.precision not in PRECISIONS:
        raise ConfigError(f"precision must be one of {PRECISIONS}, got {config.precision!r}")
    if not config.stages or any(len(s) == 0 for s in config.stages):
        raise ConfigError("backbone needs at least one stage with at least one block")
    expected_in = stem.channels
    for i, stage in enumerate(config.stages):
        for j, spec in enumerate(stage):
            where = f"stage{i}.block{j}"
            if spec.in_channels != expected_in:
                raise ConfigError(
                    f"{where} expects {spec.in_channels} input channels "
                    f"but receives {expected_in}")
            if spec.stride not in (1, 2):
                raise ConfigError(f"{where} stride must be 1 or 2, got {spec.stride}")
            for label, ch in (("in", spec.in_channels), ("mid", spec.mid_channels),
                              ("out", spec.out_channels)):
                if ch < 1:
                    raise ConfigError(f"{where} has non-positive {label}_channels")
                if ch % config.groups:
                    raise ConfigError(
                        f"{where} {label}_channels={ch} not divisible by groups={config.groups}")
            expected_in = spec.out_channels


def _resnet50_stages():
    counts = (3, 4, 6, 3)
    mids = (64, 128, 256, 512)
    outs = (256, 512, 1024, 2048)
    strides = (1, 2, 2, 2)
    stages = []
    in_ch = 64
    for count, mid, out, stride in zip(counts, mids, outs, strides):
        blocks = []
        for j in range(count):
            blocks.append(BottleneckSpec(in_ch, mid, out, stride if j == 0 else 1))
            in_ch = out
        stages.append(tuple(blocks))
    return tuple(stages)


def _tiny_stages():
    return (
        (BottleneckSpec(16, 8, 32, 1), BottleneckSpec(32, 8, 32, 1)),
        (BottleneckSpec(32, 16, 64, 2), BottleneckSpec(64, 16, 64, 1)),
    )


_PRESETS = ("tiny", "resnet50-baseline", "resnet50-gam")


def preset(name, groups=None, embedding_dim=None, precision=None):
    """Build a named backbone configuration, optionally overriding the
    group count, embedding width, or precision."""
    if name == "resnet50-baseline":
        cfg = BackboneConfig(stem=StemConfig(), stages=_resnet50_stages(),
                             embedding_dim=512, groups=1, use_gam=False)
    elif name == "resnet50-gam":
        cfg = BackboneConfig(stem=StemConfig(), stages=_resnet50_stages(),
                             embedding_dim=512, groups=4, use_gam=True)
    elif name == "tiny":
        cfg = BackboneConfig(stem=StemConfig(channels=16, kernel=3, stride=1, pool=2),
                             stages=_tiny_stages(), embedding_dim=64, groups=2, use_gam=True)
    else:
        raise ConfigError(f"unknown backbone preset {name!r}; valid presets: {', '.join(_PRESETS)}")
    if groups is not None:
        cfg = replace(cfg, groups=groups)
    if embedding_dim is not None:
        cfg = replace(cfg, embedding_dim=embedding_dim)
    if precision is not None:
        cfg = replace(cfg, precision=precision)
    validate_config(cfg)
    return cfg


def count_parameters(config):
    """Analytic parameter counts per category; no tensors are allocated.

    Returns a dict with conv, bn, linear, attention, and total entries.
    Batch-norm counts cover the learnable scale and shift only; running
    statistics are not parameters.
    """
    validate_config(config)
    g = config.groups
    conv = 3 * config.stem.channels * config.stem.kernel ** 2
    bn_channels = config.stem.channels if config.use_bn else 0
    attention = 0
    last_out = config.stem.channels
    for stage in config.stages:
        for spec in stage:
            cin, mid, out = spec.in_channels, spec.mid_channels, spec.out_channels
            conv += mid * (cin // g)            # 1x1 reduce
            conv += mid * (mid // g) * 9        # 3x3
            conv += out * (mid // g)            # 1x1 expand
            if config.use_bn:
                bn_channels += mid + mid + out
            if spec.stride != 1 or cin != out:
                conv += out * cin               # ungrouped projection shortcut
                if config.use_bn:
                    bn_channels += out
            if config.use_gam:
                attention += mid * mid + mid    # channel gate affine
                attention += 7 * 7 + 1          # spatial gate conv
            last_out = out
    linear = last_out * config.embedding_dim + config.embedding_dim
    bn = 2 * bn_channels
    return {
        "conv": conv,
        "bn": bn,
        "linear": linear,
        "attention": attention,
        "total": conv + bn + linear + attention,
    }


# ---------------------------------------------------------------------------
# layers


class Conv2d:
    def __init__(self, rng, in_ch, out_ch, kernel, *, stride=1, padding=0,
                 groups=1, bias=False, dtype=np.float64):
        fan_in = (in_ch // groups) * kernel * kernel
        self.weight = T.kaiming_uniform(
            rng, (out_ch, in_ch // groups, kernel, kernel), fan_in, dtype)
        self.bias = T.zeros_param((out_ch,), dtype) if bias else None
        self.stride = stride
        self.padding = padding
        self.groups = groups

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias,
                        groups=self.groups, stride=self.stride, padding=self.padding)

    def params(self, prefix):
        out = [(f"{prefix}.weight", self.weight)]
        if self.bias is not None:
            out.append((f"{prefix}.bias", self.bias))
        return out


class BatchNorm2d:
    def __init__(self, channels, dtype=np.float64):
        self.gamma = T.ones_param((channels,), dtype)
        self.beta = T.zeros_param((channels,), dtype)
        self.running_mean = np.zeros(channels, dtype=np.float64)
        self.running_var = np.ones(channels, dtype=np.float64)

    def forward(self, x, training):
        return T.batchnorm2d(x, self.gamma, self.beta,
                             self.running_mean, self.running_var, training=training)

    def params(self, prefix):
        return [(f"{prefix}.gamma", self.gamma), (f"{prefix}.beta", self.beta)]

    def buffers(self, prefix):
        return [(f"{prefix}.running_mean", self.running_mean),
                (f"{prefix}.running_var", self.running_var)]


class _NoNorm:
    """Stand-in used when the configuration disables batch normalization."""

    def forward(self, x, training):
        return x

    def params(self, prefix):
        return []

    def buffers(self, prefix):
        return []


class Linear:
    def __init__(self, rng, in_dim, out_dim, *, bias=True, dtype=np.float64):
        self.weight = T.kaiming_uniform(rng, (out_dim, in_dim), in_dim, dtype)
        self.bias = T.zeros_param((out_dim,), dtype) if bias else None

    def forward(self, x):
        return T.linear(x, self.weight, self.bias)

    def params(self, prefix):
        out = [(f"{prefix}.weight", self.weight)]
        if self.bias is not None:
            out.append((f"{prefix}.bias", self.bias))
        return out


class Bottleneck:
    """1x1 reduce, 3x3, optional attention, 1x1 expand, residual add."""

    def __init__(self, rng, spec, *, groups, use_gam, use_bn, dtype=np.float64):
        def norm(ch):
            return BatchNorm2d(ch, dtype) if use_bn else _NoNorm()

        cin, mid, out = spec.in_channels, spec.mid_channels, spec.out_channels
        self.conv1 = Conv2d(rng, cin, mid, 1, groups=groups, dtype=dtype)
        self.bn1 = norm(mid)
        self.conv2 = Conv2d(rng, mid, mid, 3, stride=spec.stride, padding=1,
                            groups=groups, dtype=dtype)
        self.bn2 = norm(mid)
        self.gam = GroupedAttentionModule(mid, rng, dtype) if use_gam else None
        self.conv3 = Conv2d(rng, mid, out, 1, groups=groups, dtype=dtype)
        self.bn3 = norm(out)
        if spec.stride != 1 or cin != out:
            self.proj = Conv2d(rng, cin, out, 1, stride=spec.stride, dtype=dtype)
            self.proj_bn = norm(out)
        else:
            self.proj = None
            self.proj_bn = None

    def inner(self, x, training, sink=None):
        """The residual branch: activations that feed the skip addition."""
        h = T.relu(self.bn1.forward(self.conv1.forward(x), training))
        h = T.relu(self.bn2.forward(self.conv2.forward(h), training))
        if self.gam is not None:
            h = self.gam.forward(h, sink)
        return self.bn3.forward(self.conv3.forward(h), training)

    def forward(self, x, training, sink=None):
        branch = self.inner(x, training, sink)
        if self.proj is None:
            skip = x
        else:
            skip = self.proj_bn.forward(self.proj.forward(x), training)
        return T.relu(T.add(branch, skip))

    def params(self, prefix):
        out = []
        out += self.conv1.params(f"{prefix}.conv1") + self.bn1.params(f"{prefix}.bn1")
        out += self.conv2.params(f"{prefix}.conv2") + self.bn2.params(f"{prefix}.bn2")
        if self.gam is not None:
            out += self.gam.params(f"{prefix}.gam")
        out += self.conv3.params(f"{prefix}.conv3") + self.bn3.params(f"{prefix}.bn3")
        if self.proj is not None:
            out += self.proj.params(f"{prefix}.proj") + self.proj_bn.params(f"{prefix}.proj_bn")
        return out

    def buffers(self, prefix):
        out = []
        out += self.bn1.buffers(f"{prefix}.bn1") + self.bn2.buffers(f"{prefix}.bn2")
        out += self.bn3.buffers(f"{prefix}.bn3")
        if self.proj_bn is not None:
            out += self.proj_bn.buffers(f"{prefix}.proj_bn")
        return out


class Backbone:
    """Full embedding network; forward output rows are unit-norm."""

    def __init__(self, config, seed=0):
        validate_config(config)
        self.config = config
        dtype = np.float32 if config.precision == "f32" else np.float64
        self.dtype = dtype
        rng = np.random.default_rng(np.random.SeedSequence([seed]))
        self.stem_conv = Conv2d(rng, 3, config.stem.channels, config.stem.kernel,
                                stride=config.stem.stride,
                                padding=config.stem.kernel // 2, dtype=dtype)
        self.stem_bn = BatchNorm2d(config.stem.channels, dtype) if config.use_bn else _NoNorm()
        self.stages = []
        for stage in config.stages:
            blocks = [Bottleneck(rng, spec, groups=config.groups, use_gam=config.use_gam,
                                 use_bn=config.use_bn, dtype=dtype)
                      for spec in stage]
            self.stages.append(blocks)
        last_out = config.stages[-1][-1].out_channels
        self.head = Linear(rng, last_out, config.embedding_dim, dtype=dtype)

    def block_names(self):
        return [f"stage{i}.block{j}"
                for i, blocks in enumerate(self.stages) for j in range(len(blocks))]

    def forward_features(self, x, training=False, sink=None):
        if not isinstance(x, T.Tensor):
            raise UsageError(
                "backbone input must be a Tensor; wrap raw arrays with "
                "Tensor(images) or use embed_all for numpy batches")
        if x.data.ndim != 4 or x.data.shape[1] != 3:
            raise ShapeError(f"backbone input must be [N, 3, H, W], got {x.data.shape}")
        if x.data.dtype != self.dtype:
            x = T.Tensor(x.data.astype(self.dtype), requires_grad=x.requires_grad)
        h = T.relu(self.stem_bn.forward(self.stem_conv.forward(x), training))
        if self.config.stem.pool > 1:
            h = T.avg_pool2d(h, self.config.stem.pool)
        for i, blocks in enumerate(self.stages):
            for j, block in enumerate(blocks):
                block_sink = None
                if sink is not None and block.gam is not None:
                    block_sink = sink.setdefault(f"stage{i}.block{j}", {})
                h = block.forward(h, training, block_sink)
        return h

    def embed(self, x, training=False, sink=None):
        """Map [N, 3, H, W] images to unit-norm [N, D] embeddings."""
        feats = self.forward_features(x, training, sink)
        pooled = T.global_avg_pool(feats)
        return T.l2_normalize_rows(self.head.forward(pooled))

    def params(self):
        out = self.stem_conv.params("stem.conv") + self.stem_bn.params("stem.bn")
        for i, blocks in enumerate(self.stages):
            for j, block in enumerate(blocks):
                out += block.params(f"stage{i}.block{j}")
        out += self.head.params("head")
        return out

    def buffers(self):
        out = self.stem_bn.buffers("stem.bn")
        for i, blocks in enumerate(self.stages):
            for j, block in enumerate(blocks):
                out += block.buffers(f"stage{i}.block{j}")
        return out

    def num_parameters(self):
        return sum(p.data.size for _, p in self.params())

    def state_arrays(self):
        """All weights and running statistics as an ordered name -> array map."""
        state = {name: p.data for name, p in self.params()}
        for name, buf in self.buffers():
            state[name] = buf
        return state

    def load_state_arrays(self, arrays):
        """Load weights and statistics in place; shapes must match exactly."""
        state = {name: p for name, p in self.params()}
        buffer_map = dict(self.buffers())
        expected = set(state) | set(buffer_map)
        got = set(arrays)
        if expected != got:
            missing = sorted(expected - got)[:3]
            extra = sorted(got - expected)[:3]
            raise IntegrityError(
                f"model state mismatch; missing {missing}, unexpected {extra}")
        for name, p in state.items():
            arr = arrays[name]
            if tuple(arr.shape) != tuple(p.data.shape):
                raise IntegrityError(
                    f"shape mismatch for {name}: checkpoint {arr.shape}, model {p.data.shape}")
            p.data = arr.astype(self.dtype)
        for name, buf in buffer_map.items():
            arr = arrays[name]
            if tuple(arr.shape) != tuple(buf.shape):
                raise IntegrityError(
                    f"shape mismatch for {name}: checkpoint {arr.shape}, model {buf.shape}")
            buf[...] = arr


def save_model(path, model):
    """Write a standalone model checkpoint (structure plus weights)."""
    save_checkpoint(path, model.config.to_json(), model.state_arrays())


def load_model(path):
    """Rebuild a model from a standalone checkpoint written by save_model."""
    config_text, arrays = load_checkpoint(path)
    config = BackboneConfig.from_json(config_text)
    model = Backbone(config, seed=0)
    model.load_state_arrays(arrays)
    return model
