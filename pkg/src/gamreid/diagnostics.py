"""Finite-difference verification battery over every differentiable op.

Each case perturbs one input tensor of one operation (or composition)
and compares the analytic gradient of a scalar reduction against central
differences. The battery is deterministic for a given seed.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .acl import MemoryBank, acl_loss
from .attention import GroupedAttentionModule
from .backbone import Bottleneck, BottleneckSpec
from .idl import InstanceBank, idl_loss


@dataclass
class BatteryResult:
    name: str
    cases: int
    max_err: float


def _away_from(x, threshold=0.05):
    """Push values away from zero so kinked ops see clean neighborhoods."""
    return x + np.sign(x) * threshold + (x == 0) * threshold


class _Battery:
    def __init__(self, seed=0, eps=1e-5):
        self.rng = np.random.default_rng(np.random.SeedSequence([seed]))
        self.eps = eps
        self.results = []

    def check(self, name, fn, data):
        x = T.Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)
        self.check_tensor(name, fn, x)

    def check_tensor(self, name, fn, x):
        err = T.grad_check(fn, x, self.eps)
        for r in self.results:
            if r.name == name:
                r.cases += 1
                r.max_err = max(r.max_err, err)
                return
        self.results.append(BatteryResult(name, 1, err))

    def normal(self, *shape):
        return self.rng.normal(0.0, 1.0, size=shape)


def run_battery(seed=0, eps=1e-5):
    """Run every gradient check; returns a list of BatteryResult."""
    b = _Battery(seed, eps)
    rng = b.rng

    # convolution: every role, across grouping, stride, padding, kernel
    for groups in (1, 2, 4):
        for stride in (1, 2):
            for k, padding in ((1, 0), (3, 1)):
                cin, cout = 4, 6 if groups == 1 else 4
                x0 = b.normal(2, cin, 5, 4)
                w0 = b.normal(cout, cin // groups, k, k) * 0.5
                bias0 = b.normal(cout) * 0.1
                w_t = T.Tensor(w0)
                x_t = T.Tensor(x0)
                bias_t = T.Tensor(bias0)
                b.check("conv2d/x",
                        lambda v, w=w_t, g=groups, s=stride, p=padding:
                        T.sum_all(T.conv2d(v, w, groups=g, stride=s, padding=p)), x0)
                b.check("conv2d/w",
                        lambda v, x=x_t, g=groups, s=stride, p=padding:
                        T.sum_all(T.conv2d(x, v, groups=g, stride=s, padding=p)), w0)
                b.check("conv2d/b",
                        lambda v, x=x_t, w=w_t, g=groups, s=stride, p=padding:
                        T.sum_all(T.conv2d(x, w, v, groups=g, stride=s, padding=p)), bias0)

    # linear
    for _ in range(6):
        x0 = b.normal(3, 5)
        w0 = b.normal(4, 5)
        bias0 = b.normal(4)
        w_t, x_t, bias_t = T.Tensor(w0), T.Tensor(x0), T.Tensor(bias0)
        b.check("linear/x", lambda v, w=w_t, c=bias_t: T.mean_all(T.linear(v, w, c)), x0)
        b.check("linear/w", lambda v, x=x_t, c=bias_t: T.mean_all(T.linear(x, v, c)), w0)
        b.check("linear/b", lambda v, x=x_t, w=w_t: T.mean_all(T.linear(x, w, v)), bias0)

    # batch normalization, both modes, every learnable role; the objective
    # weights each output so the gradient is not annihilated by the
    # normalization's zero-sum structure
    for training in (True, False):
        mode = "train" if training else "eval"
        for _ in range(4):
            c = 3
            x0 = b.normal(4, c, 3, 2) * 2.0
            g0 = 1.0 + 0.3 * b.normal(c)
            beta0 = 0.2 * b.normal(c)
            rm = b.normal(c) * 0.1
            rv = 1.0 + 0.2 * np.abs(b.normal(c))
            g_t, beta_t = T.Tensor(g0), T.Tensor(beta0)
            x_t = T.Tensor(x0)
            wts = T.Tensor(b.normal(4, c, 3, 2))

            def bn(x, gamma, beta, tr=training, m=rm, v=rv, w=wts):
                return T.sum_all(T.mul(T.batchnorm2d(
                    x, gamma, beta, m.copy(), v.copy(), training=tr), w))

            b.check(f"batchnorm2d[{mode}]/x", lambda v_, g_=g_t, be=beta_t: bn(v_, g_, be), x0)
            b.check(f"batchnorm2d[{mode}]/gamma", lambda v_, x=x_t, be=beta_t: bn(x, v_, be), g0)
            b.check(f"batchnorm2d[{mode}]/beta", lambda v_, x=x_t, g_=g_t: bn(x, g_, v_), beta0)

    # elementwise
    for _ in range(6):
        b.check("relu", lambda v: T.sum_all(T.relu(v)), _away_from(b.normal(3, 4)))
        b.check("sigmoid", lambda v: T.sum_all(T.sigmoid(v)), b.normal(3, 4) * 2)
        b.check("log", lambda v: T.sum_all(T.log(v)), 0.3 + np.abs(b.normal(3, 4)))
        b.check("scale_shift", lambda v: T.sum_all(T.scale_shift(v, -2.5, 0.75)), b.normal(4, 3))

    # add and the gating mul patterns
    for _ in range(5):
        other = T.Tensor(b.normal(3, 4))
        b.check("add", lambda v, o=other: T.sum_all(T.add(v, o)), b.normal(3, 4))
        fmap = T.Tensor(b.normal(2, 3, 4, 3))
        b.check("mul/channel-gate",
                lambda v, f=fmap: T.sum_all(T.mul(v, f)), b.normal(2, 3, 1, 1))
        b.check("mul/spatial-gate",
                lambda v, f=fmap: T.sum_all(T.mul(v, f)), b.normal(2, 1, 4, 3))
        b.check("mul/same-shape",
                lambda v, f=fmap: T.sum_all(T.mul(f, v)), b.normal(2, 3, 4, 3))

    # pooling and shape ops
    for _ in range(5):
        b.check("global_avg_pool",
                lambda v: T.sum_all(T.global_avg_pool(v)), b.normal(2, 3, 4, 5))
        b.check("channel_avg_pool",
                lambda v: T.sum_all(T.channel_avg_pool(v)), b.normal(2, 4, 3, 3))
        b.check("avg_pool2d", lambda v: T.sum_all(T.avg_pool2d(v, 2)), b.normal(2, 3, 4, 6))
        b.check("reshape", lambda v: T.sum_all(T.reshape(v, (6, 4))), b.normal(2, 3, 4))
        b.check("slice_rows", lambda v: T.sum_all(T.slice_rows(v, 1, 4)), b.normal(5, 3))
        rows = rng.integers(0, 4, size=6)
        cols = rng.integers(0, 5, size=6)
        b.check("gather_entries",
                lambda v, r=rows, c=cols: T.sum_all(T.gather_entries(v, r, c)),
                b.normal(4, 5))

    # reductions and row maps
    for _ in range(5):
        b.check("sum_all", T.sum_all, b.normal(3, 4))
        b.check("mean_all", T.mean_all, b.normal(2, 3, 2))
        l2_weights = T.Tensor(b.normal(4, 5))
        b.check("l2_normalize_rows",
                lambda v, w=l2_weights: T.sum_all(T.mul(T.l2_normalize_rows(v), w)),
                b.normal(4, 5) + 0.5)
    # logits drawn at the temperature's scale keep every probability in a
    # range where central differences resolve the gradient
    for tau in (0.05, 0.1, 1.0):
        for _ in range(3):
            weights = T.Tensor(b.normal(3, 6))
            b.check(f"softmax_rows[tau={tau}]",
                    lambda v, t=tau, w=weights: T.sum_all(T.mul(T.softmax_rows(v, t), w)),
                    b.normal(3, 6) * tau)
            rows = np.arange(3)
            cols = rng.integers(0, 6, size=3)
            b.check(f"log_complement_softmax[tau={tau}]",
                    lambda v, t=tau, r=rows, c=cols:
                    T.sum_all(T.log_complement_softmax_entries(v, r, c, t)),
                    b.normal(3, 6) * tau)

    # losses end to end (both reductions)
    for reduction in ("sum", "mean"):
        for _ in range(3):
            n, bsz, d = 7, 3, 4
            bank = InstanceBank(b.normal(n, d))
            idx = rng.choice(n, size=bsz, replace=False)

            def idl(v, bank=bank, idx=idx, red=reduction, bsz=bsz):
                f_orig = T.l2_normalize_rows(T.slice_rows(v, 0, bsz))
                f_aug = T.l2_normalize_rows(T.slice_rows(v, bsz, 2 * bsz))
                return idl_loss(idx, f_aug, f_orig, bank, 0.1, red)

            b.check(f"idl_loss[{reduction}]", idl, b.normal(2 * bsz, d))

            mbank = MemoryBank.singletons(b.normal(n, d))
            assign = rng.integers(0, n, size=bsz)

            def acl(v, mb=mbank, a=assign, red=reduction):
                return acl_loss(T.l2_normalize_rows(v), a, mb, 0.1, red)

            b.check(f"acl_loss[{reduction}]", acl, b.normal(bsz, d))

    # attention module: input and each parameter
    for _ in range(3):
        gam = GroupedAttentionModule(4, rng)
        x0 = b.normal(2, 4, 5, 3)
        x_t = T.Tensor(x0)
        b.check("attention/x", lambda v, m=gam: T.sum_all(m.forward(v)), x0)
        for pname, pt in gam.params("gam"):
            # the parameter tensor itself is perturbed; the closure input
            # is that same tensor, so analytic gradients land on it
            b.check_tensor(f"attention/{pname.split('.', 1)[1]}",
                           lambda v, m=gam, x=x_t: T.sum_all(m.forward(x)), pt)

    # bottleneck block with attention inside, then a scalar head
    for training in (False, True):
        mode = "train" if training else "eval"
        spec = BottleneckSpec(4, 4, 8, stride=2)
        block = Bottleneck(rng, spec, groups=2, use_gam=True, use_bn=True)
        x0 = b.normal(2, 4, 6, 4)
        x_t = T.Tensor(x0)

        def block_out(v, blk=block, tr=training):
            return T.mean_all(blk.forward(v, training=tr))

        b.check(f"bottleneck[{mode}]/x", block_out, x0)
        b.check_tensor(f"bottleneck[{mode}]/conv2.weight",
                       lambda v, blk=block, x=x_t, tr=training:
                       T.mean_all(blk.forward(x, training=tr)),
                       block.conv2.weight)
        b.check_tensor(f"bottleneck[{mode}]/gam.fc_weight",
                       lambda v, blk=block, x=x_t, tr=training:
                       T.mean_all(blk.forward(x, training=tr)),
                       block.gam.channel.fc_weight)

    return b.results


def total_cases(results):
    return sum(r.cases for r in results)


def worst(results):
    return max(r.max_err for r in results)
