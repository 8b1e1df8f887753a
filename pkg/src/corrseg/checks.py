"""Finite-difference gradient checks for every differentiable operation.

Each check reduces the operation's output to a scalar with a fixed random
projection (so no gradient is trivially uniform) and compares the tape
gradient with central differences in float64.
"""

from __future__ import annotations

import time
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .blocks import (
    MPE,
    ChannelAttention,
    ResDilBlock,
    SpatialAttention,
    Gamma,
    channel_attention,
    fuse,
    lce_forward,
    mpe_forward,
    res_dil_forward,
    spatial_attention,
)
from .network import NetworkConfig, build_network, forward
from .training import correlation_l1_loss, soft_dice_loss, total_loss

F64 = np.float64
TOLERANCE = 2e-3


def _t(a) -> Tensor:
    return Tensor(np.asarray(a, dtype=F64), dtype=F64)


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


def _cast_module(module):
    for p in module.parameters():
        p.data = p.data.astype(F64)
        p.grad = np.zeros_like(p.data)
    return module


def _op_checks(seed: int) -> dict[str, Callable[[], float]]:
    rng = np.random.default_rng(seed)
    h = 1e-5

    def with_fixed(op_builder, shape, sample=None):
        """Check an op of one varying tensor, other operands fixed."""
        x = sample if sample is not None else rng.standard_normal(shape)
        fixed_seed = int(rng.integers(1 << 31))

        def run():
            op = op_builder(np.random.default_rng(fixed_seed))
            proj = _t(np.random.default_rng(fixed_seed + 1).standard_normal(op(_t(x)).shape))
            return ad.gradcheck(lambda t: ad.sum(ad.mul(op(t), proj)), x, h)

        return run

    def conv_input(dilation, stride):
        def build(r):
            w = _t(r.standard_normal((3, 2, 3, 3, 3)) * 0.3)
            b = _t(r.standard_normal(3))
            return lambda t: ad.conv3d(t, w, b, dilation=dilation, stride=stride)

        return with_fixed(build, (2, 6, 6, 6))

    def conv_weight(dilation):
        def build(r):
            x = _t(r.standard_normal((2, 5, 5, 5)))
            b = _t(r.standard_normal(3))
            return lambda w: ad.conv3d(x, w, b, dilation=dilation)

        return with_fixed(build, (3, 2, 3, 3, 3))

    def conv_bias(r):
        x = _t(r.standard_normal((2, 4, 4, 4)))
        w = _t(r.standard_normal((3, 2, 3, 3, 3)))
        return lambda b: ad.conv3d(x, w, b)

    def dense_input(r):
        w = _t(r.standard_normal((3, 4)))
        b = _t(r.standard_normal(3))
        return lambda t: ad.dense(t, w, b)

    def dense_weight(r):
        x = _t(r.standard_normal(4))
        b = _t(r.standard_normal(3))
        return lambda w: ad.dense(x, w, b)

    def binary(kind, which, broadcast):
        def build(r):
            other = r.standard_normal((3,) if broadcast else (3, 2, 2, 2))
            if kind == "div":
                other = np.abs(other) + 0.5
            o = _t(other)
            fn = {"add": ad.add, "mul": ad.mul, "sub": ad.sub, "div": ad.div}[kind]
            if which == "a":
                return lambda t: fn(t, o)
            big = _t(r.standard_normal((3, 2, 2, 2)))
            return lambda t: fn(big, t)

        shape = (3, 2, 2, 2) if which == "a" or not broadcast else (3,)
        sample = None
        if kind == "div" and which == "b":
            sample = np.abs(rng.standard_normal(shape)) + 0.5
        return with_fixed(build, shape, sample)

    def concat(r):
        others = [_t(r.standard_normal((c, 2, 3, 2))) for c in (1, 3)]
        return lambda t: ad.concat_channels([others[0], t, others[1]])

    def identity_build(fn):
        return lambda r: fn

    checks = {
        "conv3d[input,d=1]": conv_input(1, 1),
        "conv3d[input,d=2]": conv_input(2, 1),
        "conv3d[input,d=4]": conv_input(4, 1),
        "conv3d[input,stride=2]": conv_input(1, 2),
        "conv3d[weight,d=1]": conv_weight(1),
        "conv3d[weight,d=2]": conv_weight(2),
        "conv3d[weight,d=4]": conv_weight(4),
        "conv3d[bias]": with_fixed(conv_bias, (3,)),
        "upsample3d": with_fixed(identity_build(lambda t: ad.upsample3d(t, 2)), (2, 2, 3, 2)),
        "dense[input]": with_fixed(dense_input, (4,)),
        "dense[weight]": with_fixed(dense_weight, (3, 4)),
        "relu": with_fixed(identity_build(ad.relu), (3, 4), _away_from_zero(rng, (3, 4))),
        "leaky_relu": with_fixed(identity_build(lambda t: ad.leaky_relu(t, 0.01)), (3, 4), _away_from_zero(rng, (3, 4))),
        "sigmoid": with_fixed(identity_build(ad.sigmoid), (3, 4)),
        "add": binary("add", "a", False),
        "add[per-channel]": binary("add", "b", True),
        "mul": binary("mul", "a", False),
        "mul[per-channel]": binary("mul", "b", True),
        "sub": binary("sub", "b", False),
        "div": binary("div", "b", False),
        "concat_channels": with_fixed(concat, (2, 2, 3, 2)),
        "slice_channels": with_fixed(identity_build(lambda t: ad.slice_channels(t, 1, 3)), (4, 2)),
        "global_avg_pool": with_fixed(identity_build(ad.global_avg_pool), (3, 2, 3, 2)),
        "channel_mean": with_fixed(identity_build(ad.channel_mean), (4, 2, 2, 2)),
        "channel_max": with_fixed(identity_build(ad.channel_max), (4, 2, 2, 2)),
        "instance_norm": with_fixed(identity_build(lambda t: ad.instance_norm(t, 1e-5)), (2, 3, 3, 3)),
        "abs": with_fixed(identity_build(ad.absolute), (3, 4), _away_from_zero(rng, (3, 4))),
        "mean": with_fixed(identity_build(ad.mean), (3, 4)),
    }
    return checks


def _block_checks(seed: int) -> dict[str, Callable[[], float]]:
    rng = np.random.default_rng(seed + 1000)
    h = 1e-5
    C = 2
    checks = {}

    def res_dil():
        block = _cast_module(ResDilBlock("b", C, np.random.default_rng(seed)))
        x = rng.standard_normal((C, 8, 8, 8))
        proj = _t(rng.standard_normal((C, 8, 8, 8)))
        return ad.gradcheck(lambda t: ad.sum(ad.mul(res_dil_forward(t, block), proj)), x, h,
                            max_elements=40, rng=np.random.default_rng(seed))

    def mpe():
        params = _cast_module(MPE("m", C, np.random.default_rng(seed)))
        x = rng.standard_normal((C, 3, 3, 3))
        return ad.gradcheck(lambda t: ad.sum(mpe_forward(t, params).alpha), x, h)

    def lce():
        coeffs = [_t(rng.standard_normal(C)) for _ in range(4)]
        f_k = _t(rng.standard_normal((C, 2, 2, 2)))
        f_m = _t(rng.standard_normal((C, 2, 2, 2)))
        proj = _t(rng.standard_normal((C, 2, 2, 2)))
        x = rng.standard_normal((C, 2, 2, 2))
        return ad.gradcheck(lambda t: ad.sum(ad.mul(lce_forward(Gamma(*coeffs), t, f_k, f_m), proj)), x, h)

    def lce_coeff():
        f = [_t(rng.standard_normal((C, 2, 2, 2))) for _ in range(3)]
        rest = [_t(rng.standard_normal(C)) for _ in range(3)]
        proj = _t(rng.standard_normal((C, 2, 2, 2)))
        x = rng.standard_normal(C)
        return ad.gradcheck(lambda t: ad.sum(ad.mul(lce_forward(Gamma(t, *rest), *f), proj)), x, h)

    def chan_att():
        params = _cast_module(ChannelAttention("c", 4 * C, np.random.default_rng(seed)))
        x = rng.standard_normal((4 * C, 2, 2, 2))
        proj = _t(rng.standard_normal(4 * C))
        return ad.gradcheck(lambda t: ad.sum(ad.mul(channel_attention(t, params), proj)), x, h)

    def spat_att():
        params = _cast_module(SpatialAttention("s", np.random.default_rng(seed)))
        x = rng.standard_normal((4 * C, 3, 3, 3))
        proj = _t(rng.standard_normal((1, 3, 3, 3)))
        return ad.gradcheck(lambda t: ad.sum(ad.mul(spatial_attention(t, params), proj)), x, h)

    def fuse_check():
        cw = _t(1 / (1 + np.exp(-rng.standard_normal(4 * C))))
        sw = _t(1 / (1 + np.exp(-rng.standard_normal((1, 2, 2, 2)))))
        proj = _t(rng.standard_normal((4 * C, 2, 2, 2)))
        x = rng.standard_normal((4 * C, 2, 2, 2))
        return ad.gradcheck(lambda t: ad.sum(ad.mul(fuse(t, cw, sw), proj)), x, h)

    def cr_to_fusion():
        mpes = [_cast_module(MPE(f"m{i}", C, np.random.default_rng(seed + i))) for i in range(4)]
        ca = _cast_module(ChannelAttention("c", 4 * C, np.random.default_rng(seed + 7)))
        sa = _cast_module(SpatialAttention("s", np.random.default_rng(seed + 8)))
        others = [_t(rng.standard_normal((C, 2, 2, 2))) for _ in range(3)]
        proj = _t(rng.standard_normal((4 * C, 2, 2, 2)))

        def f(t):
            feats = [t, *others]
            reps = []
            for i in range(4):
                rest = [feats[j] for j in range(4) if j != i]
                reps.append(lce_forward(mpe_forward(feats[i], mpes[i]), *rest))
            F = ad.concat_channels(reps)
            return ad.sum(ad.mul(fuse(F, channel_attention(F, ca), spatial_attention(F, sa)), proj))

        return ad.gradcheck(f, rng.standard_normal((C, 2, 2, 2)), h)

    def dice():
        labels = _t((rng.random((3, 3, 3, 3)) > 0.5).astype(F64))
        logits = rng.standard_normal((3, 3, 3, 3))
        return ad.gradcheck(lambda t: soft_dice_loss(ad.sigmoid(t), labels), logits, h)

    def l1():
        enc = [_t(rng.standard_normal((C, 2, 2, 2))) for _ in range(4)]
        rest = [_t(rng.standard_normal((C, 2, 2, 2))) for _ in range(3)]
        x = enc[0].data + _away_from_zero(rng, (C, 2, 2, 2))
        return ad.gradcheck(lambda t: correlation_l1_loss([t, *rest], enc), x, h)

    checks.update({
        "res_dil_block": res_dil,
        "mpe": mpe,
        "lce[features]": lce,
        "lce[coefficients]": lce_coeff,
        "channel_attention": chan_att,
        "spatial_attention": spat_att,
        "fuse": fuse_check,
        "mpe->lce->attention->fuse": cr_to_fusion,
        "soft_dice_loss": dice,
        "correlation_l1_loss": l1,
    })
    return checks


def network_loss_check(seed: int, cr_enabled: bool = True, per_param: int = 2) -> float:
    """Total loss of a tiny 8^3 network vs finite differences on its parameters."""
    cfg = NetworkConfig(input_size=8, levels=3, base_channels=2, cr_enabled=cr_enabled)
    net = build_network(cfg, seed).astype(F64)
    rng = np.random.default_rng(seed + 2000)
    vols = [_t(rng.standard_normal((1, 8, 8, 8))) for _ in range(4)]
    labels = _t((rng.random((3, 8, 8, 8)) > 0.7).astype(F64))

    def loss_fn():
        loss, _ = total_loss(forward(net, vols), labels)
        return loss

    return ad.param_gradcheck(loss_fn, net.parameters(), h=1e-6, per_param=per_param,
                              rng=np.random.default_rng(seed), abs_floor=1e-6)


def gradcheck_suite(seeds=(0, 1, 2), include_network: bool = True) -> dict[str, float]:
    """Worst relative error per check over ``seeds``."""
    results: dict[str, float] = {}
    for seed in seeds:
        checks = {**_op_checks(seed), **_block_checks(seed)}
        if include_network:
            checks["network_total_loss"] = lambda s=seed: network_loss_check(s, True)
            checks["network_total_loss[cr off]"] = lambda s=seed: network_loss_check(s, False)
        for name, fn in checks.items():
            results[name] = max(results.get(name, 0.0), float(fn()))
    return results


def run_and_print(seeds=(0, 1, 2), tolerance: float = TOLERANCE) -> bool:
    start = time.perf_counter()
    results = gradcheck_suite(seeds)
    ok = True
    for name, err in results.items():
        flag = "ok" if err <= tolerance else "FAIL"
        ok &= err <= tolerance
        print(f"{name:32s} max_rel_err={err:.2e} {flag}")
    print(f"{len(results)} checks, seeds {list(seeds)}, {time.perf_counter() - start:.1f}s")
    return ok
