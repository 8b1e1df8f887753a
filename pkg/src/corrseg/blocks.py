"""Layer containers and the network's building blocks.

Contains the residual dilated block, the correlation-representation pieces
(parameter estimation + linear correlation expression) and the
channel/spatial attention fusion.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor

MODALITIES = ("flair", "t1", "t1c", "t2")


class Module:
    """Base container; parameters are discovered from attributes."""

    def named_parameters(self) -> Iterator[tuple[str, Parameter]]:
        for value in vars(self).values():
            if isinstance(value, Parameter):
                yield value.name, value
            elif isinstance(value, Module):
                yield from value.named_parameters()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.named_parameters()

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


def _he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


class Conv3d(Module):
    def __init__(self, name, c_in, c_out, rng, kernel=3, dilation=1, stride=1):
        self.weight = Parameter(
            f"{name}.weight",
            _he_normal(rng, (c_out, c_in, kernel, kernel, kernel), c_in * kernel**3),
        )
        self.bias = Parameter(f"{name}.bias", np.zeros(c_out, dtype=np.float32))
        self.dilation = dilation
        self.stride = stride

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv3d(x, self.weight, self.bias, dilation=self.dilation, stride=self.stride)


class Dense(Module):
    def __init__(self, name, c_in, c_out, rng):
        self.weight = Parameter(f"{name}.weight", _he_normal(rng, (c_out, c_in), c_in))
        self.bias = Parameter(f"{name}.bias", np.zeros(c_out, dtype=np.float32))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.dense(x, self.weight, self.bias)


class ConvBlock(Module):
    """conv -> instance norm -> leaky ReLU."""

    def __init__(self, name, c_in, c_out, rng, stride=1, slope=0.01, eps=1e-5):
        self.conv = Conv3d(f"{name}.conv", c_in, c_out, rng, stride=stride)
        self.slope = slope
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.leaky_relu(ad.instance_norm(self.conv(x), self.eps), self.slope)


class ResDilBlock(Module):
    """Residual block whose two convolutions use dilation 2 then 4."""

    def __init__(self, name, channels, rng, slope=0.01, eps=1e-5):
        self.channels = channels
        self.conv_a = Conv3d(f"{name}.conv_a", channels, channels, rng, dilation=2)
        self.conv_b = Conv3d(f"{name}.conv_b", channels, channels, rng, dilation=4)
        self.slope = slope
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return res_dil_forward(x, self)


def res_dil_forward(x: Tensor, block: ResDilBlock) -> Tensor:
    """``x + conv_b(act(norm(conv_a(act(norm(x))))))``."""
    if x.shape[0] != block.channels:
        raise ValueError(f"res_dil block expects {block.channels} channels, got {x.shape[0]}")
    h = ad.leaky_relu(ad.instance_norm(x, block.eps), block.slope)
    h = block.conv_a(h)
    h = ad.leaky_relu(ad.instance_norm(h, block.eps), block.slope)
    h = block.conv_b(h)
    return ad.add(x, h)


# ---------------------------------------------------------------------------
# correlation representation


@dataclass
class Gamma:
    """Per-channel coefficients of one modality's linear correlation expression."""

    alpha: Tensor
    beta: Tensor
    gamma: Tensor
    delta: Tensor

    def __post_init__(self):
        lengths = {t.shape for t in self.components()}
        if len(lengths) != 1 or len(next(iter(lengths))) != 1:
            raise ValueError(f"Gamma components must be equal-length vectors, got {lengths}")

    def components(self) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        return (self.alpha, self.beta, self.gamma, self.delta)

    @property
    def channels(self) -> int:
        return self.alpha.shape[0]


class MPE(Module):
    """Model parameter estimation: two dense layers from pooled features to Gamma."""

    def __init__(self, name, channels, rng, slope=0.01):
        self.channels = channels
        self.fc1 = Dense(f"{name}.fc1", channels, channels, rng)
        self.fc2 = Dense(f"{name}.fc2", channels, 4 * channels, rng)
        self.slope = slope

    def __call__(self, f: Tensor) -> Gamma:
        return mpe_forward(f, self)


def mpe_forward(f: Tensor, params: MPE) -> Gamma:
    C = params.channels
    if f.shape[0] != C:
        raise ValueError(f"MPE expects {C} channels, got feature map of shape {f.shape}")
    pooled = ad.global_avg_pool(f)
    hidden = ad.leaky_relu(params.fc1(pooled), params.slope)
    out = params.fc2(hidden)
    parts = [ad.slice_channels(out, i * C, (i + 1) * C) for i in range(4)]
    return Gamma(*parts)


def other_modalities(i: int, n: int = 4) -> tuple[int, ...]:
    """Indices bound to (alpha, beta, gamma) for modality ``i``: the rest, ascending."""
    return tuple(j for j in range(n) if j != i)


def lce_forward(gamma: Gamma, f_j: Tensor, f_k: Tensor, f_m: Tensor) -> Tensor:
    """``alpha*f_j + beta*f_k + gamma*f_m + delta`` with per-channel broadcasting."""
    if not (f_j.shape == f_k.shape == f_m.shape):
        raise ValueError(f"LCE features differ in shape: {f_j.shape}, {f_k.shape}, {f_m.shape}")
    if f_j.shape[0] != gamma.channels:
        raise ValueError(f"Gamma has {gamma.channels} channels, features have {f_j.shape[0]}")
    out = ad.mul(f_j, gamma.alpha)
    out = ad.add(out, ad.mul(f_k, gamma.beta))
    out = ad.add(out, ad.mul(f_m, gamma.gamma))
    return ad.add(out, gamma.delta)


class CRBlock(Module):
    """One MPE per modality; produces the four correlation representations."""

    def __init__(self, name, channels, rng, n_modalities=4, slope=0.01):
        self.mpe = [MPE(f"{name}.mpe{i}", channels, rng, slope) for i in range(n_modalities)]

    def gammas(self, features: Sequence[Tensor]) -> list[Gamma]:
        return [mpe(f) for mpe, f in zip(self.mpe, features)]

    def __call__(self, features: Sequence[Tensor]) -> list[Tensor]:
        gammas = self.gammas(features)
        out = []
        for i, g in enumerate(gammas):
            j, k, m = other_modalities(i, len(features))
            out.append(lce_forward(g, features[j], features[k], features[m]))
        return out


# ---------------------------------------------------------------------------
# attention fusion


@dataclass
class FusionWeights:
    channel_w: Tensor
    spatial_w: Tensor


class ChannelAttention(Module):
    def __init__(self, name, channels, rng, reduction=4, slope=0.01):
        if channels % 4:
            raise ValueError(f"channel attention input must have 4C channels, got {channels}")
        self.channels = channels
        self.fc1 = Dense(f"{name}.fc1", channels, channels // reduction, rng)
        self.fc2 = Dense(f"{name}.fc2", channels // reduction, channels, rng)
        self.slope = slope

    def __call__(self, F: Tensor) -> Tensor:
        return channel_attention(F, self)


def channel_attention(F: Tensor, params: ChannelAttention) -> Tensor:
    if F.shape[0] != params.channels:
        raise ValueError(f"channel attention expects {params.channels} channels, got {F.shape[0]}")
    squeezed = ad.global_avg_pool(F)
    hidden = ad.leaky_relu(params.fc1(squeezed), params.slope)
    return ad.sigmoid(params.fc2(hidden))


class SpatialAttention(Module):
    def __init__(self, name, rng):
        self.conv = Conv3d(f"{name}.conv", 2, 1, rng)

    def __call__(self, F: Tensor) -> Tensor:
        return spatial_attention(F, self)


def spatial_attention(F: Tensor, params: SpatialAttention) -> Tensor:
    """Sigmoid of a 3^3 conv over the [channel mean, channel max] map; shape [1,D,H,W]."""
    squeezed = ad.concat_channels([ad.channel_mean(F), ad.channel_max(F)])
    return ad.sigmoid(params.conv(squeezed))


def fuse(F: Tensor, channel_w: Tensor, spatial_w: Tensor) -> Tensor:
    """``F*channel_w + F*spatial_w``, broadcasting per channel and per voxel."""
    if channel_w.shape != (F.shape[0],):
        raise ValueError(f"channel weights {channel_w.shape} do not match F {F.shape}")
    if spatial_w.shape != (1,) + F.shape[1:]:
        raise ValueError(f"spatial weights {spatial_w.shape} do not match F {F.shape}")
    F_c = ad.mul(F, channel_w)
    F_s = ad.mul(F, spatial_w)
    return ad.add(F_c, F_s)


class FusionBlock(Module):
    def __init__(self, name, channels, rng, slope=0.01):
        self.channel = ChannelAttention(f"{name}.channel", channels, rng, slope=slope)
        self.spatial = SpatialAttention(f"{name}.spatial", rng)

    def weights(self, F: Tensor) -> FusionWeights:
        return FusionWeights(self.channel(F), self.spatial(F))

    def __call__(self, F: Tensor) -> Tensor:
        w = self.weights(F)
        return fuse(F, w.channel_w, w.spatial_w)
