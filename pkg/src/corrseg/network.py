"""Multi-encoder segmentation network with a correlation block and attention fusion."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .blocks import (
    MODALITIES,
    ConvBlock,
    Conv3d,
    CRBlock,
    FusionBlock,
    Module,
    ResDilBlock,
    lce_forward,
    other_modalities,
)

REGIONS = ("complete", "core", "enhancing")

# Most similar modality per slot (FLAIR<->T2, T1<->T1c).
SIMILAR = {0: 3, 1: 2, 2: 1, 3: 0}


@dataclass
class NetworkConfig:
    input_size: int = 32
    levels: int = 3
    base_channels: int = 8
    n_modalities: int = 4
    n_regions: int = 3
    leaky_slope: float = 0.01
    cr_enabled: bool = True
    deep_supervision: bool = True
    norm_eps: float = 1e-5

    def validate(self) -> None:
        problems = []
        if self.levels < 1:
            problems.append(f"levels must be >= 1 (got {self.levels})")
        elif self.input_size % (2 ** (self.levels - 1)):
            problems.append(
                f"input_size {self.input_size} must be divisible by 2^(levels-1) = {2 ** (self.levels - 1)}"
            )
        if self.input_size < 1:
            problems.append(f"input_size must be positive (got {self.input_size})")
        if self.base_channels < 1:
            problems.append(f"base_channels must be positive (got {self.base_channels})")
        if self.n_modalities != 4:
            problems.append(f"n_modalities must be 4 (got {self.n_modalities})")
        if self.n_regions != 3:
            problems.append(f"n_regions must be 3 (got {self.n_regions})")
        if not 0.0 < self.leaky_slope < 1.0:
            problems.append(f"leaky_slope must lie in (0, 1) (got {self.leaky_slope})")
        if problems:
            raise ValueError("invalid NetworkConfig: " + "; ".join(problems))

    def channels(self, level: int) -> int:
        """Encoder channel count at 1-based ``level``."""
        return self.base_channels * 2 ** (level - 1)


@dataclass
class ForwardOutput:
    logits: Tensor
    probs: Tensor
    aux: list[Tensor]
    cr_features: list[Tensor] = field(default_factory=list)
    encoder_features: list[Tensor] = field(default_factory=list)


class Encoder(Module):
    def __init__(self, name, config: NetworkConfig, rng):
        self.levels = []
        c_prev = 1
        for level in range(1, config.levels + 1):
            c = config.channels(level)
            stride = 1 if level == 1 else 2
            conv = ConvBlock(
                f"{name}.level{level}", c_prev, c, rng, stride=stride,
                slope=config.leaky_slope, eps=config.norm_eps,
            )
            res = ResDilBlock(
                f"{name}.level{level}.res_dil", c, rng, slope=config.leaky_slope, eps=config.norm_eps
            )
            self.levels.append(_EncoderLevel(conv, res))
            c_prev = c

    def __call__(self, x: Tensor) -> list[Tensor]:
        feats = []
        for lvl in self.levels:
            x = lvl.res(lvl.conv(x))
            feats.append(x)
        return feats


class _EncoderLevel(Module):
    def __init__(self, conv, res):
        self.conv = conv
        self.res = res


class _DecoderLevel(Module):
    def __init__(self, name, c_in, c, rng, config: NetworkConfig):
        self.reduce = ConvBlock(f"{name}.up_conv", c_in, c, rng, slope=config.leaky_slope, eps=config.norm_eps)
        self.res = ResDilBlock(f"{name}.res_dil", 2 * c, rng, slope=config.leaky_slope, eps=config.norm_eps)


class SegNetwork(Module):
    """Four encoders, optional CR block, attention fusion, one decoder."""

    def __init__(self, config: NetworkConfig, seed: int = 0):
        config.validate()
        self.config = config
        self.seed = seed
        rng = np.random.default_rng(seed)
        L = config.levels
        c_bottom = config.channels(L)
        n = config.n_modalities
        self.encoders = [Encoder(f"encoder{i + 1}", config, rng) for i in range(n)]
        # the CR block draws from its own stream so that toggling it leaves
        # every other initial weight unchanged
        cr_rng = np.random.default_rng([seed, 1])
        self.cr = CRBlock("cr", c_bottom, cr_rng, n, config.leaky_slope) if config.cr_enabled else None
        self.fusion = FusionBlock("fusion", n * c_bottom, rng, config.leaky_slope)
        self.decoder = []
        c_in = n * c_bottom
        for level in range(L - 1, 0, -1):
            c = config.channels(level)
            self.decoder.append(_DecoderLevel(f"decoder.level{level}", c_in, c, rng, config))
            c_in = 2 * c
        # heads: bottleneck first, then decoder levels from coarse to fine
        self.heads = [Conv3d(f"head.level{L}", n * c_bottom, config.n_regions, rng, kernel=1)]
        for level in range(L - 1, 0, -1):
            self.heads.append(
                Conv3d(f"head.level{level}", 2 * config.channels(level), config.n_regions, rng, kernel=1)
            )
        names = [name for name, _ in self.named_parameters()]
        if len(names) != len(set(names)):
            raise AssertionError("duplicate parameter names")

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        unexpected = set(state) - set(params)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(unexpected)}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {p.shape}")
            p.data[...] = state[name]

    def astype(self, dtype) -> "SegNetwork":
        """Convert every parameter in place (float64 is used for gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = np.zeros_like(p.data)
        return self

    def cr_parameter_count(self) -> int:
        return self.cr.num_parameters() if self.cr is not None else 0

    def __call__(self, volumes, mask=None) -> ForwardOutput:
        return forward(self, volumes, mask)


def build_network(config: NetworkConfig, seed: int) -> SegNetwork:
    return SegNetwork(config, seed)


def substitute_missing(
    volumes: Sequence[Optional[Tensor]], mask: Sequence[bool]
) -> list[Tensor]:
    """Fill each missing slot with its most similar present modality.

    Pairs are FLAIR<->T2 and T1<->T1c; when the partner is absent too, the
    first present modality in (FLAIR, T1, T1c, T2) order is used.
    """
    if len(volumes) != 4 or len(mask) != 4:
        raise ValueError("expected four volumes and a four-entry mask")
    present = [bool(m) and volumes[i] is not None for i, m in enumerate(mask)]
    if not any(present):
        raise ValueError("cannot substitute: all modalities are missing")
    fallback = present.index(True)
    out = []
    for i in range(4):
        if present[i]:
            out.append(volumes[i])
        elif present[SIMILAR[i]]:
            out.append(volumes[SIMILAR[i]])
        else:
            out.append(volumes[fallback])
    return out


def _as_volume(v, dtype) -> Tensor:
    t = v if isinstance(v, Tensor) else Tensor(v, dtype=dtype)
    if t.data.ndim == 3:
        t = Tensor(t.data[None], dtype=t.dtype)
    return t


def _prepare(net: SegNetwork, volumes, mask) -> list[Tensor]:
    dtype = net.parameters()[0].dtype
    if mask is not None and not all(mask):
        volumes = substitute_missing(volumes, mask)
    if len(volumes) != net.config.n_modalities or any(v is None for v in volumes):
        raise ValueError("forward needs four volumes (substitute missing ones first)")
    vols = [_as_volume(v, dtype) for v in volumes]
    S = net.config.input_size
    for i, v in enumerate(vols):
        if v.shape != (1, S, S, S):
            raise ValueError(
                f"{MODALITIES[i]} volume has shape {v.shape}, network expects (1, {S}, {S}, {S})"
            )
    return vols


def encode(net: SegNetwork, volumes, mask=None) -> list[list[Tensor]]:
    vols = _prepare(net, volumes, mask)
    return [enc(v) for enc, v in zip(net.encoders, vols)]


def forward(net: SegNetwork, volumes, mask=None) -> ForwardOutput:
    cfg = net.config
    L = cfg.levels
    per_encoder = encode(net, volumes, mask)
    bottleneck = [feats[-1] for feats in per_encoder]

    if net.cr is not None:
        cr_features = net.cr(bottleneck)
        F = ad.concat_channels(cr_features)
    else:
        cr_features = []
        F = ad.concat_channels(bottleneck)
    x = net.fusion(F)

    level_logits = [net.heads[0](x)]
    for idx, dec in enumerate(net.decoder):
        level = L - 1 - idx
        skips = [feats[level - 1] for feats in per_encoder]
        skip = ad.scale(_sum_all(skips), 1.0 / len(skips))
        up = dec.reduce(ad.upsample3d(x, 2))
        x = dec.res(ad.concat_channels([up, skip]))
        level_logits.append(net.heads[idx + 1](x))

    if cfg.deep_supervision:
        aux = [
            ad.upsample3d(lg, 2 ** (L - 1 - i)) if i < L - 1 else lg
            for i, lg in enumerate(level_logits)
        ]
        logits = _sum_all(aux)
    else:
        aux = [level_logits[-1]]
        logits = level_logits[-1]
    return ForwardOutput(
        logits=logits,
        probs=ad.sigmoid(logits),
        aux=aux,
        cr_features=cr_features,
        encoder_features=bottleneck,
    )


def _sum_all(ts: Sequence[Tensor]) -> Tensor:
    out = ts[0]
    for t in ts[1:]:
        out = ad.add(out, t)
    return out


def recover_latent(net: SegNetwork, volumes, mask=None) -> list[Tensor]:
    """Correlation representations of each modality, computed from the other three.

    Diagnostic only; the segmentation path uses input substitution.
    """
    if net.cr is None:
        raise ValueError("recover_latent needs a network built with cr_enabled=True")
    bottleneck = [feats[-1] for feats in encode(net, volumes, mask)]
    gammas = net.cr.gammas(bottleneck)
    out = []
    for i, g in enumerate(gammas):
        j, k, m = other_modalities(i)
        out.append(lce_forward(g, bottleneck[j], bottleneck[k], bottleneck[m]))
    return out


# ---------------------------------------------------------------------------
# checkpoints


def _param_filename(name: str) -> str:
    return name + ".bin"


def save_checkpoint(net: SegNetwork, directory, epoch: int = 0, extra: dict | None = None) -> Path:
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create checkpoint directory {directory}: {exc}") from exc
    names = []
    for name, p in net.named_parameters():
        ad.save_tensor(p.data, directory / _param_filename(name))
        names.append(name)
    manifest = {
        "config": asdict(net.config),
        "parameters": names,
        "seed": net.seed,
        "epoch": epoch,
    }
    if extra:
        manifest.update(extra)
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return directory


def load_checkpoint(directory) -> SegNetwork:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    net = SegNetwork(NetworkConfig(**manifest["config"]), manifest.get("seed", 0))
    state = {
        name: ad.load_tensor(directory / _param_filename(name)).data for name in manifest["parameters"]
    }
    net.load_state_dict(state)
    return net


def checkpoint_exists(directory: str | os.PathLike) -> bool:
    return (Path(directory) / "manifest.json").is_file()
