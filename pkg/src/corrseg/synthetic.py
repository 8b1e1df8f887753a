"""Synthetic four-modality phantoms with nested tumour regions.

Each phantom has an ellipsoidal brain containing three nested ellipsoidal
regions (complete tumour > core > enhancing). Four latent tissue fields
(healthy brain, edema, non-enhancing core, enhancing) are smoothed region
indicators; each modality is a fixed linear mix of these fields plus Gaussian
noise, normalised per volume. Because the mix is linear, any modality is close
to a per-voxel linear combination of the others.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .autodiff import Tensor, load_tensor, save_tensor
from .blocks import MODALITIES

# rows: FLAIR, T1, T1c, T2; columns: healthy brain, edema, core, enhancing.
# Intensity rises edema -> core -> enhancing in every modality (shared
# factor), FLAIR/T2 carry most of the healthy/edema contrast and T1c the
# enhancing contrast. Found by search so that tumour-voxel |r| >= 0.5 for
# every pair at zero noise; smallest singular value ~0.22.
DEFAULT_MIXING = (
    (0.83, 1.87, 1.92, 1.99),
    (1.07, 1.35, 1.73, 2.17),
    (0.88, 1.16, 1.65, 2.65),
    (0.89, 2.09, 2.82, 2.19),
)


# Lower bound on |r| between any two modalities over head voxels for
# noise_sigma <= 0.1 with the default mixing (measured minimum ~0.70 over
# 100 phantoms at sigma 0.1).
HEAD_CORRELATION_FLOOR = 0.65


@dataclass
class PhantomSpec:
    size: int = 32
    seed: int = 0
    noise_sigma: float = 0.05
    mixing: tuple = DEFAULT_MIXING
    # radii as fractions of ``size``
    brain_radius: tuple = (0.36, 0.44)
    complete_radius: tuple = (0.16, 0.26)
    core_scale: tuple = (0.5, 0.75)  # core radius / complete radius
    enhancing_scale: tuple = (0.45, 0.75)  # enhancing radius / core radius
    smoothing: float = 0.8  # Gaussian sigma (voxels) for the latent fields
    tumor_fraction_range: tuple = (0.01, 0.1)  # expected mean complete-tumour fraction

    def __post_init__(self):
        self.mixing = tuple(tuple(float(v) for v in row) for row in self.mixing)
        for name in ("brain_radius", "complete_radius", "core_scale", "enhancing_scale", "tumor_fraction_range"):
            setattr(self, name, tuple(float(v) for v in getattr(self, name)))

    def validate(self) -> None:
        m = np.asarray(self.mixing, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError(f"mixing matrix must be 4x4, got shape {m.shape}")
        smin = np.linalg.svd(m, compute_uv=False).min()
        if smin <= 0.1:
            raise ValueError(f"mixing matrix is ill-conditioned: smallest singular value {smin:.4f} <= 0.1")
        if self.size < 8:
            raise ValueError(f"phantom size must be >= 8, got {self.size}")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be non-negative, got {self.noise_sigma}")
        for name in ("brain_radius", "complete_radius", "core_scale", "enhancing_scale"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ValueError(f"{name} must satisfy 0 < low <= high, got {(lo, hi)}")
        if self.core_scale[1] >= 1 or self.enhancing_scale[1] >= 1:
            raise ValueError("core_scale and enhancing_scale must stay below 1 (regions nest)")

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: (list(map(list, v)) if k == "mixing" else list(v) if isinstance(v, tuple) else v)
                for k, v in d.items()}

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Sample:
    volumes: list[Tensor]  # four [1,S,S,S] tensors in MODALITIES order
    labels: Tensor  # [3,S,S,S] binary: complete, core, enhancing
    meta: dict = field(default_factory=dict)
    brain: np.ndarray | None = None  # head mask, kept in memory only


def _ellipsoid(grid, center, radii) -> np.ndarray:
    z, y, x = grid
    return (
        ((z - center[0]) / radii[0]) ** 2
        + ((y - center[1]) / radii[1]) ** 2
        + ((x - center[2]) / radii[2]) ** 2
    ) <= 1.0


def _place_regions(spec: PhantomSpec, rng: np.random.Generator, grid):
    S = spec.size
    mid = (S - 1) / 2.0
    for _ in range(100):
        brain_r = rng.uniform(*spec.brain_radius, size=3) * S
        brain_c = mid + rng.uniform(-0.04, 0.04, size=3) * S
        comp_r = rng.uniform(*spec.complete_radius, size=3) * S
        # keep the tumour centre well inside the brain
        comp_c = brain_c + rng.uniform(-1, 1, size=3) * np.maximum(brain_r - comp_r, 0) * 0.6
        core_r = comp_r * rng.uniform(*spec.core_scale, size=3)
        core_c = comp_c + rng.uniform(-1, 1, size=3) * (comp_r - core_r) * 0.5
        enh_r = core_r * rng.uniform(*spec.enhancing_scale, size=3)
        enh_c = core_c + rng.uniform(-1, 1, size=3) * (core_r - enh_r) * 0.5

        brain = _ellipsoid(grid, brain_c, brain_r)
        complete = _ellipsoid(grid, comp_c, comp_r)
        core = _ellipsoid(grid, core_c, core_r)
        enh = _ellipsoid(grid, enh_c, enh_r)
        if not enh.any():
            continue
        nested = (
            not (enh & ~core).any()
            and not (core & ~complete).any()
            and not (complete & ~brain).any()
        )
        if nested:
            return brain, complete, core, enh
    raise RuntimeError(
        f"could not place nested regions inside the brain after 100 attempts "
        f"(size={S}, complete_radius={spec.complete_radius}, brain_radius={spec.brain_radius})"
    )


def generate_sample(spec: PhantomSpec, index: int) -> Sample:
    """Deterministic phantom number ``index`` of ``spec``."""
    spec.validate()
    rng = np.random.default_rng([spec.seed, index])
    S = spec.size
    grid = np.meshgrid(*(np.arange(S, dtype=np.float64),) * 3, indexing="ij")
    brain, complete, core, enh = _place_regions(spec, rng, grid)

    tissues = [brain & ~complete, complete & ~core, core & ~enh, enh]
    latent = np.stack([
        ndimage.gaussian_filter(t.astype(np.float64), spec.smoothing) if spec.smoothing > 0 else t.astype(np.float64)
        for t in tissues
    ])
    mixing = np.asarray(spec.mixing, dtype=np.float64)
    volumes = np.tensordot(mixing, latent, axes=1)
    if spec.noise_sigma > 0:
        volumes = volumes + rng.normal(0.0, spec.noise_sigma, size=volumes.shape)

    out = []
    for v in volumes:
        v = (v - v.mean()) / v.std()
        out.append(Tensor(v[None].astype(np.float32)))
    labels = np.stack([complete, core, enh]).astype(np.float32)
    meta = {"seed": spec.seed, "index": index, "spec_hash": spec.hash()}
    return Sample(out, Tensor(labels), meta, brain)


def generate_samples(spec: PhantomSpec, indices) -> list[Sample]:
    return [generate_sample(spec, int(i)) for i in indices]


# ---------------------------------------------------------------------------
# on-disk datasets


def _write_sample(sample: Sample, directory: Path) -> dict:
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create sample directory {directory}: {exc}") from exc
    for name, vol in zip(MODALITIES, sample.volumes):
        save_tensor(vol, directory / f"{name}.bin")
    save_tensor(sample.labels, directory / "labels.bin")
    return {"index": sample.meta["index"], "path": directory.name}


def make_dataset(spec: PhantomSpec, n_train: int, n_test: int, out_dir) -> tuple[list[dict], list[dict]]:
    """Generate train indices ``[0, n_train)`` and test indices after them, write to ``out_dir``."""
    if n_train <= 0 or n_test <= 0:
        raise ValueError(f"n_train and n_test must be positive, got {n_train}, {n_test}")
    out_dir = Path(out_dir)
    train, test = [], []
    for idx in range(n_train + n_test):
        entry = _write_sample(generate_sample(spec, idx), out_dir / f"sample_{idx}")
        (train if idx < n_train else test).append(entry)
    manifest = {"spec": spec.to_dict(), "spec_hash": spec.hash(), "train": train, "test": test}
    path = out_dir / "manifest.json"
    try:
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write dataset manifest {path}: {exc}") from exc
    return train, test


def spec_from_dict(d: dict) -> PhantomSpec:
    return PhantomSpec(**d)


def load_sample(directory) -> Sample:
    directory = Path(directory)
    volumes = [load_tensor(directory / f"{name}.bin") for name in MODALITIES]
    labels = load_tensor(directory / "labels.bin")
    idx = int(directory.name.rsplit("_", 1)[-1])
    return Sample(volumes, labels, {"index": idx})


def load_dataset(directory) -> tuple[list[Sample], list[Sample], dict]:
    directory = Path(directory)
    path = directory / "manifest.json"
    if not path.is_file():
        raise FileNotFoundError(f"dataset manifest not found: {path}")
    manifest = json.loads(path.read_text())
    train = [load_sample(directory / e["path"]) for e in manifest["train"]]
    test = [load_sample(directory / e["path"]) for e in manifest["test"]]
    return train, test, manifest


# ---------------------------------------------------------------------------
# diagnostics


def modality_correlations(sample: Sample, region: np.ndarray | None = None) -> np.ndarray:
    """4x4 Pearson correlation of modality intensities over ``region`` voxels."""
    vals = np.stack([v.data.reshape(-1) for v in sample.volumes]).astype(np.float64)
    if region is not None:
        vals = vals[:, np.asarray(region, dtype=bool).reshape(-1)]
    return np.corrcoef(vals)


def tumor_fraction(sample: Sample) -> float:
    return float(sample.labels.data[0].mean())
