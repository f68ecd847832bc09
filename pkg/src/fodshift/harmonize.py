"""Method-of-moments harmonization of six-direction DWI signals.

Per voxel, the spherical mean and (population) variance of the six
selected measurements are computed for every subject of a site. Median
moment images are smoothed and turned into an affine map
``f(S) = alpha * S + beta`` that carries target-site signals onto the
reference-site moments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .geometry import DirectionSet, select_optimal_directions

__all__ = [
    "MomentMaps",
    "MomMapping",
    "spherical_moments",
    "median_moment_images",
    "gaussian_kernel",
    "gaussian_smooth",
    "derive_mapping",
    "apply_mapping",
    "six_direction_index",
    "normalized_six",
    "harmonize_subjects",
]

ALPHA_MIN = 0.1
ALPHA_MAX = 10.0
DEFAULT_EPS = 1e-8


@dataclass
class MomentMaps:
    mean_map: np.ndarray
    var_map: np.ndarray

    def __post_init__(self):
        self.mean_map = np.asarray(self.mean_map, dtype=float)
        self.var_map = np.asarray(self.var_map, dtype=float)
        if self.mean_map.shape != self.var_map.shape:
            raise ValueError("mean and variance maps differ in shape")
        if np.any(self.var_map < 0):
            raise ValueError("variance map has negative entries")

    @property
    def shape(self):
        return self.mean_map.shape


@dataclass
class MomMapping:
    alpha_map: np.ndarray
    beta_map: np.ndarray

    def __post_init__(self):
        self.alpha_map = np.asarray(self.alpha_map, dtype=float)
        self.beta_map = np.asarray(self.beta_map, dtype=float)
        if self.alpha_map.shape != self.beta_map.shape:
            raise ValueError("alpha and beta maps differ in shape")
        if not (np.all(np.isfinite(self.alpha_map)) and np.all(np.isfinite(self.beta_map))):
            raise ValueError("mapping has non-finite entries")
        if np.any(self.alpha_map <= 0):
            raise ValueError("alpha must be positive everywhere")


def spherical_moments(dwi_six) -> MomentMaps:
    """Mean and population variance over the last axis (the six directions)."""
    x = np.asarray(dwi_six, dtype=float)
    if x.shape[-1] != 6:
        raise ValueError(f"expected six measurements per voxel, got {x.shape[-1]}")
    return MomentMaps(x.mean(axis=-1), x.var(axis=-1))


def median_moment_images(maps) -> MomentMaps:
    """Voxel-wise median across subjects, each moment separately."""
    maps = list(maps)
    if not maps:
        raise ValueError("need at least one subject")
    shape = maps[0].shape
    if any(m.shape != shape for m in maps):
        raise ValueError("moment maps have mismatched dimensions")
    return MomentMaps(np.median([m.mean_map for m in maps], axis=0),
                      np.median([m.var_map for m in maps], axis=0))


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Sampled 1-D Gaussian truncated at ceil(3 sigma), summing to one."""
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    if sigma == 0:
        return np.ones(1)
    r = int(math.ceil(3.0 * sigma))
    x = np.arange(-r, r + 1, dtype=float)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_smooth(volume, sigma_vox: float = 1.0) -> np.ndarray:
    """Separable Gaussian smoothing of a 3-D map; edges replicate the border value."""
    v = np.asarray(volume, dtype=float)
    k = gaussian_kernel(sigma_vox)
    if k.size == 1:
        return v.copy()
    out = v
    for axis in range(v.ndim):
        out = correlate1d(out, k, axis=axis, mode="nearest")
    return out


def smooth_moments(m: MomentMaps, sigma_vox: float) -> MomentMaps:
    return MomentMaps(gaussian_smooth(m.mean_map, sigma_vox),
                      np.maximum(gaussian_smooth(m.var_map, sigma_vox), 0.0))


def derive_mapping(target_ref: MomentMaps, source_ref: MomentMaps, eps: float = DEFAULT_EPS,
                   clamp=(ALPHA_MIN, ALPHA_MAX)) -> MomMapping:
    """Per-voxel alpha, beta matching target moments onto source moments.

    ``alpha = sqrt(max(var_src, eps) / max(var_tgt, eps))`` clamped to
    ``clamp``; ``beta = mean_src - alpha * mean_tgt``. Pass ``clamp=None``
    to disable. The ``eps`` floor only guards flat voxels, so identical
    moments give ``alpha = 1`` and ``beta = 0`` exactly, flat ones included.
    """
    if target_ref.shape != source_ref.shape:
        raise ValueError("target and source moment maps differ in shape")
    alpha = np.sqrt(np.maximum(source_ref.var_map, eps) / np.maximum(target_ref.var_map, eps))
    if clamp is not None:
        alpha = np.clip(alpha, clamp[0], clamp[1])
    beta = source_ref.mean_map - alpha * target_ref.mean_map
    return MomMapping(alpha, beta)


def apply_mapping(dwi_six, mapping: MomMapping, floor: float | None = 0.0) -> np.ndarray:
    """``alpha * S + beta`` on every component; results below ``floor`` are clipped."""
    x = np.asarray(dwi_six, dtype=float)
    if x.shape[:-1] != mapping.alpha_map.shape:
        raise ValueError("signal grid does not match the mapping grid")
    out = mapping.alpha_map[..., None] * x + mapping.beta_map[..., None]
    if floor is not None:
        out = np.maximum(out, floor)
    return out


# --- subject-level helpers ---------------------------------------------

def six_direction_index(dirs: DirectionSet, shell: float = 1000.0) -> np.ndarray:
    """Indices (into ``dirs``) of the six optimal directions on ``shell``."""
    idx = dirs.shell_index(shell)
    if len(idx) < 6:
        raise ValueError(f"shell b={shell:g} has only {len(idx)} directions")
    chosen = select_optimal_directions(dirs.subset(idx), 6)
    key = {tuple(np.round(v, 12)): i for i, v in zip(idx, dirs.vectors[idx])}
    return np.array([key[tuple(np.round(v, 12))] for v in chosen.vectors])


def b0_mean(subject) -> np.ndarray:
    b0 = subject.dirs.bvals == 0
    if not b0.any():
        raise ValueError(f"subject {subject.id} has no b=0 volume")
    return subject.dwi[..., b0].mean(axis=-1)


def normalized_six(subject, six_index) -> np.ndarray:
    """Six selected measurements divided by the voxel's mean b0."""
    return subject.dwi[..., six_index] / np.maximum(b0_mean(subject), 1e-12)[..., None]


def harmonize_subjects(targets, target_refs, source_refs, shell: float = 1000.0,
                       sigma_vox: float = 1.0, eps: float = DEFAULT_EPS,
                       clamp=(ALPHA_MIN, ALPHA_MAX)):
    """Map every target subject onto the source site's moments.

    Moments are taken on b0-normalised six-direction signals; the mapped
    values are rescaled by each subject's own b0, so a harmonised subject
    differs from the original only in its six selected volumes.

    Returns ``(harmonised_subjects, mapping)``.
    """
    target_refs, source_refs = list(target_refs), list(source_refs)
    t_six = six_direction_index(target_refs[0].dirs, shell)
    s_six = six_direction_index(source_refs[0].dirs, shell)
    tgt = median_moment_images(spherical_moments(normalized_six(s, t_six)) for s in target_refs)
    src = median_moment_images(spherical_moments(normalized_six(s, s_six)) for s in source_refs)
    mapping = derive_mapping(smooth_moments(tgt, sigma_vox), smooth_moments(src, sigma_vox),
                             eps, clamp)
    out = []
    for subj in targets:
        b0 = b0_mean(subj)
        mapped = apply_mapping(normalized_six(subj, t_six), mapping) * b0[..., None]
        dwi = subj.dwi.copy()
        dwi[..., t_six] = mapped
        out.append(subj.with_dwi(dwi))
    return out, mapping
