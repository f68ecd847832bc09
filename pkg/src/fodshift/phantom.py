"""Synthetic multi-site, multi-age cohorts with known fibre geometry.

Each subject is a small voxel grid tiled by 3x3x3 blocks. A block is either
isotropic (no fibres) or holds 1, 2 or 3 fibre populations; block layout
and nominal orientations come from a layout seed shared across cohorts so
that every phantom lives on the same "template" grid. Per subject the
fibre orientations are jittered and the single-fibre FA follows the
cohort's age-FA curve.
"""

from __future__ import annotations

import functools
import math
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import DirectionSet, electrostatic_directions, n_coeffs, sh_basis, sh_degrees

__all__ = [
    "Protocol",
    "FiberCompartment",
    "VoxelModel",
    "AgeFaModel",
    "SitePreset",
    "Subject",
    "PRESETS",
    "get_preset",
    "D_ISO",
    "simulate_signal",
    "simulate_volume",
    "add_rician_noise",
    "gt_fod",
    "gt_fod_volume",
    "fa_of_tensor",
    "solve_lambdas",
    "build_cohort",
    "derive_seed",
]

D_ISO = 3.0e-3
GT_TAPER = 0.025
BLOCK = 3
WM_ISO_FRACTION = 0.1
ORIENTATION_JITTER_DEG = 8.0


def derive_seed(*labels) -> int:
    """Stable 63-bit seed from a sequence of ints/strings."""
    text = "/".join(str(x) for x in labels).encode()
    return int.from_bytes(np.random.SeedSequence(zlib.crc32(text)).generate_state(2, np.uint32).tobytes(),
                          "little") & ((1 << 63) - 1)


@dataclass(frozen=True)
class Protocol:
    """A site acquisition: b-shells as (b, n_directions); b=0 entries count b0 volumes."""

    site_label: str
    shells: tuple[tuple[float, int], ...]
    snr: float
    voxel_size: float = 1.5
    s0: float = 1000.0

    def __post_init__(self):
        if self.snr <= 0:
            raise ValueError("snr must be positive")
        if not any(b > 0 and n >= 6 for b, n in self.shells):
            raise ValueError("protocol needs a b>0 shell with at least 6 directions")

    @property
    def n_weighted(self) -> int:
        return sum(n for b, n in self.shells if b > 0)

    def directions(self) -> DirectionSet:
        return _protocol_directions(self.site_label, self.shells)


@functools.lru_cache(maxsize=32)
def _protocol_directions(site_label: str, shells) -> DirectionSet:
    vecs, bvals = [], []
    for b, n in shells:
        if b == 0:
            vecs.append(np.zeros((n, 3)))
        else:
            vecs.append(electrostatic_directions(n, seed=derive_seed(site_label, b)))
        bvals.append(np.full(n, float(b)))
    return DirectionSet(np.vstack(vecs), np.concatenate(bvals))


@dataclass(frozen=True)
class FiberCompartment:
    direction: np.ndarray
    volume_fraction: float
    lambda_parallel: float
    lambda_perp: float

    def __post_init__(self):
        if not (self.lambda_parallel >= self.lambda_perp > 0):
            raise ValueError("need lambda_parallel >= lambda_perp > 0")
        if not 0.0 <= self.volume_fraction <= 1.0:
            raise ValueError("volume fraction outside [0, 1]")
        u = np.asarray(self.direction, dtype=float)
        object.__setattr__(self, "direction", u / np.linalg.norm(u))


@dataclass(frozen=True)
class VoxelModel:
    fibers: tuple[FiberCompartment, ...] = ()
    iso_fraction: float = 0.0
    iso_diffusivity: float = D_ISO
    s0: float = 1.0

    def __post_init__(self):
        if len(self.fibers) > 3:
            raise ValueError("at most three fibre populations per voxel")
        total = self.iso_fraction + sum(f.volume_fraction for f in self.fibers)
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"volume fractions sum to {total}, expected 1")


@dataclass(frozen=True)
class AgeFaModel:
    """Single-fibre FA as a function of age: a + b*arctan(c*(t - t0))."""

    a: float
    b: float
    c: float
    t0: float

    def __post_init__(self):
        if self.b * self.c <= 0:
            raise ValueError("age-FA curve must increase with age (b*c > 0)")

    def __call__(self, t):
        return self.a + self.b * np.arctan(self.c * (np.asarray(t, dtype=float) - self.t0))

    def slope(self, t):
        u = self.c * (np.asarray(t, dtype=float) - self.t0)
        return self.b * self.c / (1.0 + u * u)

    def in_units(self, months_per_unit: float, origin: float) -> "AgeFaModel":
        """Re-express a months-based curve on an axis t_unit with
        t_months = (t_unit - origin) * months_per_unit."""
        return AgeFaModel(self.a, self.b, self.c * months_per_unit,
                          origin + self.t0 / months_per_unit)


# One growth curve on postnatal months: steep around birth, flat by ~1 year.
POSTNATAL_FA = AgeFaModel(a=0.36, b=0.095, c=0.9, t0=-1.0)
WEEKS_PER_MONTH = 4.345


@dataclass(frozen=True)
class SitePreset:
    """Site protocol plus the cohort conventions that go with it."""

    name: str
    protocol: Protocol
    md: float
    age_unit: str
    months_per_unit: float
    age_origin: float
    age_ranges: dict = field(default_factory=dict)
    harmonize_shell: float = 1000.0
    mask_rule: str = "dhcp"

    @property
    def age_fa(self) -> AgeFaModel:
        return POSTNATAL_FA.in_units(self.months_per_unit, self.age_origin)

    def to_postnatal_months(self, age):
        return (np.asarray(age, dtype=float) - self.age_origin) * self.months_per_unit


PRESETS = {
    "dhcp": SitePreset(
        name="dhcp",
        protocol=Protocol("dHCP-like", ((0, 20), (400, 64), (1000, 88), (2600, 148)),
                          snr=30.0, voxel_size=1.5, s0=1000.0),
        md=1.1e-3,
        age_unit="weeks_pma",
        months_per_unit=1.0 / WEEKS_PER_MONTH,
        age_origin=40.0,
        age_ranges={"baseline": (29.3, 44.3), "young": (26.7, 35.0), "old": (40.0, 44.4)},
        mask_rule="dhcp",
    ),
    "bcp": SitePreset(
        name="bcp",
        protocol=Protocol("BCP-like", ((0, 7), (500, 9), (1000, 12), (1500, 17), (2000, 24),
                                       (2500, 34), (3000, 48)),
                          snr=20.0, voxel_size=1.5, s0=1300.0),
        md=0.9e-3,
        age_unit="months",
        months_per_unit=1.0,
        age_origin=0.0,
        age_ranges={"baseline": (1.5, 60.0), "young": (0.5, 11.0), "old": (20.0, 36.0)},
        mask_rule="bcp",
    ),
}


def get_preset(name: str) -> SitePreset:
    key = name.lower().replace("-like", "").replace("_like", "")
    if key not in PRESETS:
        raise KeyError(f"unknown site preset {name!r}; choose from {sorted(PRESETS)}")
    return PRESETS[key]


def fa_of_tensor(lambda_parallel, lambda_perp):
    """FA of an axially symmetric tensor with eigenvalues (l_par, l_perp, l_perp)."""
    lp = np.asarray(lambda_parallel, dtype=float)
    lr = np.asarray(lambda_perp, dtype=float)
    return np.abs(lp - lr) / np.sqrt(lp * lp + 2.0 * lr * lr)


def solve_lambdas(fa_target: float, md_target: float) -> tuple[float, float]:
    """Prolate eigenvalues (l_par, l_perp) with the requested FA and MD."""
    if not 0.0 <= fa_target < 1.0 or md_target <= 0:
        raise ValueError(f"infeasible (fa, md) = ({fa_target}, {md_target})")
    # l_par = md(1+2k), l_perp = md(1-k) gives FA = 3k / sqrt(3 + 6k^2)
    k = fa_target * math.sqrt(3.0 / (9.0 - 6.0 * fa_target ** 2))
    return md_target * (1.0 + 2.0 * k), md_target * (1.0 - k)


def simulate_signal(voxel: VoxelModel, dirs: DirectionSet) -> np.ndarray:
    """Noiseless multi-tensor signal of one voxel."""
    b = dirs.bvals
    s = voxel.iso_fraction * np.exp(-b * voxel.iso_diffusivity)
    for f in voxel.fibers:
        cos2 = (dirs.vectors @ f.direction) ** 2
        adc = f.lambda_perp + (f.lambda_parallel - f.lambda_perp) * cos2
        s = s + f.volume_fraction * np.exp(-b * adc)
    return voxel.s0 * s


def simulate_volume(fiber_dirs, fiber_fracs, iso_frac, lambda_par, lambda_perp,
                    dirs: DirectionSet, s0: float = 1.0, d_iso: float = D_ISO) -> np.ndarray:
    """Vectorised ``simulate_signal`` over a grid.

    ``fiber_dirs`` is (..., 3, 3) (slot, xyz), ``fiber_fracs`` (..., 3) and
    ``iso_frac`` (...). Empty slots carry fraction 0.
    """
    b = dirs.bvals
    cos2 = np.einsum("...fk,nk->...fn", fiber_dirs, dirs.vectors) ** 2
    adc = lambda_perp + (lambda_par - lambda_perp) * cos2
    aniso = np.einsum("...f,...fn->...n", fiber_fracs, np.exp(-b * adc))
    return s0 * (aniso + iso_frac[..., None] * np.exp(-b * d_iso))


def add_rician_noise(signal, s0: float, snr: float, rng_seed) -> np.ndarray:
    """Magnitude noise sqrt((S + n1)^2 + n2^2), n1, n2 ~ N(0, (s0/snr)^2).

    ``snr = inf`` returns the input unchanged. ``rng_seed`` may be an int or
    a ``numpy.random.Generator``.
    """
    if not snr > 0:
        raise ValueError("snr must be positive")
    signal = np.asarray(signal, dtype=float)
    if np.isinf(snr):
        return signal.copy()
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    sigma = s0 / snr
    n1 = rng.normal(0.0, sigma, size=signal.shape)
    n2 = rng.normal(0.0, sigma, size=signal.shape)
    return np.sqrt((signal + n1) ** 2 + n2 ** 2)


def _taper(lmax: int, taper: float) -> np.ndarray:
    l = sh_degrees(lmax)
    return np.exp(-taper * l * (l + 1))


def gt_fod(voxel: VoxelModel, lmax: int = 8, taper: float = GT_TAPER) -> np.ndarray:
    """Band-limited fibre delta sum; its integral 2*sqrt(pi)*c_00 equals the fibre fraction."""
    out = np.zeros(n_coeffs(lmax))
    for f in voxel.fibers:
        u = f.direction[None, :]
        out += f.volume_fraction * 0.5 * (sh_basis(lmax, u)[0] + sh_basis(lmax, -u)[0])
    return out * _taper(lmax, taper)


def gt_fod_volume(fiber_dirs, fiber_fracs, lmax: int = 8, taper: float = GT_TAPER) -> np.ndarray:
    shape = fiber_fracs.shape[:-1]
    Y = sh_basis(lmax, fiber_dirs.reshape(-1, 3)).reshape(shape + (3, n_coeffs(lmax)))
    return np.einsum("...f,...fc->...c", fiber_fracs, Y) * _taper(lmax, taper)


@dataclass
class Subject:
    """One synthetic subject; volumes are (nx, ny, nz, ...) arrays."""

    id: str
    age: float
    site_label: str
    preset: str
    dirs: DirectionSet
    dwi: np.ndarray
    gt_fod: np.ndarray
    wm_mask: np.ndarray
    fiber_class: np.ndarray
    fiber_dirs: np.ndarray
    fiber_fracs: np.ndarray
    iso_frac: np.ndarray
    lambda_par: float
    lambda_perp: float
    s0: float
    seed: int
    lmax: int = 8
    voxel_size: float = 1.5

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.dwi.shape[:3]

    @property
    def fa(self) -> float:
        return float(fa_of_tensor(self.lambda_par, self.lambda_perp))

    def voxel(self, i: int, j: int, k: int) -> VoxelModel:
        fibers = tuple(
            FiberCompartment(self.fiber_dirs[i, j, k, s], float(self.fiber_fracs[i, j, k, s]),
                             self.lambda_par, self.lambda_perp)
            for s in range(int(self.fiber_class[i, j, k])))
        return VoxelModel(fibers, float(self.iso_frac[i, j, k]), D_ISO, self.s0)

    def with_dwi(self, dwi: np.ndarray, suffix: str = "") -> "Subject":
        return replace(self, dwi=dwi, id=self.id + suffix)


def _rotation_to(u: np.ndarray) -> np.ndarray:
    """Some rotation matrix taking z to ``u``."""
    z = np.array([0.0, 0.0, 1.0])
    v = np.cross(z, u)
    c = float(z @ u)
    if np.linalg.norm(v) < 1e-12:
        return np.eye(3) if c > 0 else np.diag([1.0, -1.0, -1.0])
    vx = np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]])
    return np.eye(3) + vx + vx @ vx / (1.0 + c)


def _random_unit(rng, n=None):
    v = rng.normal(size=(3,) if n is None else (n, 3))
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


@functools.lru_cache(maxsize=8)
def _layout(grid_dims: tuple[int, int, int], layout_seed: int):
    """Block index per voxel plus per-block fibre count and nominal directions."""
    rng = np.random.default_rng(derive_seed("layout", layout_seed, *grid_dims))
    nb = [max(1, -(-d // BLOCK)) for d in grid_dims]
    n_blocks = int(np.prod(nb))
    # kinds: 0 iso, 1 single, 2 crossing 60, 3 crossing 90, 4 three orthogonal
    shares = np.array([0.25, 0.40, 0.125, 0.125, 0.10])
    counts = np.floor(shares * n_blocks).astype(int)
    counts[1] += n_blocks - counts.sum()
    kinds = rng.permutation(np.repeat(np.arange(5), counts))
    block_dirs = np.zeros((n_blocks, 3, 3))
    for i, kind in enumerate(kinds):
        u = _random_unit(rng)
        if kind == 0:
            continue
        if kind == 1:
            block_dirs[i, 0] = u
            continue
        R = _rotation_to(u)
        spin = rng.uniform(0, 2 * np.pi)
        w = R @ np.array([np.cos(spin), np.sin(spin), 0.0])
        if kind in (2, 3):
            ang = np.radians(60.0 if kind == 2 else 90.0)
            block_dirs[i, 0] = u
            block_dirs[i, 1] = np.cos(ang) * u + np.sin(ang) * w
        else:
            block_dirs[i, 0] = u
            block_dirs[i, 1] = w
            block_dirs[i, 2] = np.cross(u, w)
    block_nfib = np.array([0, 1, 2, 2, 3])[kinds]
    ix = [np.arange(d) // BLOCK for d in grid_dims]
    block_index = np.ravel_multi_index(np.meshgrid(*ix, indexing="ij"), nb)
    return block_index, block_nfib, block_dirs


def _jitter(dirs: np.ndarray, n_fib: np.ndarray, rng, sigma_deg: float) -> np.ndarray:
    """Rotate each block's fibre frame by a small random rotation."""
    out = dirs.copy()
    if sigma_deg <= 0:
        return out
    for i in range(dirs.shape[0]):
        axis = _random_unit(rng)
        ang = np.radians(rng.normal(0.0, sigma_deg))
        K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
        R = np.eye(3) + np.sin(ang) * K + (1 - np.cos(ang)) * K @ K
        out[i, : n_fib[i]] = dirs[i, : n_fib[i]] @ R.T
    return out


def make_subject(preset: SitePreset, age: float, subject_id: str, seed: int,
                 grid_dims=(12, 12, 12), lmax: int = 8, layout_seed: int = 0,
                 age_fa: AgeFaModel | None = None, noise: bool = True,
                 fa_sd: float = 0.02, jitter_deg: float = ORIENTATION_JITTER_DEG) -> Subject:
    rng = np.random.default_rng(seed)
    grid_dims = tuple(int(d) for d in grid_dims)
    block_index, block_nfib, block_nominal = _layout(grid_dims, layout_seed)
    n_fib = block_nfib[block_index]
    curve = age_fa if age_fa is not None else preset.age_fa
    fa = float(np.clip(curve(age) + rng.normal(0.0, fa_sd), 0.05, 0.95))
    lpar, lperp = solve_lambdas(fa, preset.md)

    fiber_dirs = _jitter(block_nominal, block_nfib, rng, jitter_deg)[block_index]

    slots = np.arange(3)
    fiber_mask = slots < n_fib[..., None]
    iso_frac = np.where(n_fib > 0, WM_ISO_FRACTION, 1.0)
    fiber_fracs = np.where(fiber_mask, (1.0 - iso_frac[..., None]) / np.maximum(n_fib[..., None], 1), 0.0)
    fiber_dirs = np.where(fiber_mask[..., None], fiber_dirs, 0.0)

    dirs = preset.protocol.directions()
    s0 = preset.protocol.s0
    clean = simulate_volume(fiber_dirs, fiber_fracs, iso_frac, lpar, lperp, dirs, s0=s0)
    dwi = add_rician_noise(clean, s0, preset.protocol.snr, rng) if noise else clean
    return Subject(
        id=subject_id, age=float(age), site_label=preset.protocol.site_label, preset=preset.name,
        dirs=dirs, dwi=dwi, gt_fod=gt_fod_volume(fiber_dirs, fiber_fracs, lmax),
        wm_mask=n_fib > 0, fiber_class=n_fib.astype(np.int8), fiber_dirs=fiber_dirs,
        fiber_fracs=fiber_fracs, iso_frac=iso_frac, lambda_par=lpar, lambda_perp=lperp,
        s0=s0, seed=int(seed), lmax=lmax, voxel_size=preset.protocol.voxel_size,
    )


def build_cohort(preset: SitePreset | str, n_subjects: int, age_range=None,
                 age_fa: AgeFaModel | None = None, grid_dims=(12, 12, 12), rng_seed: int = 0,
                 cohort_label: str = "baseline", lmax: int = 8, layout_seed: int = 0,
                 noise: bool = True) -> list[Subject]:
    """Draw ``n_subjects`` with ages uniform in ``age_range``.

    Subject ``i`` is generated from its own seed ``derive_seed(rng_seed,
    preset, cohort_label, i)``, so cohorts can be built in any order or in
    parallel with identical results.
    """
    if isinstance(preset, str):
        preset = get_preset(preset)
    if n_subjects < 1:
        raise ValueError("n_subjects must be >= 1")
    if age_range is None:
        age_range = preset.age_ranges[cohort_label]
    lo, hi = map(float, age_range)
    if hi < lo:
        raise ValueError("age range is reversed")
    subjects = []
    for i in range(n_subjects):
        seed = derive_seed(rng_seed, preset.name, cohort_label, i)
        age = float(np.random.default_rng(derive_seed(seed, "age")).uniform(lo, hi))
        sid = f"{preset.name}-{cohort_label}-s{rng_seed}-{i:03d}"
        subjects.append(make_subject(preset, age, sid, seed, grid_dims, lmax, layout_seed,
                                     age_fa=age_fa, noise=noise))
    return subjects
