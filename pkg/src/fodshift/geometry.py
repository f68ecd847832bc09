"""Real symmetric spherical harmonics, direction sets and sphere tessellations.

SH convention
-------------
Even orders only. Coefficient ``j`` for degree ``l`` and order ``m`` sits at
``j = l*(l+1)/2 + m`` (``m = -l..l``). The real basis is::

    m = 0:  N_l0 P_l(cos t)
    m > 0:  sqrt(2) N_lm P_l^m(cos t) cos(m p)
    m < 0:  sqrt(2) N_l|m| P_l^|m|(cos t) sin(|m| p)

with ``N_lm = sqrt((2l+1)/(4 pi) (l-m)!/(l+m)!)`` and no Condon-Shortley
phase. The basis is orthonormal on the unit sphere.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "IllConditionedError",
    "DirectionSet",
    "SphereTessellation",
    "n_coeffs",
    "lmax_from_n",
    "sh_degrees",
    "sh_orders",
    "sh_basis",
    "sh_basis_matrix",
    "fit_sh",
    "eval_sh",
    "make_tessellation",
    "electrostatic_directions",
    "electrostatic_energy",
    "select_optimal_directions",
    "angle_between",
]


class IllConditionedError(ValueError):
    """Raised when a least-squares design is rank deficient."""


def n_coeffs(lmax: int) -> int:
    return (lmax + 1) * (lmax + 2) // 2


def lmax_from_n(n: int) -> int:
    lmax = int(round((math.sqrt(1 + 8 * n) - 3) / 2))
    if n_coeffs(lmax) != n or lmax % 2:
        raise ValueError(f"{n} is not an even-order SH coefficient count")
    return lmax


def _check_lmax(lmax: int) -> None:
    if lmax < 0 or lmax % 2:
        raise ValueError(f"lmax must be a nonnegative even integer, got {lmax}")


def sh_degrees(lmax: int) -> np.ndarray:
    """Degree ``l`` of every coefficient, in storage order."""
    _check_lmax(lmax)
    return np.concatenate([np.full(2 * l + 1, l) for l in range(0, lmax + 1, 2)])


def sh_orders(lmax: int) -> np.ndarray:
    _check_lmax(lmax)
    return np.concatenate([np.arange(-l, l + 1) for l in range(0, lmax + 1, 2)])


@dataclass(frozen=True)
class DirectionSet:
    """Unit gradient directions with one b-value (s/mm^2) each."""

    vectors: np.ndarray
    bvals: np.ndarray

    def __post_init__(self):
        v = np.atleast_2d(np.asarray(self.vectors, dtype=float))
        b = np.broadcast_to(np.asarray(self.bvals, dtype=float), (v.shape[0],)).copy()
        if v.ndim != 2 or v.shape[1] != 3 or v.shape[0] == 0:
            raise ValueError("directions must be a nonempty (n, 3) array")
        if np.any(b < 0):
            raise ValueError("b-values must be nonnegative")
        norms = np.linalg.norm(v, axis=1)
        weighted = b > 0
        if np.any(np.abs(norms[weighted] - 1.0) > 1e-10):
            # Renormalise tiny drift from text round trips; reject anything else.
            if np.any(np.abs(norms[weighted] - 1.0) > 1e-4):
                raise ValueError("weighted directions must be unit vectors")
            v = v.copy()
            v[weighted] /= norms[weighted, None]
        v.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "vectors", v)
        object.__setattr__(self, "bvals", b)

    def __len__(self) -> int:
        return self.vectors.shape[0]

    def subset(self, index) -> "DirectionSet":
        return DirectionSet(self.vectors[index], self.bvals[index])

    def shell_index(self, b: float, tol: float = 50.0) -> np.ndarray:
        return np.flatnonzero(np.abs(self.bvals - b) <= tol)

    def shell(self, b: float, tol: float = 50.0) -> "DirectionSet":
        return self.subset(self.shell_index(b, tol))

    def shells(self, tol: float = 50.0) -> list[float]:
        """Distinct b-values, rounded to the nearest ``tol`` bucket."""
        out: list[float] = []
        for b in np.sort(self.bvals):
            if not out or b - out[-1] > tol:
                out.append(float(b))
        return out


@dataclass
class SphereTessellation:
    """Icosahedral point set with symmetric neighbour lists."""

    points: np.ndarray
    neighbors: list[np.ndarray]
    level: int = 0
    _padded: np.ndarray | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def neighbor_table(self) -> np.ndarray:
        """Neighbour indices padded to a rectangle with the point's own index."""
        if self._padded is None:
            width = max(len(n) for n in self.neighbors)
            table = np.empty((len(self.neighbors), width), dtype=np.int64)
            for i, nbrs in enumerate(self.neighbors):
                table[i, : len(nbrs)] = nbrs
                table[i, len(nbrs):] = i
            self._padded = table
        return self._padded

    def hemisphere(self) -> np.ndarray:
        """Indices of one point per antipodal pair."""
        p = self.points
        key = np.where(np.abs(p[:, 2]) > 1e-9, p[:, 2],
                       np.where(np.abs(p[:, 1]) > 1e-9, p[:, 1], p[:, 0]))
        return np.flatnonzero(key > 0)


def _legendre_table(lmax: int, x: np.ndarray) -> np.ndarray:
    """Associated Legendre P_l^m(x) without Condon-Shortley phase.

    Returns an array of shape (lmax+1, lmax+1, len(x)) indexed [l, m].
    """
    x = np.asarray(x, dtype=float)
    s = np.sqrt(np.clip(1.0 - x * x, 0.0, None))
    P = np.zeros((lmax + 1, lmax + 1) + x.shape)
    P[0, 0] = 1.0
    for m in range(1, lmax + 1):
        P[m, m] = (2 * m - 1) * s * P[m - 1, m - 1]
    for m in range(0, lmax):
        P[m + 1, m] = (2 * m + 1) * x * P[m, m]
    for m in range(0, lmax + 1):
        for l in range(m + 2, lmax + 1):
            P[l, m] = ((2 * l - 1) * x * P[l - 1, m] - (l + m - 1) * P[l - 2, m]) / (l - m)
    return P


def sh_basis(lmax: int, vectors: np.ndarray) -> np.ndarray:
    """Evaluate the even real SH basis at unit vectors of shape (n, 3)."""
    _check_lmax(lmax)
    v = np.atleast_2d(np.asarray(vectors, dtype=float))
    cos_t = np.clip(v[:, 2], -1.0, 1.0)
    phi = np.arctan2(v[:, 1], v[:, 0])
    P = _legendre_table(lmax, cos_t)
    out = np.empty((v.shape[0], n_coeffs(lmax)))
    for l in range(0, lmax + 1, 2):
        c = l * (l + 1) // 2
        out[:, c] = math.sqrt((2 * l + 1) / (4 * math.pi)) * P[l, 0]
        for m in range(1, l + 1):
            norm = math.sqrt(2.0 * (2 * l + 1) / (4 * math.pi)
                             * math.exp(math.lgamma(l - m + 1) - math.lgamma(l + m + 1)))
            out[:, c + m] = norm * P[l, m] * np.cos(m * phi)
            out[:, c - m] = norm * P[l, m] * np.sin(m * phi)
    return out


def sh_basis_matrix(dirs: DirectionSet | np.ndarray, lmax: int) -> np.ndarray:
    """Design matrix [n_dirs x n_coeffs] of the even real SH basis."""
    vectors = dirs.vectors if isinstance(dirs, DirectionSet) else dirs
    return sh_basis(lmax, vectors)


def fit_sh(signal, dirs, lmax: int, regularization: float = 0.0) -> np.ndarray:
    """Least-squares SH coefficients of ``signal`` sampled on ``dirs``.

    ``signal`` may carry leading batch axes; the last axis runs over
    directions. With ``regularization > 0`` the fit is Tikhonov damped.

    Raises
    ------
    IllConditionedError
        If the design matrix is rank deficient and no damping is requested.
    """
    B = sh_basis_matrix(dirs, lmax)
    signal = np.asarray(signal, dtype=float)
    if signal.shape[-1] != B.shape[0]:
        raise ValueError(f"signal has {signal.shape[-1]} samples, dirs has {B.shape[0]}")
    if regularization < 0:
        raise ValueError("regularization must be nonnegative")
    if regularization == 0:
        if B.shape[0] < B.shape[1] or np.linalg.matrix_rank(B) < B.shape[1]:
            raise IllConditionedError(
                f"SH design of rank {np.linalg.matrix_rank(B)} cannot determine "
                f"{B.shape[1]} coefficients")
        pinv = np.linalg.pinv(B)
    else:
        pinv = np.linalg.solve(B.T @ B + regularization * np.eye(B.shape[1]), B.T)
    return signal @ pinv.T


def eval_sh(coeffs, dirs) -> np.ndarray:
    """Evaluate coefficient arrays (..., n_coeffs) at ``dirs``."""
    coeffs = np.asarray(coeffs, dtype=float)
    B = sh_basis_matrix(dirs, lmax_from_n(coeffs.shape[-1]))
    return coeffs @ B.T


_ICO_FACES = np.array([
    [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
    [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
    [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
    [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
])


def _icosahedron() -> np.ndarray:
    t = (1.0 + math.sqrt(5.0)) / 2.0
    v = np.array([
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ], dtype=float)
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def make_tessellation(subdivision_level: int = 4) -> SphereTessellation:
    """Icosahedral subdivision; level L has 10*4**L + 2 points."""
    if subdivision_level < 0:
        raise ValueError("subdivision level must be >= 0")
    points = list(_icosahedron())
    faces = _ICO_FACES.tolist()
    for _ in range(subdivision_level):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(a: int, b: int) -> int:
            key = (a, b) if a < b else (b, a)
            if key not in cache:
                p = points[a] + points[b]
                points.append(p / np.linalg.norm(p))
                cache[key] = len(points) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        faces = new_faces
    pts = np.array(points)
    nbr_sets: list[set[int]] = [set() for _ in range(len(pts))]
    for a, b, c in faces:
        nbr_sets[a].update((b, c))
        nbr_sets[b].update((a, c))
        nbr_sets[c].update((a, b))
    neighbors = [np.array(sorted(s), dtype=np.int64) for s in nbr_sets]
    return SphereTessellation(points=pts, neighbors=neighbors, level=subdivision_level)


def angle_between(u, v, antipodal: bool = True) -> np.ndarray:
    """Angle in degrees between unit vectors, optionally modulo sign."""
    c = np.sum(np.asarray(u) * np.asarray(v), axis=-1)
    if antipodal:
        c = np.abs(c)
    return np.degrees(np.arccos(np.clip(c, -1.0, 1.0)))


def electrostatic_energy(vectors: np.ndarray) -> float:
    """Sum over pairs of 1/|u_i - u_j| + 1/|u_i + u_j|."""
    v = np.asarray(vectors, dtype=float)
    i, j = np.triu_indices(len(v), k=1)
    d_minus = np.linalg.norm(v[i] - v[j], axis=1)
    d_plus = np.linalg.norm(v[i] + v[j], axis=1)
    return float(np.sum(1.0 / np.maximum(d_minus, 1e-12) + 1.0 / np.maximum(d_plus, 1e-12)))


def electrostatic_directions(n: int, seed: int = 0, iterations: int = 200) -> np.ndarray:
    """``n`` antipodally-repelling unit vectors on the upper hemisphere.

    Starts from a seeded random draw and relaxes the antipodal Coulomb
    energy by normalised gradient steps. Deterministic for a fixed seed.
    """
    if n < 1:
        raise ValueError("need at least one direction")
    rng = np.random.default_rng(seed)
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    if n > 1:
        step = 0.1
        for _ in range(iterations):
            diff_m = v[:, None, :] - v[None, :, :]
            diff_p = v[:, None, :] + v[None, :, :]
            dm = np.linalg.norm(diff_m, axis=2)
            dp = np.linalg.norm(diff_p, axis=2)
            np.fill_diagonal(dm, np.inf)
            np.fill_diagonal(dp, np.inf)
            force = (diff_m / dm[..., None] ** 3).sum(1) + (diff_p / dp[..., None] ** 3).sum(1)
            force -= np.sum(force * v, axis=1, keepdims=True) * v
            fnorm = np.linalg.norm(force, axis=1, keepdims=True)
            v = v + step * force / np.maximum(fnorm.max(), 1e-12)
            v /= np.linalg.norm(v, axis=1, keepdims=True)
            step *= 0.98
    v[v[:, 2] < 0] *= -1
    return v


def _condition_numbers(B: np.ndarray, combos: np.ndarray) -> np.ndarray:
    sub = B[combos]  # (n_combos, k, 6)
    s = np.linalg.svd(sub, compute_uv=False)
    smin = s[:, -1]
    with np.errstate(divide="ignore"):
        cond = np.where(smin > 1e-10 * s[:, 0], s[:, 0] / smin, np.inf)
    return cond


def _pick_best(cands: np.ndarray, conds: np.ndarray, vectors: np.ndarray,
               best: tuple[float, float, tuple[int, ...]] | None):
    cmin = conds.min()
    if not np.isfinite(cmin):
        return best
    for row in np.flatnonzero(conds <= cmin * (1 + 1e-9)):
        idx = tuple(int(i) for i in cands[row])
        key = (float(conds[row]), electrostatic_energy(vectors[list(idx)]), idx)
        if best is None or _better(key, best):
            best = key
    return best


def _better(a, b) -> bool:
    if a[0] < b[0] * (1 - 1e-9):
        return True
    if a[0] > b[0] * (1 + 1e-9):
        return False
    return (a[1], a[2]) < (b[1], b[2])


def select_optimal_directions(candidates: DirectionSet, k: int = 6,
                              exhaustive_limit: int = 2_000_000) -> DirectionSet:
    """Choose ``k`` directions minimising the order-2 SH condition number.

    Ties (relative 1e-9) go to the lower antipodal electrostatic energy,
    then to the lexicographically smaller index tuple. Candidate sets with
    at most ``exhaustive_limit`` subsets are enumerated; larger ones use a
    deterministic greedy start followed by single-swap descent.
    """
    n = len(candidates)
    if k > n:
        raise ValueError(f"cannot select {k} directions from {n} candidates")
    if k < 6:
        raise ValueError("an order-2 SH fit needs at least 6 directions")
    v = candidates.vectors
    B = sh_basis(2, v)
    if np.linalg.matrix_rank(B) < 6:
        raise IllConditionedError("candidate directions cannot support an order-2 SH fit")

    best = None
    if math.comb(n, k) <= exhaustive_limit:
        it = itertools.combinations(range(n), k)
        while True:
            chunk = np.array(list(itertools.islice(it, 100_000)), dtype=np.int64)
            if chunk.size == 0:
                break
            best = _pick_best(chunk, _condition_numbers(B, chunk), v, best)
    else:
        best = _swap_search(B, v, k)
    if best is None or not np.isfinite(best[0]):
        raise IllConditionedError("no well-conditioned subset of candidate directions")
    return candidates.subset(list(best[2]))


def _swap_search(B: np.ndarray, v: np.ndarray, k: int):
    n = len(v)
    # Greedy start: farthest-point sampling on the projective plane.
    chosen = [0]
    dist = angle_between(v, v[0])
    while len(chosen) < k:
        nxt = int(np.argmax(dist))
        chosen.append(nxt)
        dist = np.minimum(dist, angle_between(v, v[nxt]))
    current = tuple(sorted(chosen))
    best = (float(_condition_numbers(B, np.array([current]))[0]),
            electrostatic_energy(v[list(current)]), current)
    improved = True
    while improved:
        improved = False
        trials = []
        for pos in range(k):
            for c in range(n):
                if c in best[2]:
                    continue
                t = list(best[2])
                t[pos] = c
                trials.append(sorted(t))
        trials = np.array(trials, dtype=np.int64)
        cand = _pick_best(trials, _condition_numbers(B, trials), v, None)
        if cand is not None and _better(cand, best):
            best = cand
            improved = True
    return best
