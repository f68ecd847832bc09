"""Constrained spherical deconvolution with a white-matter and an isotropic compartment.

The fit solves::

    min_x ||A x - s||^2   subject to   FOD(u) >= 0 for every tessellation point u,
                                        iso >= 0

where ``A`` convolves the SH coefficients with the per-shell fibre response
and appends the per-shell isotropic response as a final column. The
quadratic program is reduced to least-distance form and solved exactly
by a dual active-set method; a Lawson-Hanson NNLS route on the same
reduction is kept as an independent check.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.special import eval_legendre

from . import kernels
from .geometry import DirectionSet, SphereTessellation, make_tessellation, n_coeffs, sh_basis, sh_degrees
from .phantom import D_ISO, Subject

__all__ = [
    "CSDConvergenceError",
    "ResponseFunction",
    "response_from_tensor",
    "CSDSolver",
    "csd_fit",
    "csd_volume",
    "electrostatic_order",
    "split_directions",
    "gold_standard_split",
]


class CSDConvergenceError(RuntimeError):
    """The constrained solver stopped before reaching the KKT tolerance."""

    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (KKT residual {residual:.3g})")
        self.residual = residual


@dataclass(frozen=True)
class ResponseFunction:
    """Per-shell m=0 SH coefficients of the single-fibre signal."""

    bvals: np.ndarray      # (n_shells,)
    coeffs: np.ndarray     # (n_shells, lmax/2 + 1), r_l for l = 0, 2, ...
    iso: np.ndarray        # (n_shells,)

    @property
    def lmax(self) -> int:
        return 2 * (self.coeffs.shape[1] - 1)

    def shell_of(self, bvals: np.ndarray, tol: float = 50.0) -> np.ndarray:
        d = np.abs(np.asarray(bvals)[:, None] - self.bvals[None, :])
        idx = np.argmin(d, axis=1)
        if np.any(d[np.arange(len(idx)), idx] > tol):
            raise ValueError("measurement b-value has no matching response shell")
        return idx


def response_from_tensor(lambda_par: float, lambda_perp: float, shells, lmax: int = 8,
                         d_iso: float = D_ISO, n_quad: int = 64) -> ResponseFunction:
    """Analytic response of an axially symmetric tensor aligned with z.

    ``r_l = 2 pi sqrt((2l+1)/(4 pi)) * int_{-1}^{1} K(t) P_l(t) dt`` with
    ``K(t) = exp(-b (l_perp + (l_par - l_perp) t^2))``, by Gauss-Legendre
    quadrature in ``t = cos(theta)``.
    """
    if not lambda_par >= lambda_perp > 0:
        raise ValueError("need lambda_par >= lambda_perp > 0")
    t, w = leggauss(n_quad)
    bvals = np.asarray(sorted(set(float(b) for b in shells)), dtype=float)
    ls = np.arange(0, lmax + 1, 2)
    P = np.stack([eval_legendre(l, t) for l in ls])                     # (nl, nq)
    norm = 2 * np.pi * np.sqrt((2 * ls + 1) / (4 * np.pi))
    K = np.exp(-bvals[:, None] * (lambda_perp + (lambda_par - lambda_perp) * t[None, :] ** 2))
    coeffs = (K * w) @ P.T * norm
    return ResponseFunction(bvals, coeffs, np.exp(-bvals * d_iso))


class CSDSolver:
    """Reusable constrained fit for one acquisition scheme and response."""

    def __init__(self, dirs: DirectionSet, response: ResponseFunction, lmax: int = 8,
                 tess: SphereTessellation | None = None, max_iter: int | None = None,
                 kkt_tol: float = 1e-6):
        if lmax > response.lmax:
            raise ValueError("response has fewer degrees than the requested lmax")
        tess = tess if tess is not None else make_tessellation(4)
        self.lmax = lmax
        self.kkt_tol = kkt_tol
        self.max_iter = max_iter if max_iter is not None else -1
        nc = n_coeffs(lmax)
        shell = response.shell_of(dirs.bvals)
        vecs = dirs.vectors.copy()
        vecs[dirs.bvals == 0] = (0.0, 0.0, 1.0)
        l = sh_degrees(lmax)
        kernel = response.coeffs[shell][:, l // 2] * np.sqrt(4 * np.pi / (2 * l + 1))
        A = np.empty((len(dirs), nc + 1))
        A[:, :nc] = sh_basis(lmax, vecs) * kernel
        A[:, nc] = response.iso[shell]
        self.A = A
        self.points = tess.points[tess.hemisphere()]
        G = np.zeros((len(self.points) + 1, nc + 1))
        G[:-1, :nc] = sh_basis(lmax, self.points)
        G[-1, nc] = 1.0
        self.G = G
        Q, R = np.linalg.qr(A)
        if np.min(np.abs(np.diag(R))) < 1e-10 * np.max(np.abs(np.diag(R))):
            raise ValueError("deconvolution design is rank deficient for this scheme")
        self.Q = Q
        self.R = R
        self.E = np.linalg.solve(R.T, G.T).T          # G R^-1
        self._M = np.vstack([self.E.T, np.zeros(len(G))])
        self._d = np.zeros(nc + 2)
        self._d[-1] = 1.0

    def fit(self, signal, check: bool = True, method: str = "ldp"):
        """Return ``(fod_coeffs, iso_fraction)`` for one signal vector.

        ``method="ldp"`` uses the dual active-set kernel; ``"nnls"`` solves
        the same least-distance problem through Lawson-Hanson NNLS.
        """
        x, mult, converged = self._solve(np.asarray(signal, dtype=float), method)
        if check:
            res = self.kkt_residual(signal, x, mult)
            if not converged or res > self.kkt_tol:
                raise CSDConvergenceError("constrained deconvolution did not converge", res)
        return x[:-1], float(x[-1])

    def _solve(self, s, method):
        q = self.Q.T @ s
        f = -self.E @ q
        if method == "ldp":
            y, mult, converged, _ = kernels.ldp(self.E, f, self.max_iter)
        elif method == "nnls":
            M = self._M.copy()
            M[-1] = f
            u, _, converged = kernels.nnls(M, self._d, self.max_iter)
            r = M @ u - self._d
            if abs(r[-1]) < 1e-300:
                raise CSDConvergenceError("least-distance subproblem reported infeasible", np.inf)
            y = -r[:-1] / r[-1]
            mult = u / (1.0 - f @ u)
        else:
            raise ValueError(f"unknown method {method!r}")
        return np.linalg.solve(self.R, y + q), mult, converged

    def kkt_residual(self, s, x, mult) -> float:
        """Largest scaled violation of stationarity, feasibility and complementarity."""
        s = np.asarray(s, dtype=float)
        gx = self.G @ x
        grad = self.A.T @ (self.A @ x - s)
        scale = max(1.0, float(np.abs(self.A.T @ s).max()))
        stat = np.abs(grad - self.G.T @ mult).max()
        feas = max(0.0, -gx.min())
        comp = np.abs(mult * gx).max()
        return float(max(stat, comp) / scale + feas)

    def fit_volume(self, signals, mask=None):
        """Fit every masked voxel; returns ``(fod, iso)`` volumes."""
        signals = np.asarray(signals, dtype=float)
        shape = signals.shape[:-1]
        nc = n_coeffs(self.lmax)
        fod = np.zeros(shape + (nc,))
        iso = np.zeros(shape)
        mask = np.ones(shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
        for idx in zip(*np.nonzero(mask)):
            fod[idx], iso[idx] = self.fit(signals[idx])
        return fod, iso


def csd_fit(signal, dirs: DirectionSet, response: ResponseFunction, lmax: int = 8,
            tess: SphereTessellation | None = None):
    """Constrained fit of a single voxel; returns ``(fod_coeffs, iso_fraction)``."""
    return CSDSolver(dirs, response, lmax, tess).fit(signal)


def _normalise(dwi: np.ndarray, bvals: np.ndarray) -> np.ndarray:
    b0 = dwi[..., bvals == 0].mean(axis=-1, keepdims=True)
    return dwi / np.maximum(b0, 1e-12)


def csd_volume(subject: Subject, dirs_index=None, lmax: int = 8,
               tess: SphereTessellation | None = None, mask=None) -> np.ndarray:
    """b0-normalised CSD of a subject using the given measurement subset."""
    idx = np.arange(len(subject.dirs)) if dirs_index is None else np.asarray(dirs_index)
    dirs = subject.dirs.subset(idx)
    if not np.any(dirs.bvals == 0):
        raise ValueError("CSD needs at least one b=0 volume for normalisation")
    response = response_from_tensor(subject.lambda_par, subject.lambda_perp,
                                    dirs.shells(), lmax=lmax)
    solver = CSDSolver(dirs, response, lmax, tess)
    signals = _normalise(subject.dwi[..., idx], dirs.bvals)
    fod, _ = solver.fit_volume(signals, subject.wm_mask if mask is None else mask)
    return fod


def electrostatic_order(vectors: np.ndarray, start: int = 0) -> np.ndarray:
    """Greedy ordering: each next direction adds the least antipodal repulsion."""
    v = np.asarray(vectors, dtype=float)
    n = len(v)
    order = [start]
    remaining = set(range(n)) - {start}
    dm = np.linalg.norm(v[:, None] - v[None], axis=2)
    dp = np.linalg.norm(v[:, None] + v[None], axis=2)
    pot = 1.0 / np.maximum(dm, 1e-12) + 1.0 / np.maximum(dp, 1e-12)
    acc = pot[start].copy()
    while remaining:
        rem = np.array(sorted(remaining))
        nxt = int(rem[np.argmin(acc[rem])])
        order.append(nxt)
        remaining.discard(nxt)
        acc += pot[nxt]
    return np.array(order)


def split_directions(dirs: DirectionSet, rng_seed: int = 0):
    """Partition every shell into two halves by alternating electrostatic order."""
    rng = np.random.default_rng(rng_seed)
    half_a, half_b = [], []
    for b in dirs.shells():
        idx = dirs.shell_index(b)
        if len(idx) < 2:
            raise ValueError(f"shell b={b:g} has fewer than 2 measurements to split")
        if b == 0:
            order = np.arange(len(idx))
        else:
            order = electrostatic_order(dirs.vectors[idx], int(rng.integers(len(idx))))
        half_a.extend(idx[order[0::2]])
        half_b.extend(idx[order[1::2]])
    return np.sort(half_a), np.sort(half_b)


def gold_standard_split(subject: Subject, rng_seed: int = 0, lmax: int | None = None,
                        tess: SphereTessellation | None = None, mask=None):
    """CSD on two disjoint halves of the full acquisition.

    Returns ``(fod_a, fod_b)`` volumes; voxels outside the mask are zero.
    """
    lmax = subject.lmax if lmax is None else lmax
    if int(np.sum(subject.dirs.bvals > 0)) < 2 * n_coeffs(lmax):
        raise ValueError("too few weighted directions for two independent fits at this lmax")
    half_a, half_b = split_directions(subject.dirs, rng_seed)
    tess = tess if tess is not None else make_tessellation(4)
    return (csd_volume(subject, half_a, lmax, tess, mask),
            csd_volume(subject, half_b, lmax, tess, mask))

