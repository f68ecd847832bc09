"""Peak extraction, FOD agreement metrics, tensor scalars and growth-curve fitting.

Peak metrics follow a GT-conditioned reading: a voxel belongs to class k
when the reference FOD has k peaks, and the agreement rate is the share of
those voxels where the prediction also has k peaks. Angular error is
averaged over optimally matched peak pairs within a voxel, then over
voxels.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import kernels
from .geometry import DirectionSet, SphereTessellation, lmax_from_n, make_tessellation, sh_basis

__all__ = [
    "PeakSet",
    "VolumePeaks",
    "extract_peaks",
    "extract_peaks_volume",
    "match_peaks",
    "agreement_rate",
    "angular_error",
    "afd",
    "afd_error",
    "tensor_fit",
    "wm_mask",
    "mean_wm_fa",
    "ArctanFit",
    "ArctanFitError",
    "fit_arctan",
    "MetricsReport",
    "evaluate",
    "reports_to_csv",
    "reports_to_markdown",
]

PEAK_THRESHOLD = 0.1
MIN_SEPARATION_DEG = 15.0
MATCH_GATE_DEG = 45.0
REFINE_STEPS = 10
REFINE_STEP = 0.05


@dataclass(frozen=True)
class PeakSet:
    """Up to three peaks, strongest first, directions on the upper hemisphere."""

    directions: np.ndarray   # (k, 3)
    amplitudes: np.ndarray   # (k,)

    def __len__(self) -> int:
        return len(self.amplitudes)


@dataclass
class VolumePeaks:
    """Peaks of every voxel of a volume, padded to ``max_peaks``."""

    directions: np.ndarray   # (..., max_peaks, 3), zero rows beyond count
    amplitudes: np.ndarray   # (..., max_peaks)
    count: np.ndarray        # (...,) int

    def at(self, idx) -> PeakSet:
        k = int(self.count[idx])
        return PeakSet(self.directions[idx][:k], self.amplitudes[idx][:k])


_TESS_CACHE: dict[int, SphereTessellation] = {}


def default_tessellation(level: int = 4) -> SphereTessellation:
    if level not in _TESS_CACHE:
        _TESS_CACHE[level] = make_tessellation(level)
    return _TESS_CACHE[level]


def _canonical(v: np.ndarray) -> np.ndarray:
    """Flip vectors onto the upper hemisphere (z > 0, ties broken on y then x)."""
    key = np.where(np.abs(v[..., 2]) > 1e-12, v[..., 2],
                   np.where(np.abs(v[..., 1]) > 1e-12, v[..., 1], v[..., 0]))
    return np.where((key < 0)[..., None], -v, v)


def _tangent_frame(u: np.ndarray):
    a = np.where(np.abs(u[:, 2:3]) < 0.9, [[0.0, 0.0, 1.0]], [[1.0, 0.0, 0.0]])
    e1 = np.cross(u, a)
    e1 /= np.linalg.norm(e1, axis=1, keepdims=True)
    return e1, np.cross(u, e1)


def _refine(coeffs: np.ndarray, u: np.ndarray, steps: int = REFINE_STEPS,
            step: float = REFINE_STEP, h: float = 1e-5):
    """Fixed-step ascent on the sphere, one start direction per coefficient row.

    The tangent gradient is taken by central differences and divided by the
    current amplitude so that the step is in radians for any FOD scale.
    Steps that would lower the amplitude are rejected.
    """
    lmax = lmax_from_n(coeffs.shape[1])

    def amp(v):
        return np.einsum("ij,ij->i", sh_basis(lmax, v), coeffs)

    u = u.copy()
    f = amp(u)
    for _ in range(steps):
        e1, e2 = _tangent_frame(u)
        g1 = (amp(u + h * e1) - amp(u - h * e1)) / (2 * h)
        g2 = (amp(u + h * e2) - amp(u - h * e2)) / (2 * h)
        scale = step / np.maximum(np.abs(f), 1e-12)
        cand = u + scale[:, None] * (g1[:, None] * e1 + g2[:, None] * e2)
        cand /= np.linalg.norm(cand, axis=1, keepdims=True)
        fc = amp(cand)
        better = fc > f
        u[better] = cand[better]
        f[better] = fc[better]
    return u, f


def extract_peaks_volume(fod, tess: SphereTessellation | None = None,
                         abs_threshold: float = PEAK_THRESHOLD, max_peaks: int = 3,
                         min_separation: float = MIN_SEPARATION_DEG, mask=None) -> VolumePeaks:
    """Peaks of every voxel in a coefficient array of shape (..., n_coeffs)."""
    fod = np.asarray(fod, dtype=float)
    shape = fod.shape[:-1]
    flat = fod.reshape(-1, fod.shape[-1])
    sel = np.ones(flat.shape[0], dtype=bool) if mask is None else np.asarray(mask, bool).reshape(-1)
    sel &= np.any(flat != 0, axis=1)
    tess = tess if tess is not None else default_tessellation()
    pts = tess.points
    upper = np.zeros(len(pts), dtype=bool)
    upper[tess.hemisphere()] = True
    B = sh_basis(lmax_from_n(flat.shape[1]), pts)
    table = tess.neighbor_table
    out_dirs = np.zeros((flat.shape[0], max_peaks, 3))
    out_amp = np.zeros((flat.shape[0], max_peaks))
    count = np.zeros(flat.shape[0], dtype=np.int64)
    vox = np.flatnonzero(sel)
    cos_sep = math.cos(math.radians(min_separation))
    for start in range(0, len(vox), 512):
        chunk = vox[start:start + 512]
        vals = np.ascontiguousarray(flat[chunk] @ B.T)
        is_max = kernels.local_maxima(vals, table) & upper & (vals > 0.5 * abs_threshold)
        rows, cols = np.nonzero(is_max)
        if rows.size == 0:
            continue
        u, a = _refine(flat[chunk][rows], pts[cols])
        u = _canonical(u)
        order = np.lexsort((-a, rows))
        rows, u, a = rows[order], u[order], a[order]
        for r in np.unique(rows):
            sl = rows == r
            kept_u: list[np.ndarray] = []
            kept_a: list[float] = []
            for ui, ai in zip(u[sl], a[sl]):
                if ai < abs_threshold:
                    break
                if any(abs(float(ui @ k)) > cos_sep for k in kept_u):
                    continue
                kept_u.append(ui)
                kept_a.append(ai)
                if len(kept_u) == max_peaks:
                    break
            v = chunk[r]
            n = len(kept_u)
            count[v] = n
            if n:
                out_dirs[v, :n] = kept_u
                out_amp[v, :n] = kept_a
    return VolumePeaks(out_dirs.reshape(shape + (max_peaks, 3)),
                       out_amp.reshape(shape + (max_peaks,)), count.reshape(shape))


def extract_peaks(fod, tess: SphereTessellation | None = None,
                  abs_threshold: float = PEAK_THRESHOLD, max_peaks: int = 3,
                  min_separation: float = MIN_SEPARATION_DEG) -> PeakSet:
    """Peaks of one FOD: local maxima on the tessellation, refined and filtered."""
    vp = extract_peaks_volume(np.asarray(fod, dtype=float)[None], tess, abs_threshold,
                              max_peaks, min_separation)
    return vp.at(0)


def match_peaks(pred: PeakSet, gt: PeakSet, gate: float = MATCH_GATE_DEG):
    """Minimum total-angle assignment between two peak sets.

    Returns a list of ``(pred_index, gt_index, angle_deg)``; pairs whose
    angle exceeds ``gate`` are dropped after the assignment.
    """
    if len(pred) == 0 or len(gt) == 0:
        return []
    cos = np.abs(pred.directions @ gt.directions.T)
    cost = np.degrees(np.arccos(np.clip(cos, -1.0, 1.0)))
    ri, ci = linear_sum_assignment(cost)
    return [(int(i), int(j), float(cost[i, j])) for i, j in zip(ri, ci) if cost[i, j] <= gate]


def _as_peaks(vol, tess, threshold, mask=None) -> VolumePeaks:
    if isinstance(vol, VolumePeaks):
        return vol
    return extract_peaks_volume(vol, tess, threshold, mask=mask)


def agreement_rate(pred_vol, gt_vol, mask, fiber_class: int, tess=None,
                   threshold: float = PEAK_THRESHOLD) -> float:
    """Percent of class-k voxels (by reference peak count) predicted with k peaks.

    Returns NaN when no voxel of that class is inside the mask.
    """
    mask = np.asarray(mask, dtype=bool)
    p = _as_peaks(pred_vol, tess, threshold, mask)
    g = _as_peaks(gt_vol, tess, threshold, mask)
    sel = mask & (g.count == fiber_class)
    n = int(sel.sum())
    if n == 0:
        return float("nan")
    return 100.0 * float(np.sum(p.count[sel] == fiber_class)) / n


def _voxel_angular_errors(p: VolumePeaks, g: VolumePeaks, sel: np.ndarray, gate: float):
    errs = []
    for idx in zip(*np.nonzero(sel)):
        pairs = match_peaks(p.at(idx), g.at(idx), gate)
        if pairs:
            errs.append(float(np.mean([a for _, _, a in pairs])))
    return errs


def angular_error(pred_vol, gt_vol, mask, fiber_class: int, tess=None,
                  threshold: float = PEAK_THRESHOLD, gate: float = MATCH_GATE_DEG) -> float:
    """Mean matched-peak angle (degrees) over class-k voxels with at least one match."""
    mask = np.asarray(mask, dtype=bool)
    p = _as_peaks(pred_vol, tess, threshold, mask)
    g = _as_peaks(gt_vol, tess, threshold, mask)
    errs = _voxel_angular_errors(p, g, mask & (g.count == fiber_class), gate)
    return float(np.mean(errs)) if errs else float("nan")


def afd(fod) -> np.ndarray:
    """Total FOD integral ``2 sqrt(pi) c_00``."""
    return 2.0 * math.sqrt(math.pi) * np.asarray(fod, dtype=float)[..., 0]


def afd_error(pred_vol, gt_vol, mask) -> float:
    """Mean absolute AFD difference over the mask."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return float("nan")
    return float(np.mean(np.abs(afd(pred_vol)[mask] - afd(gt_vol)[mask])))


# --- tensor scalars -----------------------------------------------------

def _tensor_design(dirs: DirectionSet) -> np.ndarray:
    g, b = dirs.vectors, dirs.bvals
    return np.column_stack([
        np.ones(len(b)),
        -b * g[:, 0] ** 2, -b * g[:, 1] ** 2, -b * g[:, 2] ** 2,
        -2 * b * g[:, 0] * g[:, 1], -2 * b * g[:, 0] * g[:, 2], -2 * b * g[:, 1] * g[:, 2],
    ])


def tensor_eigenvalues(signal, dirs: DirectionSet, weighted: bool = True):
    """Diffusion tensor eigenvalues by (weighted) log-linear least squares.

    ``signal`` has shape (..., n_dirs). Voxels with any nonpositive sample
    are flagged invalid and get NaN eigenvalues.
    """
    s = np.asarray(signal, dtype=float)
    shape = s.shape[:-1]
    s = s.reshape(-1, s.shape[-1])
    X = _tensor_design(dirs)
    if np.linalg.matrix_rank(X) < 7:
        raise ValueError("tensor fit needs >= 6 non-collinear weighted directions and a b=0")
    valid = np.all(s > 0, axis=1)
    logs = np.log(np.where(s > 0, s, 1.0))
    coef = np.linalg.lstsq(X, logs.T, rcond=None)[0].T
    if weighted:
        # one reweighting pass with the OLS-predicted signal as weights
        w = np.exp(coef @ X.T)
        Xw = X[None] * w[:, :, None]
        coef = np.linalg.solve(np.einsum("nij,nik->njk", Xw, Xw),
                               np.einsum("nij,ni->nj", Xw, w * logs)[..., None])[..., 0]
    D = np.empty((s.shape[0], 3, 3))
    D[:, 0, 0], D[:, 1, 1], D[:, 2, 2] = coef[:, 1], coef[:, 2], coef[:, 3]
    D[:, 0, 1] = D[:, 1, 0] = coef[:, 4]
    D[:, 0, 2] = D[:, 2, 0] = coef[:, 5]
    D[:, 1, 2] = D[:, 2, 1] = coef[:, 6]
    ev = np.linalg.eigvalsh(D)[:, ::-1]
    ev[~valid] = np.nan
    return ev.reshape(shape + (3,))


def _fa_md(ev):
    ev = np.clip(ev, 0.0, None)
    md = ev.mean(axis=-1)
    num = np.sqrt(np.sum((ev - md[..., None]) ** 2, axis=-1))
    den = np.sqrt(np.sum(ev ** 2, axis=-1))
    fa = np.sqrt(1.5) * num / np.where(den > 0, den, 1.0)
    return np.where(den > 0, fa, 0.0), md


def tensor_fit(signal, dirs: DirectionSet, weighted: bool = True):
    """``(FA, MD)`` from a log-linear tensor fit; arrays follow the leading shape."""
    fa, md = _fa_md(tensor_eigenvalues(signal, dirs, weighted))
    if np.ndim(fa) == 0:
        return float(fa), float(md)
    return fa, md


def dti_shells(dirs: DirectionSet, bmax: float = 1100.0) -> np.ndarray:
    """Indices of b=0 and low-b measurements suited to a Gaussian tensor fit."""
    return np.flatnonzero(dirs.bvals <= bmax)


def subject_fa_md(subject):
    idx = dti_shells(subject.dirs)
    return tensor_fit(subject.dwi[..., idx], subject.dirs.subset(idx))


def wm_mask(subject, site_preset=None, fa_md=None) -> np.ndarray:
    """Tensor-threshold white-matter mask united with the known fibre region.

    The "dhcp" rule keeps FA > 0.3; the "bcp" rule keeps FA > 0.4 or
    (FA > 0.15 and MD > 0.0011).
    """
    from .phantom import get_preset
    preset = get_preset(site_preset or subject.preset) if not hasattr(site_preset, "mask_rule") else site_preset
    fa, md = subject_fa_md(subject) if fa_md is None else fa_md
    fa = np.nan_to_num(fa, nan=0.0)
    md = np.nan_to_num(md, nan=0.0)
    if preset.mask_rule == "dhcp":
        tissue = fa > 0.3
    elif preset.mask_rule == "bcp":
        tissue = (fa > 0.4) | ((fa > 0.15) & (md > 0.0011))
    else:
        raise ValueError(f"unknown mask rule {preset.mask_rule!r}")
    return tissue | (np.asarray(subject.fiber_class) > 0)


def mean_wm_fa(subject, mask=None) -> float:
    """Mean tensor FA inside the subject's fibre region (or a given mask)."""
    fa, _ = subject_fa_md(subject)
    mask = np.asarray(subject.fiber_class) > 0 if mask is None else np.asarray(mask, bool)
    return float(np.nanmean(fa[mask]))


# --- arctan growth curve ------------------------------------------------

@dataclass
class ArctanFit:
    """FA(t) = a + b * arctan(c * (t - t0))."""

    a: float
    b: float
    c: float
    t0: float
    rms: float = 0.0
    converged: bool = True
    iterations: int = 0

    def __call__(self, t):
        return self.a + self.b * np.arctan(self.c * (np.asarray(t, dtype=float) - self.t0))

    def slope(self, t):
        z = self.c * (np.asarray(t, dtype=float) - self.t0)
        return self.b * self.c / (1.0 + z * z)

    @property
    def params(self) -> np.ndarray:
        return np.array([self.a, self.b, self.c, self.t0])


class ArctanFitError(RuntimeError):
    """Levenberg-Marquardt hit the iteration cap; ``best`` holds the last iterate."""

    def __init__(self, best: ArctanFit):
        super().__init__(f"arctan fit did not converge in {best.iterations} iterations "
                         f"(rms {best.rms:.3g})")
        self.best = best


def _arctan_model(p, t):
    a, b, c, t0 = p
    z = c * (t - t0)
    r = 1.0 / (1.0 + z * z)
    f = a + b * np.arctan(z)
    J = np.column_stack([np.ones_like(t), np.arctan(z), b * (t - t0) * r, -b * c * r])
    return f, J


def fit_arctan(t, y, init: ArctanFit | None = None, max_iter: int = 200,
               step_tol: float = 1e-10) -> ArctanFit:
    """Levenberg-Marquardt least squares fit of the arctan growth curve.

    Converged when an accepted or proposed step has norm below ``step_tol``.
    Marquardt diagonal scaling; damping is divided by 3 on success and
    multiplied by 2 on failure.

    Raises
    ------
    ArctanFitError
        After ``max_iter`` iterations without convergence.
    """
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    if t.shape != y.shape or t.size < 4:
        raise ValueError("need at least 4 (age, FA) points of matching shape")
    if init is None:
        span = max(float(np.ptp(t)), 1e-6)
        init = ArctanFit(float(np.mean(y)), max(float(np.ptp(y)), 1e-3) / 2, 4.0 / span,
                         float(np.mean(t)))
    p = init.params.astype(float)
    f, J = _arctan_model(p, t)
    r = y - f
    cost = float(r @ r)
    mu = 1e-3 * max(1.0, float(np.max(np.diag(J.T @ J))))
    converged = False
    it = 0
    while it < max_iter:
        it += 1
        JtJ = J.T @ J
        g = J.T @ r
        D = np.maximum(np.diag(JtJ), 1e-12)
        try:
            step = np.linalg.solve(JtJ + mu * np.diag(D), g)
        except np.linalg.LinAlgError:
            mu *= 10
            continue
        if np.linalg.norm(step) < step_tol or cost == 0.0:
            converged = True
            break
        pn = p + step
        fn, Jn = _arctan_model(pn, t)
        rn = y - fn
        cn = float(rn @ rn)
        if cn < cost:
            p, f, J, r, cost = pn, fn, Jn, rn, cn
            mu /= 3.0
        else:
            mu *= 2.0
    fit = ArctanFit(*map(float, p), rms=math.sqrt(cost / t.size), converged=converged,
                    iterations=it)
    if not converged:
        raise ArctanFitError(fit)
    return fit


# --- reports ------------------------------------------------------------

CSV_COLUMNS = ["site", "experiment", "method", "n_target_subjects", "class", "AR", "AE",
               "dAFD", "n_voxels"]


@dataclass
class MetricsReport:
    """Per-class AR (%), AE (deg), mean dAFD and voxel counts for one evaluation."""

    site: str
    experiment: str
    method: str
    n_target_subjects: int = 0
    classes: dict = field(default_factory=dict)   # k -> {"AR", "AE", "dAFD", "n_voxels"}

    def rows(self):
        for k in sorted(self.classes):
            c = self.classes[k]
            yield [self.site, self.experiment, self.method, self.n_target_subjects, f"{k}F",
                   c["AR"], c["AE"], c["dAFD"], c["n_voxels"]]

    def ar(self, k: int = 1) -> float:
        return self.classes[k]["AR"]


def evaluate(pred_fods, gt_fods, masks, site: str = "", experiment: str = "", method: str = "",
             n_target_subjects: int = 0, classes=(1, 2, 3), tess=None,
             threshold: float = PEAK_THRESHOLD) -> MetricsReport:
    """Pool AR, AE and dAFD over several subjects (voxel weighted)."""
    if isinstance(pred_fods, np.ndarray) and pred_fods.ndim == 4:
        pred_fods, gt_fods, masks = [pred_fods], [gt_fods], [masks]
    hits = {k: 0 for k in classes}
    count = {k: 0 for k in classes}
    errs: dict[int, list] = {k: [] for k in classes}
    dafd: dict[int, list] = {k: [] for k in classes}
    for pred, gt, mask in zip(pred_fods, gt_fods, masks):
        mask = np.asarray(mask, dtype=bool)
        p = _as_peaks(pred, tess, threshold, mask)
        g = _as_peaks(gt, tess, threshold, mask)
        diff = np.abs(afd(pred) - afd(gt))
        for k in classes:
            sel = mask & (g.count == k)
            count[k] += int(sel.sum())
            hits[k] += int(np.sum(p.count[sel] == k))
            errs[k] += _voxel_angular_errors(p, g, sel, MATCH_GATE_DEG)
            dafd[k] += list(diff[sel])
    out = {}
    for k in classes:
        n = count[k]
        out[k] = {
            "AR": 100.0 * hits[k] / n if n else float("nan"),
            "AE": float(np.mean(errs[k])) if errs[k] else float("nan"),
            "dAFD": float(np.mean(dafd[k])) if dafd[k] else float("nan"),
            "n_voxels": n,
        }
    return MetricsReport(site, experiment, method, n_target_subjects, out)


def _fmt(x) -> str:
    if isinstance(x, float):
        return "nan" if math.isnan(x) else f"{x:.2f}"
    return str(x)


def reports_to_csv(reports) -> str:
    """CSV text with a header row; numbers at two decimals."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for rep in reports:
        for row in rep.rows():
            w.writerow([_fmt(x) for x in row])
    return buf.getvalue()


def reports_to_markdown(reports, title: str | None = None) -> str:
    """One row per (method, n), AR | AE | dAFD columns grouped by fibre class."""
    reports = list(reports)
    classes = sorted({k for r in reports for k in r.classes}) or [1, 2, 3]
    head = ["site", "experiment", "method", "n"]
    for k in classes:
        head += [f"{k}F AR (%)", f"{k}F AE (deg)", f"{k}F dAFD"]
    lines = []
    if title:
        lines += [f"## {title}", ""]
    lines.append("| " + " | ".join(head) + " |")
    lines.append("|" + "|".join(["---"] * len(head)) + "|")
    for r in reports:
        cells = [r.site, r.experiment, r.method, str(r.n_target_subjects)]
        for k in classes:
            c = r.classes.get(k, {"AR": float("nan"), "AE": float("nan"), "dAFD": float("nan")})
            cells += [_fmt(float(c["AR"])), _fmt(float(c["AE"])), _fmt(float(c["dAFD"]))]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"
