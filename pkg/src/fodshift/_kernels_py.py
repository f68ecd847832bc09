"""Pure numpy versions of the compiled kernels in ``_kernels.pyx``."""

import numpy as np


def nnls(A, b, maxiter=-1, tol=-1.0):
    """Lawson-Hanson active-set NNLS: min ||Ax - b|| subject to x >= 0.

    Returns ``(x, residual_norm, converged)``.
    """
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    m, n = A.shape
    if maxiter < 0:
        maxiter = 3 * n
    if tol < 0:
        tol = 10.0 * np.finfo(float).eps * max(m, n) * max(1.0, float(np.max(np.abs(b), initial=0.0)))
    x = np.zeros(n)
    passive = np.zeros(n, dtype=bool)
    iters = 0
    converged = False
    while True:
        w = A.T @ (b - A @ x)
        w_free = np.where(passive, -np.inf, w)
        jmax = int(np.argmax(w_free))
        if w_free[jmax] <= tol:
            converged = True
            break
        passive[jmax] = True
        while True:
            iters += 1
            if iters > maxiter:
                break
            cols = np.flatnonzero(passive)
            z = np.zeros(n)
            z[cols] = np.linalg.lstsq(A[:, cols], b, rcond=None)[0]
            blocking = cols[z[cols] <= 0.0]
            if blocking.size == 0:
                x = z
                break
            ratios = x[blocking] / (x[blocking] - z[blocking])
            jblock = blocking[np.argmin(ratios)]
            alpha = ratios.min()
            x[cols] += alpha * (z[cols] - x[cols])
            drop = cols[x[cols] <= 0.0]
            passive[drop] = False
            passive[jblock] = False
            x[~passive] = 0.0
        if iters > maxiter:
            break
    return x, float(np.linalg.norm(b - A @ x)), converged


def local_maxima(values, table):
    """Boolean mask of points strictly above every neighbour, per row."""
    values = np.asarray(values, dtype=float)
    table = np.asarray(table)
    self_ref = table == np.arange(table.shape[0])[:, None]
    nb = values[:, table]
    nb[:, self_ref] = -np.inf
    return np.all(values[:, :, None] > nb, axis=2)


def adam_update(params, grads, m, v, lr, beta1, beta2, eps, step, weight_decay):
    """In-place bias-corrected Adam step followed by decoupled decay."""
    m *= beta1
    m += (1.0 - beta1) * grads
    v *= beta2
    v += (1.0 - beta2) * grads * grads
    mh = m / (1.0 - beta1 ** step)
    vh = v / (1.0 - beta2 ** step)
    params -= lr * mh / (np.sqrt(vh) + eps)
    params *= 1.0 - lr * weight_decay


def _givens(a, b):
    if b == 0.0:
        return 1.0, 0.0, a
    h = np.hypot(a, b)
    return a / h, b / h, h


def ldp(E, f, maxiter=-1, tol=-1.0):
    """Least-distance programming: min ||y||^2 subject to E y >= f.

    Goldfarb-Idnani dual active-set method with the identity Hessian.
    Returns ``(y, multipliers, converged, iterations)``.
    """
    E = np.asarray(E, dtype=float)
    f = np.asarray(f, dtype=float)
    m, n = E.shape
    if maxiter < 0:
        maxiter = 50 * (m + n)
    if tol < 0:
        tol = 1e-12 * max(1.0, float(np.max(np.abs(f), initial=0.0)))
    y = np.zeros(n)
    Q = np.eye(n)
    R = np.zeros((n, n))
    lam: list[float] = []
    act: list[int] = []
    is_active = np.zeros(m, dtype=bool)
    iters = 0
    converged = False
    while iters < maxiter:
        s = E @ y - f
        s_free = np.where(is_active, np.inf, s)
        p = int(np.argmin(s_free))
        if s_free[p] >= -tol:
            converged = True
            break
        sp = s[p]
        lam_p = 0.0
        while iters < maxiter:
            iters += 1
            k = len(act)
            d = Q.T @ E[p]
            znorm2 = float(d[k:] @ d[k:])
            z = Q[:, k:] @ d[k:]
            r = np.zeros(k)
            for i in range(k - 1, -1, -1):
                r[i] = (d[i] - R[i, i + 1:k] @ r[i + 1:]) / R[i, i]
            lam_arr = np.array(lam)
            t1, l = np.inf, -1
            pos = np.flatnonzero(r > 0)
            if pos.size:
                ratios = lam_arr[pos] / r[pos]
                l = int(pos[np.argmin(ratios)])
                t1 = float(ratios.min())
            if znorm2 <= 1e-24 * float(E[p] @ E[p]):
                if l < 0:
                    full = np.zeros(m)
                    return y, full, False, iters
                t, full_step = t1, False
            else:
                t2 = -sp / znorm2
                full_step = t2 <= t1
                t = t2 if full_step else t1
                y = y + t * z
                sp += t * znorm2
            lam = list(lam_arr - t * r) if k else []
            lam_p += t
            if full_step:
                for i in range(n - 1, k, -1):
                    c, sn, rho = _givens(d[i - 1], d[i])
                    d[i - 1], d[i] = rho, 0.0
                    qa, qb = Q[:, i - 1].copy(), Q[:, i].copy()
                    Q[:, i - 1] = c * qa + sn * qb
                    Q[:, i] = -sn * qa + c * qb
                R[: k + 1, k] = d[: k + 1]
                act.append(p)
                lam.append(lam_p)
                is_active[p] = True
                break
            is_active[act[l]] = False
            del act[l]
            del lam[l]
            R[:, l:k - 1] = R[:, l + 1:k].copy()
            R[:, k - 1] = 0.0
            k -= 1
            for j in range(l, k):
                c, sn, _ = _givens(R[j, j], R[j + 1, j])
                ra, rb = R[j, j:k].copy(), R[j + 1, j:k].copy()
                R[j, j:k] = c * ra + sn * rb
                R[j + 1, j:k] = -sn * ra + c * rb
                R[j + 1, j] = 0.0
                qa, qb = Q[:, j].copy(), Q[:, j + 1].copy()
                Q[:, j] = c * qa + sn * qb
                Q[:, j + 1] = -sn * qa + c * qb
    full = np.zeros(m)
    full[act] = lam
    return y, full, converged, iters
