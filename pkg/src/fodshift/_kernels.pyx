# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops. Contract mirrors ``_kernels_py``."""

import numpy as np
cimport numpy as cnp
from cython cimport floating
from libc.math cimport fabs, sqrt
from scipy.linalg.cython_lapack cimport dgels
from scipy.linalg.cython_blas cimport dgemv

cnp.import_array()


cdef int _lstsq_cols(double[::1, :] A, int[::1] cols, int ncols,
                     double[::1] b, double[::1, :] work_a,
                     double[::1] work_b, double[::1] lwork,
                     double[::1] out) noexcept nogil:
    cdef int m = A.shape[0]
    cdef int i, j, c
    cdef int nrhs = 1, lda = m, ldb = m if m > ncols else ncols, info = 0
    cdef int lw = lwork.shape[0]
    cdef char trans = b'N'
    for j in range(ncols):
        c = cols[j]
        for i in range(m):
            work_a[i, j] = A[i, c]
    for i in range(ldb):
        work_b[i] = b[i] if i < m else 0.0
    dgels(&trans, &m, &ncols, &nrhs, &work_a[0, 0], &lda, &work_b[0], &ldb,
          &lwork[0], &lw, &info)
    for j in range(ncols):
        out[j] = work_b[j]
    return info


def nnls(A_in, b_in, int maxiter=-1, double tol=-1.0):
    """Lawson-Hanson active-set NNLS: min ||Ax - b|| subject to x >= 0."""
    cdef double[::1, :] A = np.asfortranarray(A_in, dtype=np.float64)
    cdef double[::1] b = np.ascontiguousarray(b_in, dtype=np.float64)
    cdef int m = A.shape[0]
    cdef int n = A.shape[1]
    if maxiter < 0:
        maxiter = 3 * n
    if tol < 0:
        tol = 10.0 * np.finfo(float).eps * max(m, n) * max(1.0, float(np.max(np.abs(b_in))) if m else 1.0)
    x_arr = np.zeros(n)
    cdef double[::1] x = x_arr
    cdef double[::1] z = np.zeros(n)
    cdef double[::1] w = np.zeros(n)
    cdef double[::1] r = np.zeros(m)
    cdef double[::1] sol = np.zeros(n)
    cdef int[::1] passive = np.zeros(n, dtype=np.intc)
    cdef int[::1] cols = np.zeros(n, dtype=np.intc)
    cdef double[::1, :] work_a = np.zeros((m, n), order="F")
    cdef double[::1] work_b = np.zeros(max(m, n))
    cdef double[::1] lwork = np.zeros(64 * (m + n) + 64)
    cdef int i, j, k, npass = 0, iters = 0, jmax, jblock, info
    cdef double wmax, alpha, t, s
    cdef bint converged = False
    cdef char trans_n = b'N', trans_t = b'T'
    cdef double one = 1.0, minus_one = -1.0, zero = 0.0
    cdef int inc = 1, lda = m

    while True:
        # residual r = b - A x and dual vector w = A^T r
        for i in range(m):
            r[i] = b[i]
        dgemv(&trans_n, &m, &n, &minus_one, &A[0, 0], &lda, &x[0], &inc, &one, &r[0], &inc)
        dgemv(&trans_t, &m, &n, &one, &A[0, 0], &lda, &r[0], &inc, &zero, &w[0], &inc)
        jmax = -1
        wmax = tol
        for j in range(n):
            if not passive[j] and w[j] > wmax:
                wmax = w[j]
                jmax = j
        if jmax < 0:
            converged = True
            break
        passive[jmax] = 1
        npass += 1
        while True:
            iters += 1
            if iters > maxiter:
                break
            k = 0
            for j in range(n):
                if passive[j]:
                    cols[k] = j
                    k += 1
            info = _lstsq_cols(A, cols, k, b, work_a, work_b, lwork, sol)
            for j in range(n):
                z[j] = 0.0
            for j in range(k):
                z[cols[j]] = sol[j]
            alpha = 2.0
            jblock = -1
            for j in range(k):
                i = cols[j]
                if z[i] <= 0.0:
                    t = x[i] / (x[i] - z[i])
                    if t < alpha:
                        alpha = t
                        jblock = i
            if jblock < 0:
                for j in range(n):
                    x[j] = z[j]
                break
            for j in range(k):
                i = cols[j]
                x[i] = x[i] + alpha * (z[i] - x[i])
                if i == jblock or x[i] <= 0.0:
                    x[i] = 0.0
                    passive[i] = 0
                    npass -= 1
        if iters > maxiter:
            break
    s = 0.0
    for i in range(m):
        t = b[i]
        for j in range(n):
            t -= A[i, j] * x[j]
        s += t * t
    return x_arr, sqrt(s), converged


def local_maxima(double[:, ::1] values, long[:, ::1] table):
    """Boolean mask of points strictly above every neighbour, per row."""
    cdef Py_ssize_t nv = values.shape[0], npt = values.shape[1], width = table.shape[1]
    out_arr = np.zeros((nv, npt), dtype=np.bool_)
    cdef cnp.npy_bool[:, ::1] out = out_arr
    cdef Py_ssize_t v, i, k, nb
    cdef double c
    cdef bint is_max
    with nogil:
        for v in range(nv):
            for i in range(npt):
                c = values[v, i]
                is_max = True
                for k in range(width):
                    nb = table[i, k]
                    if nb != i and values[v, nb] >= c:
                        is_max = False
                        break
                out[v, i] = is_max
    return out_arr


def adam_update(floating[::1] params, floating[::1] grads, floating[::1] m,
                floating[::1] v, double lr, double beta1, double beta2,
                double eps, long step, double weight_decay):
    """In-place bias-corrected Adam step followed by decoupled decay."""
    cdef Py_ssize_t i, n = params.shape[0]
    if grads.shape[0] != n or m.shape[0] != n or v.shape[0] != n:
        raise ValueError("adam buffers differ in length")
    cdef double step_size = lr / (1.0 - beta1 ** step)
    cdef double inv_sqrt_bc2 = 1.0 / sqrt(1.0 - beta2 ** step)
    cdef double decay = 1.0 - lr * weight_decay
    cdef double c1 = 1.0 - beta1, c2 = 1.0 - beta2
    cdef double g, mi, vi
    with nogil:
        for i in range(n):
            g = grads[i]
            mi = beta1 * m[i] + c1 * g
            vi = beta2 * v[i] + c2 * g * g
            m[i] = <floating>mi
            v[i] = <floating>vi
            params[i] = <floating>((params[i] - step_size * mi / (sqrt(vi) * inv_sqrt_bc2 + eps)) * decay)


cdef inline void _givens(double a, double b, double* c, double* s, double* rho) noexcept nogil:
    cdef double h
    if b == 0.0:
        c[0] = 1.0
        s[0] = 0.0
        rho[0] = a
        return
    h = sqrt(a * a + b * b)
    c[0] = a / h
    s[0] = b / h
    rho[0] = h


def ldp(E_in, f_in, int maxiter=-1, double tol=-1.0):
    """Least-distance programming: min ||y||^2 subject to E y >= f.

    Goldfarb-Idnani dual active-set method with the identity Hessian.
    Returns ``(y, multipliers, converged, iterations)``; multipliers are
    per constraint and satisfy ``y = E^T multipliers`` at the solution.
    """
    cdef double[:, ::1] E = np.ascontiguousarray(E_in, dtype=np.float64)
    cdef double[::1] f = np.ascontiguousarray(f_in, dtype=np.float64)
    cdef int m = E.shape[0]
    cdef int n = E.shape[1]
    if maxiter < 0:
        maxiter = 50 * (m + n)
    if tol < 0:
        tol = 1e-12 * max(1.0, float(np.max(np.abs(f_in))) if m else 1.0)
    y_arr = np.zeros(n)
    lam_full = np.zeros(m)
    cdef double[::1] y = y_arr
    cdef double[::1] s = np.zeros(m)
    cdef double[:, ::1] Q = np.eye(n)
    cdef double[:, ::1] R = np.zeros((n, n))
    cdef double[::1] d = np.zeros(n)
    cdef double[::1] z = np.zeros(n)
    cdef double[::1] r = np.zeros(n)
    cdef double[::1] lam = np.zeros(n + 1)
    cdef int[::1] act = np.zeros(n + 1, dtype=np.intc)
    cdef int[::1] is_active = np.zeros(m, dtype=np.intc)
    cdef int k = 0, p, i, j, l, iters = 0
    cdef double smin, sp, lam_p, t1, t2, t, znorm2, c, sn, rho, a, b, acc, scale
    cdef bint converged = False, full_step

    while iters < maxiter:
        # constraint slacks
        p = -1
        smin = -tol
        for i in range(m):
            acc = -f[i]
            for j in range(n):
                acc += E[i, j] * y[j]
            s[i] = acc
            if not is_active[i] and acc < smin:
                smin = acc
                p = i
        if p < 0:
            converged = True
            break
        sp = s[p]
        lam_p = 0.0
        while iters < maxiter:
            iters += 1
            # d = Q^T e_p
            for i in range(n):
                acc = 0.0
                for j in range(n):
                    acc += Q[j, i] * E[p, j]
                d[i] = acc
            # z = Q[:, k:] d[k:]
            znorm2 = 0.0
            for i in range(k, n):
                znorm2 += d[i] * d[i]
            for j in range(n):
                acc = 0.0
                for i in range(k, n):
                    acc += Q[j, i] * d[i]
                z[j] = acc
            # r = R[:k,:k]^-1 d[:k]
            for i in range(k - 1, -1, -1):
                acc = d[i]
                for j in range(i + 1, k):
                    acc -= R[i, j] * r[j]
                r[i] = acc / R[i, i]
            t1 = 1e300
            l = -1
            for i in range(k):
                if r[i] > 0.0 and lam[i] / r[i] < t1:
                    t1 = lam[i] / r[i]
                    l = i
            scale = 0.0
            for j in range(n):
                scale += E[p, j] * E[p, j]
            if znorm2 <= 1e-24 * scale:
                if l < 0:
                    return y_arr, lam_full, False, iters   # infeasible
                t = t1
                full_step = False
            else:
                t2 = -sp / znorm2
                full_step = t2 <= t1
                t = t2 if full_step else t1
                for j in range(n):
                    y[j] += t * z[j]
                sp += t * znorm2
            for i in range(k):
                lam[i] -= t * r[i]
            lam_p += t
            if full_step:
                # append column d to R after rotating d[k+1:] to zero
                for i in range(n - 1, k, -1):
                    a = d[i - 1]
                    b = d[i]
                    _givens(a, b, &c, &sn, &rho)
                    d[i - 1] = rho
                    d[i] = 0.0
                    for j in range(n):
                        a = Q[j, i - 1]
                        b = Q[j, i]
                        Q[j, i - 1] = c * a + sn * b
                        Q[j, i] = -sn * a + c * b
                for i in range(k + 1):
                    R[i, k] = d[i]
                act[k] = p
                lam[k] = lam_p
                is_active[p] = 1
                k += 1
                break
            # drop active constraint l and re-triangularise
            is_active[act[l]] = 0
            for j in range(l, k - 1):
                act[j] = act[j + 1]
                lam[j] = lam[j + 1]
                for i in range(n):
                    R[i, j] = R[i, j + 1]
            for i in range(n):
                R[i, k - 1] = 0.0
            k -= 1
            for j in range(l, k):
                a = R[j, j]
                b = R[j + 1, j]
                _givens(a, b, &c, &sn, &rho)
                for i in range(j, k):
                    a = R[j, i]
                    b = R[j + 1, i]
                    R[j, i] = c * a + sn * b
                    R[j + 1, i] = -sn * a + c * b
                R[j + 1, j] = 0.0
                for i in range(n):
                    a = Q[i, j]
                    b = Q[i, j + 1]
                    Q[i, j] = c * a + sn * b
                    Q[i, j + 1] = -sn * a + c * b
    cdef double[::1] lf = lam_full
    for i in range(k):
        lf[act[i]] = lam[i]
    return y_arr, lam_full, converged, iters
