"""Batched solvers for the exponentially tilted criterion.

Every array carries a leading batch axis ``B`` of independent problems. Problems
never interact: each has its own convergence flag, line search and iteration
count, so a result does not depend on which other problems share the batch.

Moment rows are affine in the parameter, ``g_i(theta) = off_i - slope_i theta``,
with ``off`` (B, N, r) and ``slope`` (B, N, r, p).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

DUAL_TOL = 1e-10
DUAL_MAX_ITER = 100
MAX_HALVING = 30
OUTER_TOL = 1e-14
OUTER_MAX_ITER = 200
_ARMIJO = 1e-4
_ROUNDOFF = 8 * np.finfo(float).eps
_FLAT = 1e-10
_STALL = 1e-12
_GN_STEPS = 3
_STALL_DECREMENT = 1e-9


def adjustment_factor(n: int) -> float:
    return max(1.0, math.log(n) / 2.0)


def with_adjustment(off: np.ndarray, slope: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Append the pseudo-row ``-(a_n / n) * sum_i g_i`` to an affine system."""
    n = off.shape[-2]
    a = adjustment_factor(n)
    off_extra = -(a / n) * off.sum(axis=-2, keepdims=True)
    slope_extra = -(a / n) * slope.sum(axis=-3, keepdims=True)
    return np.concatenate([off, off_extra], axis=-2), np.concatenate([slope, slope_extra], axis=-3)


def solve(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Batched ``np.linalg.solve`` that yields NaN for singular or non-finite systems instead of raising."""
    try:
        return np.linalg.solve(A, b)
    except np.linalg.LinAlgError:
        pass
    out = np.full(np.broadcast_shapes(A.shape[:-2], b.shape[:-2]) + b.shape[-2:], np.nan)
    A = np.broadcast_to(A, out.shape[:-2] + A.shape[-2:])
    b = np.broadcast_to(b, out.shape)
    for i in np.ndindex(out.shape[:-2]):
        try:
            out[i] = np.linalg.solve(A[i], b[i])
        except np.linalg.LinAlgError:
            pass
    return out


def _mv(A: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Batched matrix-vector product ``A[b] @ x[b]``."""
    return (A @ x[..., None])[..., 0]


def _weighted_gram(w: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """``sum_n w[b, n] rows[b, n] rows[b, n]^T`` for each batch entry."""
    return np.swapaxes(rows * w[..., None], 1, 2) @ rows


def _logsumexp(s: np.ndarray) -> np.ndarray:
    mx = s.max(axis=-1, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        return np.log(np.exp(s - mx).sum(axis=-1)) + mx[..., 0]


def _row_scale(rows: np.ndarray) -> np.ndarray:
    return np.maximum(1.0, np.abs(rows).max(axis=(-2, -1)))


@dataclass
class DualBatch:
    lam: np.ndarray  # (B, r)
    logp: np.ndarray  # (B, N)
    converged: np.ndarray  # (B,)
    iterations: np.ndarray  # (B,)
    grad_norm: np.ndarray  # (B,)

    @property
    def objective(self) -> np.ndarray:
        N = self.logp.shape[-1]
        obj = -self.logp.mean(axis=-1) - math.log(N)
        return np.where(self.converged, np.maximum(obj, 0.0), np.inf)


def solve_dual_batch(rows: np.ndarray, lam0: np.ndarray | None = None, tol: float = DUAL_TOL,
                     max_iter: int = DUAL_MAX_ITER, max_halving: int = MAX_HALVING) -> DualBatch:
    """Minimize ``K(lam) = log mean_i exp(lam^T g_i)`` by damped Newton.

    At the minimizer the weights ``p_i`` proportional to ``exp(lam^T g_i)``
    satisfy ``sum_i p_i g_i = 0``. Convergence means a gradient norm below
    ``tol``, relaxed to a small multiple of machine precision times the largest
    absolute row entry when the rows are large.
    """
    B, N, r = rows.shape
    lam = np.zeros((B, r)) if lam0 is None else np.array(lam0, dtype=float, copy=True)
    tol_b = np.maximum(tol, 64 * np.finfo(float).eps * _row_scale(rows))
    s = _mv(rows, lam)
    logz = _logsumexp(s)
    converged = np.zeros(B, dtype=bool)
    stalled = np.zeros(B, dtype=bool)
    iterations = np.zeros(B, dtype=int)
    grad_norm = np.full(B, np.inf)
    eye = np.eye(r)

    for _ in range(max_iter + 1):
        p = np.exp(s - logz[:, None])
        grad = _mv(np.swapaxes(rows, 1, 2), p)
        grad_norm = np.linalg.norm(grad, axis=1)
        converged |= grad_norm <= tol_b
        todo = np.flatnonzero(~converged & ~stalled & (iterations < max_iter))
        if todo.size == 0:
            break
        rt, pt, gt = rows[todo], p[todo], grad[todo]
        H = _weighted_gram(pt, rt) - gt[:, :, None] * gt[:, None, :]
        tr = np.trace(H, axis1=1, axis2=2)
        H = H + (1e-12 * np.maximum(tr, 1e-300))[:, None, None] * eye
        step = -solve(H, gt[..., None])[..., 0]
        slope_dir = np.einsum("br,br->b", gt, step)
        k_old = logz[todo]
        t = np.ones(todo.size)
        accepted = np.zeros(todo.size, dtype=bool)
        new_s = s[todo].copy()
        new_logz = k_old.copy()
        for _h in range(max_halving + 1):
            pend = np.flatnonzero(~accepted)
            if pend.size == 0:
                break
            cand = lam[todo[pend]] + t[pend, None] * step[pend]
            sc = _mv(rt[pend], cand)
            lz = _logsumexp(sc)
            slack = _ROUNDOFF * np.maximum(1.0, np.abs(k_old[pend]))
            ok = lz <= k_old[pend] + _ARMIJO * t[pend] * slope_dir[pend] + slack
            ok &= np.isfinite(lz)
            idx = pend[ok]
            new_s[idx] = sc[ok]
            new_logz[idx] = lz[ok]
            accepted[idx] = True
            t[pend[~ok]] *= 0.5
        upd = todo[accepted]
        lam[upd] = lam[upd] + t[accepted, None] * step[accepted]
        s[upd] = new_s[accepted]
        logz[upd] = new_logz[accepted]
        stalled[todo[~accepted]] = True
        iterations[todo] += 1

    logp = s - logz[:, None]
    return DualBatch(lam, logp, converged, iterations, grad_norm)


@dataclass
class OuterBatch:
    theta: np.ndarray  # (B, p)
    objective: np.ndarray  # (B,)
    lam: np.ndarray  # (B, r)
    logp: np.ndarray  # (B, N)
    converged: np.ndarray  # (B,)
    iterations: np.ndarray  # (B,)
    dual_converged: np.ndarray  # (B,)


def rows_at(off: np.ndarray, slope: np.ndarray, theta: np.ndarray) -> np.ndarray:
    return off - (slope @ theta[:, None, :, None])[..., 0]


def gradient_and_metric(rows, slope, lam, logp):
    """Exact gradient of the tilted criterion and a Gauss-Newton metric.

    The tilting vector solves ``sum_i p_i g_i = 0``; differentiating that
    identity gives ``d lam / d theta = -A^{-1} M`` with ``A = sum p_i g_i g_i^T``
    and ``M = sum_i p_i (g_i (lam^T J_i) + J_i)``, ``J_i = -slope_i``. The
    criterion is ``K(lam) - lam^T gbar`` so its gradient is
    ``lam^T (sum p_i J_i - Jbar) - gbar^T d lam / d theta``.
    The metric ``Jbar^T A^{-1} Jbar`` is the Hessian of the local quadratic
    approximation ``gbar^T A^{-1} gbar / 2``.
    """
    p = np.exp(logp)
    J = -slope
    B, N, r = rows.shape
    A = _weighted_gram(p, rows)
    tr = np.trace(A, axis1=1, axis2=2)
    A = A + (1e-13 * np.maximum(tr, 1e-300))[:, None, None] * np.eye(r)
    PJ = (p[:, :, None] * J.reshape(B, N, -1)).sum(axis=1).reshape(B, r, -1)
    lamJ = (lam[:, None, None, :] @ J)[:, :, 0, :]
    M = np.swapaxes(rows * p[:, :, None], 1, 2) @ lamJ + PJ
    dlam = -solve(A, M)
    Jbar = J.mean(axis=1)
    gbar = rows.mean(axis=1)
    grad = np.einsum("br,brp->bp", lam, PJ - Jbar) - np.einsum("br,brp->bp", gbar, dlam)
    metric = np.einsum("brp,brs->bps", Jbar, solve(A, Jbar))
    return grad, metric


def fd_hessian(off, slope, theta, lam, grad, rel_step: float = 1e-5):
    """Forward-difference Hessian of the exact gradient, made positive definite.

    Eigenvalues are replaced by their absolute values (floored relative to the
    largest), which keeps Newton steps descending and lets them move away from
    saddle points along directions of negative curvature. Returns the modified
    matrices and a mask of those that could be formed from finite values.
    """
    B, p = theta.shape
    H = np.empty((B, p, p))
    for j in range(p):
        h = rel_step * np.maximum(1.0, np.abs(theta[:, j]))
        tj = theta.copy()
        tj[:, j] += h
        rows = rows_at(off, slope, tj)
        d = solve_dual_batch(rows, lam0=lam)
        gj, _ = gradient_and_metric(rows, slope, d.lam, d.logp)
        gj[~d.converged] = np.nan
        H[:, :, j] = (gj - grad) / h[:, None]
    H = 0.5 * (H + np.swapaxes(H, 1, 2))
    valid = np.all(np.isfinite(H), axis=(1, 2))
    H = np.where(valid[:, None, None], H, np.eye(p))
    w, U = np.linalg.eigh(H)
    w = np.abs(w)
    w = np.maximum(w, 1e-8 * np.maximum(w.max(axis=1, keepdims=True), 1e-300))
    return np.einsum("bij,bj,bkj->bik", U, w, U), valid


def identity_start(off: np.ndarray, slope: np.ndarray) -> np.ndarray:
    """Minimizer of ``|sum_i g_i(theta)|^2``; the exact root when ``r == p``."""
    S = slope.sum(axis=1)
    o = off.sum(axis=1)
    return np.einsum("bpr,br->bp", np.linalg.pinv(S), o)


def minimize_batch(off: np.ndarray, slope: np.ndarray, theta0: np.ndarray | None = None,
                   tol: float = OUTER_TOL, max_iter: int = OUTER_MAX_ITER,
                   max_halving: int = MAX_HALVING, newton: bool = True) -> OuterBatch:
    """Minimize the tilted criterion over theta for each problem in the batch.

    Damped Newton steps with the exact gradient, a finite-difference Hessian of
    that gradient (the Gauss-Newton metric stands in where the Hessian is not
    positive definite, or always when ``newton`` is false) and an Armijo
    backtracking line search. Points where the inner dual fails to converge count as
    ``+inf``. A problem is converged once the squared Newton decrement
    ``grad^T metric^{-1} grad`` drops below ``tol``.
    """
    B, N, r, p = slope.shape
    theta = identity_start(off, slope) if theta0 is None else np.array(theta0, dtype=float, copy=True)
    if p == 0:
        dual = solve_dual_batch(rows_at(off, slope, theta))
        return OuterBatch(theta, dual.objective, dual.lam, dual.logp, dual.converged.copy(),
                          np.zeros(B, dtype=int), dual.converged)

    dual = solve_dual_batch(rows_at(off, slope, theta))
    lam, logp, dconv = dual.lam, dual.logp, dual.converged
    obj = dual.objective
    converged = np.zeros(B, dtype=bool)
    failed = ~np.isfinite(obj)
    iterations = np.zeros(B, dtype=int)

    for _ in range(max_iter):
        todo = np.flatnonzero(~converged & ~failed)
        if todo.size == 0:
            break
        rows_t = rows_at(off[todo], slope[todo], theta[todo])
        grad, metric = gradient_and_metric(rows_t, slope[todo], lam[todo], logp[todo])
        if newton:
            # Gauss-Newton alone converges only linearly once the criterion is far
            # from zero; problems still running after a few steps switch to Newton
            slow = np.flatnonzero(iterations[todo] >= _GN_STEPS)
            if slow.size:
                st = todo[slow]
                H, valid = fd_hessian(off[st], slope[st], theta[st], lam[st], grad[slow])
                metric[slow] = np.where(valid[:, None, None], H, metric[slow])
        pe = np.eye(p)
        trm = np.trace(metric, axis1=1, axis2=2)
        metric = metric + (1e-12 * np.maximum(trm, 1e-300))[:, None, None] * pe
        step = -solve(metric, grad[..., None])[..., 0]
        decrement = -np.einsum("bp,bp->b", grad, step)
        done = decrement < tol
        converged[todo[done]] = True
        act = np.flatnonzero(~done)
        if act.size == 0:
            break
        idx = todo[act]
        step = step[act]
        dirderiv = -decrement[act]
        t = np.ones(act.size)
        accepted = np.zeros(act.size, dtype=bool)
        # near the optimum the decrease is at round-off level; stop instead of halving
        at_floor = np.zeros(act.size, dtype=bool)
        for _h in range(max_halving + 1):
            pend = np.flatnonzero(~accepted & ~at_floor)
            if pend.size == 0:
                break
            gi = idx[pend]
            cand = theta[gi] + t[pend, None] * step[pend]
            d = solve_dual_batch(rows_at(off[gi], slope[gi], cand), lam0=lam[gi])
            cobj = d.objective
            ok = cobj <= obj[gi] + _ARMIJO * t[pend] * dirderiv[pend]
            ok &= np.isfinite(cobj)
            if _h == 0:
                floor = (~ok) & (decrement[act][pend] < _FLAT)
                at_floor[pend[floor]] = True
                ok &= ~floor
            good = gi[ok]
            # the criterion can approach its infimum only as theta runs off to
            # infinity; stop once both the actual and predicted decrease vanish
            stagnant = (obj[good] - cobj[ok] < _STALL) & (decrement[act][pend][ok] < _STALL_DECREMENT)
            converged[good[stagnant]] = True
            theta[good] = cand[ok]
            obj[good] = cobj[ok]
            lam[good] = d.lam[ok]
            logp[good] = d.logp[ok]
            dconv[good] = True
            accepted[pend[ok]] = True
            t[pend[~ok]] *= 0.5
        iterations[idx] += 1
        # a failed line search on a nearly flat criterion is as good as it gets
        stuck = idx[~accepted]
        flat = decrement[act][~accepted] < _FLAT
        converged[stuck[flat]] = True
        failed[stuck[~flat]] = True

    return OuterBatch(theta, obj, lam, logp, converged, iterations, dconv)


def null_space_reparam(off, slope, R, b0):
    """Rewrite ``theta = theta_p + Nmat @ gamma`` so that ``R theta = b0`` holds identically.

    ``b0`` may be (c0,) or batched (B, c0). Returns the reduced system and the
    maps back to theta.
    """
    from scipy.linalg import null_space

    R = np.atleast_2d(np.asarray(R, dtype=float))
    b0 = np.asarray(b0, dtype=float)
    pinv = np.linalg.pinv(R)
    theta_p = b0 @ pinv.T if b0.ndim == 2 else np.broadcast_to(pinv @ b0, (off.shape[0], R.shape[1]))
    Nmat = null_space(R)
    off_c = rows_at(off, slope, theta_p)
    slope_c = np.einsum("bnrp,pk->bnrk", slope, Nmat)
    return off_c, slope_c, np.ascontiguousarray(theta_p), Nmat


def constrained_minimize_batch(off, slope, R, b0, theta0=None, **kw) -> OuterBatch:
    off_c, slope_c, theta_p, Nmat = null_space_reparam(off, slope, R, b0)
    gamma0 = None
    if theta0 is not None:
        gamma0 = (np.asarray(theta0, dtype=float) - theta_p) @ Nmat
    res = minimize_batch(off_c, slope_c, gamma0, **kw)
    res.theta = theta_p + res.theta @ Nmat.T
    return res


@dataclass
class LRBatch:
    statistic: np.ndarray
    free: OuterBatch
    null: OuterBatch
    ok: np.ndarray


def lr_batch(off, slope, R, b0, theta0=None, clamp: float = 1e-8) -> LRBatch:
    """Likelihood-ratio statistics ``2 N (min_null - min_free)`` for a batch of problems.

    The free fit is restarted from the constrained optimum whenever the
    constrained minimum comes out lower, which can only mean the first free
    fit stopped early. Problems whose statistic is still below ``-clamp`` or
    whose fits failed are flagged in ``ok``.
    """
    N = off.shape[1]
    free = minimize_batch(off, slope, theta0)
    null = constrained_minimize_batch(off, slope, R, b0, theta0=free.theta)
    bad = null.objective < free.objective - clamp / (2 * N)
    if np.any(bad):
        idx = np.flatnonzero(bad)
        retry = minimize_batch(off[idx], slope[idx], null.theta[idx])
        better = retry.objective < free.objective[idx]
        for name in ("theta", "objective", "lam", "logp", "converged", "iterations", "dual_converged"):
            arr = getattr(free, name)
            arr[idx[better]] = getattr(retry, name)[better]
    stat = 2.0 * N * (null.objective - free.objective)
    ok = free.converged & null.converged & np.isfinite(stat) & (stat >= -clamp)
    stat = np.where(stat < 0, 0.0, stat)
    return LRBatch(stat, free, null, ok)
