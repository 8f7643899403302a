"""Constrained least-squares kernels.

``nnls_active_set`` is a Lawson-Hanson active-set solver, used where the
problems are small and well posed. ``nnls_admm`` splits ``x = z`` with
``z >= 0`` and is the workhorse for the collinear bilinear dictionaries;
``nnls_admm_batch`` runs the same iteration over a stack of independent
problems. ``fcls_solve`` adds the sum-to-one constraint by augmentation.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

__all__ = [
    "NnlsConvergenceError",
    "NnlsProblem",
    "AdmmSettings",
    "AdmmSolution",
    "nnls_active_set",
    "nnls_admm",
    "nnls_admm_batch",
    "fcls_solve",
    "nnls_objective",
]

_EPS = np.finfo(np.float64).eps
RANK_REGULARIZATION = 1e-12


class NnlsConvergenceError(RuntimeError):
    """The active-set iteration hit its cap; ``residual`` holds the last residual norm."""

    def __init__(self, message, residual):
        super().__init__(f"{message} (residual norm {residual:.6g})")
        self.residual = residual


@dataclass(frozen=True, eq=False)
class NnlsProblem:
    """``min 0.5 * ||target - design @ s||^2`` subject to ``s >= 0``."""

    design: np.ndarray
    target: np.ndarray

    def __post_init__(self):
        t = np.atleast_2d(np.asarray(self.design, dtype=np.float64))
        l = np.asarray(self.target, dtype=np.float64).reshape(-1)
        if t.shape[0] < 1 or t.shape[1] < 1:
            raise ValueError("design must have at least one row and one column")
        if l.size != t.shape[0]:
            raise ValueError(f"target has {l.size} rows, design has {t.shape[0]}")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(l))):
            raise ValueError("design and target must be finite")
        object.__setattr__(self, "design", t)
        object.__setattr__(self, "target", l)


@dataclass(frozen=True)
class AdmmSettings:
    """ADMM controls.

    Columns are scaled to unit norm before iterating. ``rho=None`` starts
    the penalty at the geometric mean of the extreme eigenvalues of the
    scaled Gram matrix; with ``adaptive`` the penalty is then rebalanced
    every ``adapt_every`` iterations whenever the primal and dual residuals
    differ by more than ``adapt_ratio``.
    """

    rho: float | None = None
    abs_tol: float = 1e-8
    rel_tol: float = 1e-6
    max_iter: int = 5000
    polish: bool = True
    adaptive: bool = True
    adapt_every: int = 10
    adapt_ratio: float = 10.0

    def __post_init__(self):
        if self.rho is not None and not self.rho > 0:
            raise ValueError("rho must be positive")
        if not (self.abs_tol > 0 and self.rel_tol > 0):
            raise ValueError("tolerances must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if self.adapt_every < 1 or not self.adapt_ratio > 1:
            raise ValueError("adapt_every must be >= 1 and adapt_ratio > 1")


class AdmmSolution(NamedTuple):
    x: np.ndarray
    converged: np.ndarray | bool
    iterations: np.ndarray | int


def nnls_objective(design, target, s) -> float:
    r = np.asarray(target) - np.asarray(design) @ np.asarray(s)
    return 0.5 * float(r @ r)


def _as_problem(design, target) -> NnlsProblem:
    if isinstance(design, NnlsProblem):
        return design
    return NnlsProblem(design, target)


def nnls_active_set(design, target=None, *, tol=None, max_iter=None) -> np.ndarray:
    """Lawson-Hanson nonnegative least squares.

    Accepts either an :class:`NnlsProblem` or ``(design, target)``. The
    entering variable is the one with the largest negative gradient; ties go
    to the lowest column index. Raises :class:`NnlsConvergenceError` when
    the iteration cap is reached.
    """
    prob = _as_problem(design, target)
    T, l = prob.design, prob.target
    m, n = T.shape
    if max_iter is None:
        max_iter = 3 * n + 30
    if tol is None:
        col_scale = float(np.max(np.sum(np.abs(T), axis=0)))
        tol = 10 * _EPS * max(m, n) * max(1.0, col_scale) * max(1.0, float(np.max(np.abs(l))))

    x = np.zeros(n)
    passive = np.zeros(n, dtype=bool)
    # columns that failed to enter because their LS value came out <= 0
    blocked = np.zeros(n, dtype=bool)
    w = T.T @ l

    def ls_on(mask):
        s = np.zeros(n)
        idx = np.flatnonzero(mask)
        s[idx] = np.linalg.lstsq(T[:, idx], l, rcond=None)[0]
        return s

    iterations = 0
    while True:
        candidates = ~passive & ~blocked
        if not candidates.any() or np.max(np.where(candidates, w, -np.inf)) <= tol:
            break
        iterations += 1
        if iterations > max_iter:
            raise NnlsConvergenceError("active-set NNLS did not converge", float(np.linalg.norm(l - T @ x)))
        j = int(np.argmax(np.where(candidates, w, -np.inf)))
        passive[j] = True
        s = ls_on(passive)
        if s[j] <= 0:
            passive[j] = False
            blocked[j] = True
            continue
        blocked[:] = False

        inner = 0
        while np.any(s[passive] <= 0):
            inner += 1
            if inner > 3 * n:
                raise NnlsConvergenceError("active-set inner loop stalled", float(np.linalg.norm(l - T @ x)))
            bad = np.flatnonzero(passive & (s <= 0))
            ratios = x[bad] / (x[bad] - s[bad])
            k = int(np.argmin(ratios))
            x = x + ratios[k] * (s - x)
            leaving = passive & (x <= 0)
            leaving[bad[k]] = True
            passive &= ~leaving
            x[~passive] = 0.0
            s = ls_on(passive)
        x = s
        x[~passive] = 0.0
        w = T.T @ (l - T @ x)

    x = np.where(passive, np.maximum(x, 0.0), 0.0)
    return x


def _kkt_ok(T, l, x, tol) -> bool:
    g = T.T @ (T @ x - l)
    zero = x <= 0
    return bool(np.all(g[zero] >= -tol) and np.all(np.abs(g[~zero]) <= tol))


def _kkt_tol(T, l) -> float:
    return 1e-9 * max(1.0, float(np.linalg.norm(T)) * float(np.linalg.norm(l)))


def _polish(T, l, z):
    """Equality-constrained LS on the support of ``z``; None if it never becomes feasible.

    Coefficients that come out negative are dropped from the support and the
    solve is repeated, so round-off below zero on a true zero does not
    discard an otherwise exact fit.
    """
    peak = float(np.max(z)) if z.size else 0.0
    support = np.flatnonzero(z > 1e-9 * peak)
    for _ in range(z.size):
        if support.size == 0:
            return np.zeros_like(z)
        xs = np.linalg.lstsq(T[:, support], l, rcond=None)[0]
        if np.all(xs >= 0):
            out = np.zeros_like(z)
            out[support] = xs
            return out
        support = support[xs > 0]
    return None


def _initial_rho(gram: np.ndarray) -> np.ndarray:
    ev = np.linalg.eigvalsh(gram)
    top = ev[..., -1]
    low = np.maximum(ev[..., 0], 1e-12 * np.maximum(top, 1e-300))
    return np.sqrt(np.maximum(low * top, 1e-300))


def nnls_admm_batch(designs, targets, settings: AdmmSettings | None = None) -> AdmmSolution:
    """Solve a stack of independent NNLS problems with ADMM.

    ``designs`` is ``(P, m, n)`` or a shared ``(m, n)`` matrix, ``targets``
    is ``(P, m)``. Each problem follows its own trajectory (own penalty,
    own stopping test), so a problem's result does not depend on what else
    is in the batch. Returns ``AdmmSolution(x (P, n), converged (P,), iterations (P,))``.
    """
    settings = settings or AdmmSettings()
    A = np.asarray(designs, dtype=np.float64)
    L = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    shared = A.ndim == 2
    P = L.shape[0]
    n = A.shape[-1]
    if not shared and A.shape[0] != P:
        raise ValueError(f"{A.shape[0]} designs for {P} targets")

    # unit-norm columns; x = z_scaled / scale keeps the orthant unchanged
    scale = np.linalg.norm(A, axis=-2)
    scale = np.where(scale > 0, scale, 1.0)
    As = A / scale[..., None, :]
    Ast = np.swapaxes(As, -1, -2)
    gram = Ast @ As
    if shared:
        gram = np.broadcast_to(gram, (P, n, n))
        scale = np.broadcast_to(scale, (P, n))
        atl = (Ast[None] @ L[:, :, None])[:, :, 0]
    else:
        atl = (Ast @ L[:, :, None])[:, :, 0]
    eye = np.eye(n)
    if settings.rho is None:
        rho = np.broadcast_to(_initial_rho(gram[:1] if shared else gram), (P,)).copy()
    else:
        rho = np.full(P, float(settings.rho))

    def factor(g, r):
        return np.linalg.inv(g + (r + RANK_REGULARIZATION)[:, None, None] * eye)

    z = np.zeros((P, n))
    converged = np.zeros(P, dtype=bool)
    iterations = np.full(P, settings.max_iter, dtype=np.int64)
    sqrt_n = np.sqrt(n)

    # state of the still-running problems, compacted whenever some finish;
    # every product is evaluated per stacked item
    active = np.arange(P)
    gram_a = np.array(gram)
    inv_a = factor(gram_a, rho)
    rho_a = rho
    za = np.zeros((P, n))
    ua = np.zeros((P, n))
    atl_a = atl

    for it in range(1, settings.max_iter + 1):
        q = atl_a + rho_a[:, None] * (za - ua)
        xa = (inv_a @ q[:, :, None])[:, :, 0]
        z_old = za
        za = np.maximum(xa + ua, 0.0)
        ua = ua + xa - za

        r_norm = np.linalg.norm(xa - za, axis=1)
        s_norm = rho_a * np.linalg.norm(za - z_old, axis=1)
        eps_pri = sqrt_n * settings.abs_tol + settings.rel_tol * np.maximum(
            np.linalg.norm(xa, axis=1), np.linalg.norm(za, axis=1)
        )
        eps_dual = sqrt_n * settings.abs_tol + settings.rel_tol * rho_a * np.linalg.norm(ua, axis=1)
        done = (r_norm <= eps_pri) & (s_norm <= eps_dual)
        if done.any():
            finished = active[done]
            z[finished] = za[done]
            converged[finished] = True
            iterations[finished] = it
            keep = ~done
            active, za, ua, atl_a = active[keep], za[keep], ua[keep], atl_a[keep]
            gram_a, inv_a, rho_a = gram_a[keep], inv_a[keep], rho_a[keep]
            r_norm, s_norm = r_norm[keep], s_norm[keep]
            if active.size == 0:
                break
        if settings.adaptive and it % settings.adapt_every == 0:
            up = r_norm > settings.adapt_ratio * s_norm
            down = s_norm > settings.adapt_ratio * r_norm
            change = up | down
            if change.any():
                factor_k = np.where(up, 2.0, 0.5)[change]
                rho_a = rho_a.copy()
                rho_a[change] *= factor_k
                # scaled dual u = y / rho follows the penalty
                ua[change] /= factor_k[:, None]
                inv_a[change] = factor(gram_a[change], rho_a[change])
    z[active] = za
    z = z / scale

    out = z.copy()
    for p in range(P):
        T = A if shared else A[p]
        l = L[p]
        best = out[p]
        best_obj = nnls_objective(T, l, best)
        if settings.polish:
            cand = _polish(T, l, best)
            if cand is not None:
                obj = nnls_objective(T, l, cand)
                if obj <= best_obj:
                    best, best_obj = cand, obj
                    if not converged[p]:
                        converged[p] = _kkt_ok(T, l, best, _kkt_tol(T, l))
        zero_obj = 0.5 * float(l @ l)
        if best_obj > zero_obj:
            best = np.zeros(n)
        out[p] = best
    return AdmmSolution(out, converged, iterations)


def nnls_admm(design, target=None, settings: AdmmSettings | None = None) -> AdmmSolution:
    """Single-problem ADMM NNLS; returns ``AdmmSolution(x, converged, iterations)``.

    The x-update solves ``(T'T + rho I) x = T'l + rho (z - u)`` on the
    column-scaled design, refactoring only when the penalty changes; z is
    the projection of ``x + u`` onto the nonnegative orthant. On exit the support of z is refined by an
    equality-constrained LS solve, kept only if it is feasible and no worse.
    """
    prob = _as_problem(design, target)
    sol = nnls_admm_batch(prob.design, prob.target[None, :], settings)
    return AdmmSolution(sol.x[0], bool(sol.converged[0]), int(sol.iterations[0]))


def fcls_solve(M, y, delta: float = 1e3) -> np.ndarray:
    """Fully constrained least squares: ``min ||y - M a||`` with ``a >= 0``, ``sum(a) = 1``.

    The sum-to-one row is appended with weight ``delta`` and the augmented
    problem is solved by active-set NNLS, then renormalized exactly.
    """
    M = np.atleast_2d(np.asarray(M, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if not np.any(M):
        raise ValueError("endmember matrix is all zeros")
    K = M.shape[1]
    design = np.vstack([delta * np.ones((1, K)), M])
    target = np.concatenate([[delta], y])
    a = nnls_active_set(design, target)
    total = a.sum()
    if total <= 0:
        return np.full(K, 1.0 / K)
    return a / total
