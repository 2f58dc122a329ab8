"""Embedded first-order QP solver: operator-splitting (ADMM) iterations on a
cached KKT factorization, warm starting, active-set polishing, and
brute-force optimality oracles for small instances.

The solver works on the single two-sided form

    min 1/2 x' P x + q' x   s.t.  l <= M x <= u,

assembled from a :class:`~dpckit.ocp.QpProblem` by stacking equalities
(l = u rows), general inequalities and finite box bounds.  Receding-horizon
updates change only (q, l, u), so one LDL'-style factorization of

    [[P + sigma I, M'], [M, -diag(1/rho)]]

is reused across all solves of a controller's lifetime; adaptive rho may
trigger at most one refactorization per workspace.
"""
from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass

import numpy as np
from scipy.linalg import lu_factor, lu_solve
from scipy.optimize import nnls

from .errors import ConfigurationError, ContractViolationError, DimensionError
from .ocp import QpProblem


@dataclass
class SolverSettings:
    rho: float = 0.1
    sigma: float = 1e-6
    alpha: float = 1.6
    eps_abs: float = 1e-6
    eps_rel: float = 1e-4
    max_iter: int = 4000
    warm_start: bool = True
    polish: bool = True
    adaptive_rho: bool = True
    rho_eq_scale: float = 1e3         # equality rows get rho * this
    adaptive_interval: int = 50       # iterations between rho checks
    adaptive_threshold: float = 5.0   # residual-ratio trigger
    polish_delta: float = 1e-7
    polish_refine_steps: int = 3
    eps_infeasible: float = 1e-8

    def __post_init__(self):
        if min(self.rho, self.sigma, self.eps_abs, self.eps_rel) <= 0:
            raise ConfigurationError("rho, sigma and tolerances must be positive")
        if not 0 < self.alpha < 2:
            raise ConfigurationError("alpha must lie in (0, 2)")
        if self.max_iter < 1:
            raise ConfigurationError("max_iter must be >= 1")


@dataclass
class Solution:
    x: np.ndarray
    y: np.ndarray
    status: str                      # solved | max_iter | primal_infeasible | dual_infeasible
    iterations: int
    setup_time_s: float
    solve_time_s: float
    primal_res: float
    dual_res: float
    polished: bool = False

    @property
    def solve_ms(self) -> float:
        return 1e3 * self.solve_time_s


class SolverWorkspace:
    """Solver state bound to one problem structure.

    Attributes of interest: ``x, z, y`` (warm-start iterates),
    ``n_factorizations`` (KKT factorization counter) and the timing stats of
    the last solve.
    """

    def __init__(self, qp: QpProblem, settings: SolverSettings):
        t0 = time.perf_counter()
        self.settings = settings
        self.qp = qp
        n = qp.n_dec
        self.P = 0.5 * (qp.P + qp.P.T)
        # cost scaling keeps termination meaningful for very large weights;
        # it scales the duals but never moves the argmin
        self.cost_scale = 1.0 / max(1.0, _inf_norm(self.P))
        self.P = self.P * self.cost_scale
        self.q = qp.q.astype(float) * self.cost_scale
        M, l, u, eq_mask = _assemble_constraints(qp)
        self.M = M
        self.l = l
        self.u = u
        self.eq_mask = eq_mask
        self.n = n
        self.m_con = M.shape[0]
        if not (np.all(np.isfinite(self.P)) and np.all(np.isfinite(self.q))
                and np.all(np.isfinite(M))):
            raise ConfigurationError("problem data must be finite")
        self.rho_bar = settings.rho
        self.n_factorizations = 0
        self._factorize()
        self.x = np.zeros(n)
        self.z = np.zeros(self.m_con)
        self.y = np.zeros(self.m_con)
        self.iterations = 0
        self.primal_res = np.inf
        self.dual_res = np.inf
        self.setup_time_s = time.perf_counter() - t0
        self.solve_time_s = 0.0
        self.residual_history: list[float] = []

    # -- factorization ----------------------------------------------------

    def _factorize(self):
        n, m = self.n, self.m_con
        rho = np.full(m, self.rho_bar)
        rho[self.eq_mask] *= self.settings.rho_eq_scale
        self.rho_vec = rho
        kkt = np.zeros((n + m, n + m))
        kkt[:n, :n] = self.P + self.settings.sigma * np.eye(n)
        if m:
            kkt[:n, n:] = self.M.T
            kkt[n:, :n] = self.M
            kkt[n:, n:] = -np.diag(1.0 / rho)
        self._lu = lu_factor(kkt, check_finite=False)
        if not np.all(np.isfinite(self._lu[0])) or np.any(np.diag(self._lu[0]) == 0.0):
            raise ConfigurationError("KKT system is structurally singular")
        self.n_factorizations += 1

    def factorization_fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(self._lu[0].tobytes())
        h.update(self._lu[1].tobytes())
        return h.hexdigest()

    # -- public API --------------------------------------------------------

    def solve(self) -> Solution:
        """Iterate to tolerance from the current (warm) iterates."""
        t0 = time.perf_counter()
        status, iters = self._admm_loop()
        x_out, y_out, polished = self._maybe_polish(status)
        self.solve_time_s = time.perf_counter() - t0
        self.iterations = iters
        return Solution(x_out, y_out / self.cost_scale, status, iters,
                        self.setup_time_s, self.solve_time_s,
                        self.primal_res, self.dual_res, polished)

    def update_and_resolve(self, new_q=None, new_l=None, new_u=None) -> Solution:
        """Change vectors only and re-solve warm; the cached factorization is
        reused (assertable through ``n_factorizations``)."""
        if new_q is not None:
            new_q = np.asarray(new_q, dtype=float).reshape(-1)
            if new_q.shape[0] != self.n:
                raise ContractViolationError("q dimension change attempted")
            self.q = new_q * self.cost_scale
        if new_l is not None or new_u is not None:
            l = self.l if new_l is None else np.asarray(new_l, float).reshape(-1)
            u = self.u if new_u is None else np.asarray(new_u, float).reshape(-1)
            if l.shape[0] != self.m_con or u.shape[0] != self.m_con:
                raise ContractViolationError("constraint dimension change attempted")
            eq = (l == u) & np.isfinite(l)
            if not np.array_equal(eq, self.eq_mask):
                raise ContractViolationError(
                    "equality/inequality row pattern change attempted")
            self.l = l.copy()
            self.u = u.copy()
        if not self.settings.warm_start:
            self.cold_start()
        return self.solve()

    def refresh_from(self, qp: QpProblem) -> Solution:
        """Pull refreshed vectors out of a QpProblem updated in place."""
        if qp.n_dec != self.n:
            raise ContractViolationError("refresh from a structurally different problem")
        _, l, u, _ = _assemble_constraints(qp, matrices=False,
                                           eq_mask=self.eq_mask)
        return self.update_and_resolve(qp.q, l, u)

    def cold_start(self):
        self.x[:] = 0.0
        self.z[:] = 0.0
        self.y[:] = 0.0

    def probe_cold_iterations(self) -> int:
        """Iteration count of a cold solve of the current problem, without
        disturbing the warm iterates or the factorization."""
        saved = (self.x.copy(), self.z.copy(), self.y.copy(),
                 self.primal_res, self.dual_res)
        self.cold_start()
        _, iters = self._admm_loop(allow_adaptive=False)
        self.x, self.z, self.y, self.primal_res, self.dual_res = saved
        return iters

    # -- ADMM core ---------------------------------------------------------

    def _admm_loop(self, allow_adaptive: bool = True) -> tuple[str, int]:
        s = self.settings
        n, m = self.n, self.m_con
        P, q, M = self.P, self.q, self.M
        sigma, alpha = s.sigma, s.alpha
        rhs = np.empty(n + m)
        x, z, y = self.x, self.z, self.y
        self.residual_history.clear()
        status = "max_iter"
        k = 0
        for k in range(1, s.max_iter + 1):
            rho = self.rho_vec
            rhs[:n] = sigma * x - q
            rhs[n:] = z - y / rho
            sol = lu_solve(self._lu, rhs, check_finite=False)
            x_tilde = sol[:n]
            z_tilde = z + (sol[n:] - y) / rho
            x_prev, y_prev = x.copy(), y.copy()
            x = alpha * x_tilde + (1.0 - alpha) * x
            z_pre = alpha * z_tilde + (1.0 - alpha) * z + y / rho
            z = np.clip(z_pre, self.l, self.u)
            y = rho * (z_pre - z)  # z_pre already carries y/rho

            Mx = M @ x
            Px = P @ x
            MTy = M.T @ y if m else np.zeros(n)
            r_prim = np.max(np.abs(Mx - z)) if m else 0.0
            r_dual = np.max(np.abs(Px + q + MTy))
            self.primal_res, self.dual_res = r_prim, r_dual
            self.residual_history.append(max(r_prim, r_dual))
            prim_scale = max(_inf_norm(Mx), _inf_norm(z)) if m else 0.0
            dual_scale = max(_inf_norm(Px), _inf_norm(MTy), _inf_norm(q))
            if (r_prim <= s.eps_abs + s.eps_rel * prim_scale
                    and r_dual <= s.eps_abs + s.eps_rel * dual_scale):
                status = "solved"
                break
            if m and self._infeasibility_certificates(x - x_prev, y - y_prev):
                status = self._infeas_status
                break
            if (allow_adaptive and s.adaptive_rho and self.n_factorizations < 2
                    and k % s.adaptive_interval == 0):
                self._maybe_update_rho(r_prim, r_dual, prim_scale, dual_scale)
        self.x, self.z, self.y = x, z, y
        return status, k

    def _maybe_update_rho(self, r_prim, r_dual, prim_scale, dual_scale):
        s = self.settings
        rp = r_prim / max(prim_scale, 1e-12)
        rd = r_dual / max(dual_scale, 1e-12)
        if rd <= 0 or rp <= 0:
            return
        ratio = np.sqrt(rp / rd)
        if ratio > s.adaptive_threshold or ratio < 1.0 / s.adaptive_threshold:
            self.rho_bar = float(np.clip(self.rho_bar * ratio, 1e-6, 1e6))
            self._factorize()   # counts toward the <=2 budget

    def _infeasibility_certificates(self, dx, dy) -> bool:
        eps = self.settings.eps_infeasible
        self._infeas_status = ""
        ndy = _inf_norm(dy)
        if ndy > eps:
            v = dy / ndy
            up = np.where(np.isfinite(self.u), self.u, 0.0)
            lo = np.where(np.isfinite(self.l), self.l, 0.0)
            out_of_cone = (np.any(~np.isfinite(self.u) & (v > eps))
                           or np.any(~np.isfinite(self.l) & (v < -eps)))
            if (not out_of_cone and _inf_norm(self.M.T @ v) <= eps
                    and up @ np.maximum(v, 0) + lo @ np.minimum(v, 0) <= -eps):
                self._infeas_status = "primal_infeasible"
                return True
        ndx = _inf_norm(dx)
        if ndx > eps:
            w = dx / ndx
            Mw = self.M @ w
            ok_dir = np.all((np.isfinite(self.u) | (Mw <= eps))
                            & (np.isfinite(self.l) | (Mw >= -eps)))
            if (_inf_norm(self.P @ w) <= eps and self.q @ w <= -eps and ok_dir
                    and np.all(np.abs(Mw[self.eq_mask]) <= eps)):
                self._infeas_status = "dual_infeasible"
                return True
        return False

    # -- polishing ---------------------------------------------------------

    def _maybe_polish(self, status: str):
        if status != "solved" or not self.settings.polish or self.m_con == 0:
            return self.x.copy(), self.y.copy(), False
        low = self.y < 0
        upp = self.y > 0
        res = self._polish_attempt(low, upp)
        if res is None:
            # retry with proximity-detected active set
            tol = 10 * self.settings.eps_abs
            labs = np.where(np.isfinite(self.l), np.abs(self.l), 0.0)
            uabs = np.where(np.isfinite(self.u), np.abs(self.u), 0.0)
            low = np.isfinite(self.l) & ((self.z - self.l) <= tol * (1 + labs))
            upp = np.isfinite(self.u) & ((self.u - self.z) <= tol * (1 + uabs))
            res = self._polish_attempt(low, upp)
        if res is None:
            return self.x.copy(), self.y.copy(), False
        return res[0], res[1], True

    def _polish_attempt(self, low, upp):
        """Exact equality solve on the detected active set; accepted only if
        it improves both KKT residuals."""
        act = low | upp
        b_act = np.where(low, self.l, self.u)[act]
        Ma = self.M[act]
        na = Ma.shape[0]
        n = self.n
        delta = self.settings.polish_delta
        K = np.zeros((n + na, n + na))
        K[:n, :n] = self.P + delta * np.eye(n)
        if na:
            K[:n, n:] = Ma.T
            K[n:, :n] = Ma
            K[n:, n:] = -delta * np.eye(na)
        rhs = np.concatenate([-self.q, b_act])
        try:
            lu = lu_factor(K, check_finite=False)
        except np.linalg.LinAlgError:
            return None
        sol = lu_solve(lu, rhs, check_finite=False)
        # iterative refinement against the unregularized KKT
        for _ in range(self.settings.polish_refine_steps):
            r = rhs - _kkt_apply(self.P, Ma, sol, n)
            sol = sol + lu_solve(lu, r, check_finite=False)
        x_pol = sol[:n]
        y_pol = np.zeros(self.m_con)
        y_pol[act] = sol[n:]
        if not np.all(np.isfinite(x_pol)):
            return None
        Mx = self.M @ x_pol
        pri = _inf_norm(np.maximum(self.l - Mx, 0) + np.maximum(Mx - self.u, 0))
        dua = _inf_norm(self.P @ x_pol + self.q + self.M.T @ y_pol)
        if max(pri, dua) <= max(self.primal_res, self.dual_res):
            self.primal_res, self.dual_res = pri, dua
            return x_pol, y_pol
        return None


def setup(qp: QpProblem, settings: SolverSettings | None = None) -> SolverWorkspace:
    """Assemble constraints and factorize the KKT system once."""
    return SolverWorkspace(qp, settings or SolverSettings())


def solve(ws: SolverWorkspace) -> Solution:
    return ws.solve()


def update_and_resolve(ws: SolverWorkspace, new_q=None, new_l=None,
                       new_u=None) -> Solution:
    return ws.update_and_resolve(new_q, new_l, new_u)


def _assemble_constraints(qp: QpProblem, matrices: bool = True,
                          eq_mask: np.ndarray | None = None):
    """Stack equalities, general inequalities and (if any bound is finite)
    the decision box into one l <= M x <= u block."""
    n = qp.n_dec
    have_box = np.any(np.isfinite(qp.x_lb)) or np.any(np.isfinite(qp.x_ub))
    blocks = []
    ls, us = [], []
    if qp.n_eq:
        blocks.append(qp.A_eq)
        ls.append(qp.b_eq)
        us.append(qp.b_eq)
    if qp.n_ineq:
        blocks.append(qp.G)
        ls.append(qp.h_lb)
        us.append(qp.h)
    if have_box:
        blocks.append(np.eye(n))
        ls.append(qp.x_lb)
        us.append(qp.x_ub)
    if blocks:
        M = np.vstack(blocks) if matrices else None
        l = np.concatenate(ls).astype(float)
        u = np.concatenate(us).astype(float)
    else:
        M = np.zeros((0, n)) if matrices else None
        l = np.zeros(0)
        u = np.zeros(0)
    mask = (l == u) & np.isfinite(l)
    if eq_mask is not None and not np.array_equal(mask, eq_mask):
        raise ContractViolationError("refresh changed the equality row pattern")
    return M, l, u, mask


def _kkt_apply(P, Ma, sol, n):
    na = Ma.shape[0]
    out = np.empty(n + na)
    out[:n] = P @ sol[:n] + (Ma.T @ sol[n:] if na else 0.0)
    if na:
        out[n:] = Ma @ sol[:n]
    return out


def _inf_norm(v) -> float:
    return float(np.max(np.abs(v))) if np.size(v) else 0.0


@dataclass
class KktReport:
    stationarity: float
    primal: float
    comp_slack: float
    tol: float

    @property
    def ok(self) -> bool:
        return max(self.stationarity, self.primal, self.comp_slack) <= self.tol


def kkt_oracle_check(qp: QpProblem, x: np.ndarray, tol: float = 1e-6,
                     act_tol: float | None = None) -> KktReport:
    """Certify a candidate optimum independently of the iterative solver.

    Primal feasibility is measured directly; stationarity by fitting
    sign-constrained multipliers on the active set (nonnegative least
    squares); complementary slackness from the recovered multipliers.
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape[0] != qp.n_dec:
        raise DimensionError("x dimension mismatch")
    act_tol = tol if act_tol is None else act_tol
    M, l, u, _ = _assemble_constraints(qp)
    grad = 0.5 * (qp.P + qp.P.T) @ x + qp.q
    if M.shape[0] == 0:
        return KktReport(_inf_norm(grad), 0.0, 0.0, tol)
    Mx = M @ x
    viol_lo = np.maximum(l - Mx, 0)
    viol_hi = np.maximum(Mx - u, 0)
    primal = max(_inf_norm(viol_lo), _inf_norm(viol_hi))
    cols = []
    slacks = []
    for i in range(M.shape[0]):
        scale = 1.0 + max(abs(l[i]) if np.isfinite(l[i]) else 0.0,
                          abs(u[i]) if np.isfinite(u[i]) else 0.0)
        if l[i] == u[i]:
            cols.append(M[i])      # equality: free multiplier, add both signs
            slacks.append(0.0)
            cols.append(-M[i])
            slacks.append(0.0)
            continue
        if np.isfinite(u[i]) and u[i] - Mx[i] <= act_tol * scale:
            cols.append(M[i])
            slacks.append(abs(u[i] - Mx[i]))
        if np.isfinite(l[i]) and Mx[i] - l[i] <= act_tol * scale:
            cols.append(-M[i])
            slacks.append(abs(Mx[i] - l[i]))
    if cols:
        N = np.array(cols).T
        lam, _ = nnls(N, -grad)
        stationarity = _inf_norm(grad + N @ lam)
        comp = float(np.max(lam * np.array(slacks))) if lam.size else 0.0
    else:
        stationarity = _inf_norm(grad)
        comp = 0.0
    return KktReport(stationarity, primal, comp, tol)


def brute_force_solve(qp: QpProblem, combo_limit: int = 200_000) -> np.ndarray:
    """Global optimum by enumerating active sets; exact KKT solve per
    candidate.  Only viable for small instances (n and constraint count of a
    few); used as the independent oracle for the iterative solver."""
    from itertools import product

    M, l, u, eq_mask = _assemble_constraints(qp)
    n = qp.n_dec
    P = 0.5 * (qp.P + qp.P.T)
    options = []
    ineq_idx = [i for i in range(M.shape[0]) if not eq_mask[i]]
    for i in ineq_idx:
        opts = [None]
        if np.isfinite(l[i]):
            opts.append((i, "lb"))
        if np.isfinite(u[i]):
            opts.append((i, "ub"))
        options.append(opts)
    total = 1
    for o in options:
        total *= len(o)
    if total > combo_limit:
        raise ConfigurationError(f"too many active-set combinations ({total})")
    eq_rows = M[eq_mask]
    eq_rhs = l[eq_mask]
    best_x, best_obj = None, np.inf
    feas_tol = 1e-8
    for combo in product(*options):
        rows = [eq_rows] if eq_rows.size else []
        rhs = [eq_rhs] if eq_rhs.size else []
        sign_rows = []
        for c in combo:
            if c is None:
                continue
            i, side = c
            if side == "ub":
                sign_rows.append((M[i], u[i]))
            else:
                sign_rows.append((-M[i], -l[i]))
        na = len(sign_rows)
        if sign_rows:
            rows.append(np.array([r for r, _ in sign_rows]))
            rhs.append(np.array([b for _, b in sign_rows]))
        A = np.vstack(rows) if rows else np.zeros((0, n))
        b = np.concatenate(rhs) if rhs else np.zeros(0)
        k = A.shape[0]
        K = np.zeros((n + k, n + k))
        K[:n, :n] = P
        if k:
            K[:n, n:] = A.T
            K[n:, :n] = A
        try:
            sol = np.linalg.solve(K, np.concatenate([-qp.q, b]))
        except np.linalg.LinAlgError:
            continue
        x = sol[:n]
        lam = sol[n + (eq_rows.shape[0] if eq_rows.size else 0):]
        if na and np.any(lam < -1e-9 * (1 + _inf_norm(lam))):
            continue
        Mx = M @ x
        scale = 1 + _inf_norm(Mx)
        if np.any(Mx - u > feas_tol * scale) or np.any(l - Mx > feas_tol * scale):
            continue
        obj = 0.5 * x @ P @ x + qp.q @ x
        if obj < best_obj - 1e-15:
            best_obj, best_x = obj, x
    if best_x is None:
        raise ConfigurationError("active-set enumeration found no feasible candidate")
    return best_x
