"""Optimal control problem assembly: condensed QP and conic forms for the
DeePC and predictor-based controllers, cheap per-step refresh, and the
closed-form unconstrained solutions.

All quadratic problems use the solver convention

    min 1/2 x' P x + q' x   s.t.  A_eq x = b_eq,  h_lb <= G x <= h,
                                  x_lb <= x <= x_ub.

Inequalities are kept two-sided internally; the one-sided +/- stacking only
appears in the conic export.  Refreshing a problem with new past data
changes vectors (q, b_eq, h offsets) but never matrices, which is the
contract that lets the solver keep its cached KKT factorization.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import ConfigurationError, ContractViolationError, DimensionError
from .predictors import DeePCData

_PSD_TOL = 1e-9


@dataclass
class WeightSpec:
    """Per-step weights, channel normalizations and DeePC regularizers.

    Costs act on normalized signals: the effective per-step output weight is
    diag(1/q_norm) @ q_bar @ diag(1/q_norm), and likewise for inputs.
    """

    q_bar: np.ndarray
    r_bar: np.ndarray
    q_norm: np.ndarray
    r_norm: np.ndarray
    lambda_g2: float = 30.0
    lambda_sigma: float = 1e5

    def __post_init__(self):
        self.q_bar = np.atleast_2d(np.asarray(self.q_bar, dtype=float))
        self.r_bar = np.atleast_2d(np.asarray(self.r_bar, dtype=float))
        self.q_norm = np.asarray(self.q_norm, dtype=float).reshape(-1)
        self.r_norm = np.asarray(self.r_norm, dtype=float).reshape(-1)
        if np.min(np.linalg.eigvalsh(0.5 * (self.q_bar + self.q_bar.T))) < -_PSD_TOL:
            raise ConfigurationError("q_bar must be positive semidefinite")
        if np.min(np.linalg.eigvalsh(0.5 * (self.r_bar + self.r_bar.T))) <= 0:
            raise ConfigurationError("r_bar must be positive definite")
        if np.any(self.q_norm <= 0) or np.any(self.r_norm <= 0):
            raise ConfigurationError("normalization scales must be positive")
        if self.lambda_g2 < 0:
            raise ConfigurationError("lambda_g2 must be >= 0")
        if self.lambda_sigma <= 0:
            raise ConfigurationError("lambda_sigma must be positive")

    def q_step(self) -> np.ndarray:
        d = 1.0 / self.q_norm
        return d[:, None] * self.q_bar * d[None, :]

    def r_step(self) -> np.ndarray:
        d = 1.0 / self.r_norm
        return d[:, None] * self.r_bar * d[None, :]

    def q_full(self, tau_f: int) -> np.ndarray:
        return np.kron(np.eye(tau_f), self.q_step())

    def r_full(self, tau_f: int) -> np.ndarray:
        return np.kron(np.eye(tau_f), self.r_step())


def arx_default_weights(p: int = 3, m: int = 3) -> WeightSpec:
    """Unit weights with per-channel normalization, the shipped tuning for
    the predictor-based controllers."""
    q_norm = np.array([0.002, 0.04, 0.02])[:p] if p == 3 else np.ones(p)
    return WeightSpec(np.eye(p), np.eye(m), q_norm,
                      0.0025 * np.ones(m), lambda_g2=0.0, lambda_sigma=1e5)


def deepc_default_weights(p: int = 3, m: int = 3) -> WeightSpec:
    """Shipped DeePC tuning: large absolute output weights, no separate
    normalization stage."""
    q = np.diag([1e8, 1e7, 1e7][:p]) if p == 3 else 1e7 * np.eye(p)
    r = np.diag([1e-2, 1.0, 1e-2][:m]) if m == 3 else np.eye(m)
    return WeightSpec(q, r, np.ones(p), np.ones(m),
                      lambda_g2=30.0, lambda_sigma=1e5)


@dataclass
class OcpBounds:
    """Hard input box (default +/-0.1 pu) and optional output bounds.
    Outputs are unbounded by default because exogenous events could
    otherwise make the problem infeasible."""

    u_lb: np.ndarray
    u_ub: np.ndarray
    y_lb: np.ndarray | None = None
    y_ub: np.ndarray | None = None

    def __post_init__(self):
        self.u_lb = np.asarray(self.u_lb, dtype=float).reshape(-1)
        self.u_ub = np.asarray(self.u_ub, dtype=float).reshape(-1)
        if np.any(self.u_lb > self.u_ub):
            raise ConfigurationError("u_lb must be <= u_ub")
        if self.y_lb is not None:
            self.y_lb = np.asarray(self.y_lb, dtype=float).reshape(-1)
        if self.y_ub is not None:
            self.y_ub = np.asarray(self.y_ub, dtype=float).reshape(-1)
        if (self.y_lb is not None and self.y_ub is not None
                and np.any(self.y_lb > self.y_ub)):
            raise ConfigurationError("y_lb must be <= y_ub")

    @property
    def y_bounded(self) -> bool:
        def finite(v):
            return v is not None and np.any(np.isfinite(v))
        return finite(self.y_lb) or finite(self.y_ub)


def default_bounds(m: int = 3, limit: float = 0.1) -> OcpBounds:
    return OcpBounds(-limit * np.ones(m), limit * np.ones(m))


@dataclass
class QpProblem:
    """Assembled QP with extractor metadata.

    ``kind`` is one of 'tpc', 'deepc', 'deepc_soft'; ``meta`` keeps the
    matrices needed for refresh and input extraction.
    """

    P: np.ndarray
    q: np.ndarray
    A_eq: np.ndarray
    b_eq: np.ndarray
    G: np.ndarray
    h_lb: np.ndarray
    h: np.ndarray
    x_lb: np.ndarray
    x_ub: np.ndarray
    kind: str
    meta: dict = field(default_factory=dict)

    @property
    def n_dec(self) -> int:
        return self.P.shape[0]

    @property
    def n_eq(self) -> int:
        return self.A_eq.shape[0]

    @property
    def n_ineq(self) -> int:
        return self.G.shape[0]

    def extract_u(self, x: np.ndarray) -> np.ndarray:
        """Planned input sequence from a decision vector."""
        if self.kind == "tpc":
            return x.copy()
        if self.kind in ("deepc", "deepc_soft"):
            return self.meta["U_f"] @ x[:self.meta["n_col"]]
        raise ConfigurationError(f"no input extractor for kind {self.kind!r}")

    def extract_g(self, x: np.ndarray) -> np.ndarray:
        if self.kind not in ("deepc", "deepc_soft"):
            raise ConfigurationError("g only exists for DeePC problems")
        return x[:self.meta["n_col"]].copy()

    def extract_sigma(self, x: np.ndarray) -> np.ndarray:
        if self.kind != "deepc":
            raise ConfigurationError("sigma only exists for the constrained DeePC problem")
        return x[self.meta["n_col"]:].copy()


def _assert_psd(P: np.ndarray, what: str):
    w = np.linalg.eigvalsh(0.5 * (P + P.T))
    scale = max(abs(w[0]), abs(w[-1]), 1.0)
    if w[0] < -_PSD_TOL * scale:
        raise ConfigurationError(f"{what} cost matrix is not PSD (min eig {w[0]:.3e})")


def build_tpc_qp(pred, w: WeightSpec, b: OcpBounds, z_p: np.ndarray) -> QpProblem:
    """Condensed predictor-based OCP in the planned inputs.

    P = 2 (H_u' Q H_u + R), q = 2 H_u' Q H_p z_p; the q-gain matrix is cached
    so refreshes are one matrix-vector product.  Output bounds, when finite,
    become two-sided rows on H_u with offsets -H_p z_p.
    """
    H_p, H_u = pred.H_p, pred.H_u
    m, p, tau_f = pred.m, pred.p, pred.config.tau_f
    z_p = np.asarray(z_p, dtype=float).reshape(-1)
    if z_p.shape[0] != H_p.shape[1]:
        raise DimensionError(f"z_p has {z_p.shape[0]} entries, expected {H_p.shape[1]}")
    Q = w.q_full(tau_f)
    R = w.r_full(tau_f)
    HQ = H_u.T @ Q
    P = HQ @ H_u + R
    P = P + P.T  # symmetrized 2x
    _assert_psd(P, "TPC")
    q_gain = 2.0 * (HQ @ H_p)
    q = q_gain @ z_p
    x_lb = np.tile(b.u_lb, tau_f)
    x_ub = np.tile(b.u_ub, tau_f)
    if b.y_bounded:
        G = H_u.copy()
        y_lb = np.tile(b.y_lb if b.y_lb is not None else -np.inf * np.ones(p), tau_f)
        y_ub = np.tile(b.y_ub if b.y_ub is not None else np.inf * np.ones(p), tau_f)
        off = H_p @ z_p
        h_lb = y_lb - off
        h = y_ub - off
    else:
        G = np.zeros((0, m * tau_f))
        h_lb = np.zeros(0)
        h = np.zeros(0)
    meta = {"q_gain": q_gain, "H_p": H_p, "m": m, "tau_f": tau_f,
            "y_lb": b.y_lb, "y_ub": b.y_ub, "y_bounded": b.y_bounded}
    return QpProblem(P, q, np.zeros((0, m * tau_f)), np.zeros(0),
                     G, h_lb, h, x_lb, x_ub, "tpc", meta)


def build_deepc_qp(data: DeePCData, w: WeightSpec, b: OcpBounds,
                   u_p: np.ndarray, y_p: np.ndarray) -> QpProblem:
    """Condensed DeePC OCP in x = [g; sigma].

    The cost is block diagonal (data-weighted g block plus lambda_sigma on
    the slack), q = 0; matching the past enters purely through the equality
    right-hand side, so refreshes only touch b_eq.
    """
    cfg = data.config
    m, p, tau_p, tau_f = data.m, data.p, cfg.tau_p, cfg.tau_f
    n_col = data.n_col
    u_p = np.asarray(u_p, dtype=float).reshape(-1)
    y_p = np.asarray(y_p, dtype=float).reshape(-1)
    if u_p.shape[0] != m * tau_p or y_p.shape[0] != p * tau_p:
        raise DimensionError("u_p/y_p length mismatch with tau_p")
    Q = w.q_full(tau_f)
    R = w.r_full(tau_f)
    Uf, Yf = data.U_f.values, data.Y_f.values
    Pg = Yf.T @ Q @ Yf + Uf.T @ R @ Uf + w.lambda_g2 * np.eye(n_col)
    n_dec = n_col + p * tau_p
    P = np.zeros((n_dec, n_dec))
    P[:n_col, :n_col] = Pg + Pg.T
    P[n_col:, n_col:] = 2.0 * w.lambda_sigma * np.eye(p * tau_p)
    _assert_psd(P, "DeePC")
    q = np.zeros(n_dec)
    A_eq = np.zeros((m * tau_p + p * tau_p, n_dec))
    A_eq[:m * tau_p, :n_col] = data.U_p.values
    A_eq[m * tau_p:, :n_col] = data.Y_p.values
    A_eq[m * tau_p:, n_col:] = -np.eye(p * tau_p)
    b_eq = np.concatenate([u_p, y_p])
    rows = [np.hstack([Uf, np.zeros((m * tau_f, p * tau_p))])]
    h_lb = [np.tile(b.u_lb, tau_f)]
    h_ub = [np.tile(b.u_ub, tau_f)]
    if b.y_bounded:
        rows.append(np.hstack([Yf, np.zeros((p * tau_f, p * tau_p))]))
        h_lb.append(np.tile(b.y_lb if b.y_lb is not None else -np.inf * np.ones(p), tau_f))
        h_ub.append(np.tile(b.y_ub if b.y_ub is not None else np.inf * np.ones(p), tau_f))
    G = np.vstack(rows)
    inf = np.inf * np.ones(n_dec)
    meta = {"U_f": Uf, "n_col": n_col, "m": m, "p": p, "tau_p": tau_p,
            "tau_f": tau_f, "y_bounded": b.y_bounded}
    return QpProblem(P, q, A_eq, b_eq, G, np.concatenate(h_lb),
                     np.concatenate(h_ub), -inf, inf, "deepc", meta)


def build_deepc_soft_qp(data: DeePCData, w: WeightSpec, u_p: np.ndarray,
                        y_p: np.ndarray) -> QpProblem:
    """Modified DeePC: past-matching equalities replaced by the
    lambda_sigma soft penalty, no bounds, decision x = g.  This is the
    problem whose optimum the closed form reproduces."""
    cfg = data.config
    m, p, tau_p, tau_f = data.m, data.p, cfg.tau_p, cfg.tau_f
    n_col = data.n_col
    u_p = np.asarray(u_p, dtype=float).reshape(-1)
    y_p = np.asarray(y_p, dtype=float).reshape(-1)
    Q = w.q_full(tau_f)
    R = w.r_full(tau_f)
    Uf, Yf = data.U_f.values, data.Y_f.values
    Zp = np.vstack([data.U_p.values, data.Y_p.values])
    zp = np.concatenate([u_p, y_p])
    Pg = (Yf.T @ Q @ Yf + Uf.T @ R @ Uf + w.lambda_g2 * np.eye(n_col)
          + w.lambda_sigma * (Zp.T @ Zp))
    P = Pg + Pg.T
    _assert_psd(P, "modified DeePC")
    q = -2.0 * w.lambda_sigma * (Zp.T @ zp)
    inf = np.inf * np.ones(n_col)
    meta = {"U_f": Uf, "n_col": n_col, "Zp": Zp, "lambda_sigma": w.lambda_sigma}
    return QpProblem(P, q, np.zeros((0, n_col)), np.zeros(0),
                     np.zeros((0, n_col)), np.zeros(0), np.zeros(0),
                     -inf, inf, "deepc_soft", meta)


def refresh_qp(qp: QpProblem, z_p: np.ndarray | None = None,
               u_p: np.ndarray | None = None,
               y_p: np.ndarray | None = None) -> QpProblem:
    """Update the problem in place for new past data.

    Only vectors change (q for predictor problems, b_eq for DeePC, bound
    offsets when outputs are bounded); any attempt to change structure is a
    contract violation.
    """
    if qp.kind == "tpc":
        if z_p is None:
            raise ContractViolationError("TPC refresh needs z_p")
        z_p = np.asarray(z_p, dtype=float).reshape(-1)
        if z_p.shape[0] != qp.meta["q_gain"].shape[1]:
            raise ContractViolationError("z_p dimension change attempted in refresh")
        qp.q = qp.meta["q_gain"] @ z_p
        if qp.meta["y_bounded"]:
            off = qp.meta["H_p"] @ z_p
            tau_f = qp.meta["tau_f"]
            p = off.shape[0] // tau_f
            y_lb = np.tile(qp.meta["y_lb"] if qp.meta["y_lb"] is not None
                           else -np.inf * np.ones(p), tau_f)
            y_ub = np.tile(qp.meta["y_ub"] if qp.meta["y_ub"] is not None
                           else np.inf * np.ones(p), tau_f)
            qp.h_lb = y_lb - off
            qp.h = y_ub - off
        return qp
    if qp.kind == "deepc":
        if u_p is None or y_p is None:
            raise ContractViolationError("DeePC refresh needs u_p and y_p")
        u_p = np.asarray(u_p, dtype=float).reshape(-1)
        y_p = np.asarray(y_p, dtype=float).reshape(-1)
        if u_p.shape[0] + y_p.shape[0] != qp.b_eq.shape[0]:
            raise ContractViolationError("past dimension change attempted in refresh")
        qp.b_eq = np.concatenate([u_p, y_p])
        return qp
    if qp.kind == "deepc_soft":
        if u_p is None or y_p is None:
            raise ContractViolationError("modified-DeePC refresh needs u_p and y_p")
        zp = np.concatenate([np.asarray(u_p, float).reshape(-1),
                             np.asarray(y_p, float).reshape(-1)])
        if zp.shape[0] != qp.meta["Zp"].shape[0]:
            raise ContractViolationError("past dimension change attempted in refresh")
        qp.q = -2.0 * qp.meta["lambda_sigma"] * (qp.meta["Zp"].T @ zp)
        return qp
    raise ContractViolationError(f"cannot refresh problem of kind {qp.kind!r}")


def tpc_gain(pred, w: WeightSpec) -> np.ndarray:
    """Precomputed unconstrained feedback gain: u* = K z_p."""
    Q = w.q_full(pred.config.tau_f)
    R = w.r_full(pred.config.tau_f)
    HQ = pred.H_u.T @ Q
    lhs = HQ @ pred.H_u + R
    c, low = cho_factor(0.5 * (lhs + lhs.T))
    return -cho_solve((c, low), HQ @ pred.H_p)


def closed_form_tpc(pred, w: WeightSpec, z_p: np.ndarray) -> np.ndarray:
    """Unconstrained predictor-based optimum
    u* = -(H_u' Q H_u + R)^-1 H_u' Q H_p z_p."""
    z_p = np.asarray(z_p, dtype=float).reshape(-1)
    return tpc_gain(pred, w) @ z_p


def deepc_gain(data: DeePCData, w: WeightSpec) -> np.ndarray:
    """Precomputed modified-DeePC gain: u* = K [u_p; y_p]."""
    cfg = data.config
    Q = w.q_full(cfg.tau_f)
    R = w.r_full(cfg.tau_f)
    Uf, Yf = data.U_f.values, data.Y_f.values
    Zp = np.vstack([data.U_p.values, data.Y_p.values])
    bracket = (Yf.T @ Q @ Yf + Uf.T @ R @ Uf
               + w.lambda_g2 * np.eye(data.n_col)
               + w.lambda_sigma * (Zp.T @ Zp))
    bracket = 0.5 * (bracket + bracket.T)
    try:
        c, low = cho_factor(bracket)
        core = cho_solve((c, low), Zp.T)
    except np.linalg.LinAlgError:
        core = np.linalg.pinv(bracket) @ Zp.T
    return w.lambda_sigma * (Uf @ core)


def closed_form_deepc(data: DeePCData, w: WeightSpec, u_p: np.ndarray,
                      y_p: np.ndarray) -> np.ndarray:
    """Optimal input of the modified (soft-equality, unconstrained) DeePC."""
    zp = np.concatenate([np.asarray(u_p, float).reshape(-1),
                         np.asarray(y_p, float).reshape(-1)])
    return deepc_gain(data, w) @ zp


@dataclass
class ConeProblem:
    """A x + s = b with s in a product of zero (equality) and nonnegative
    (inequality) cones; zero-cone rows come first."""

    P: np.ndarray
    q: np.ndarray
    A_cone: np.ndarray
    b_cone: np.ndarray
    cone_tags: list[str]

    @property
    def n_zero(self) -> int:
        return sum(1 for t in self.cone_tags if t == "zero")


def to_conic(qp: QpProblem) -> ConeProblem:
    """One-sided conic export: equalities become zero-cone rows; each finite
    side of a two-sided inequality becomes a nonnegative-cone row (+row for
    upper, -row for lower); finite box bounds fold into identity rows."""
    n = qp.n_dec
    blocks = [qp.A_eq]
    rhs = [qp.b_eq]
    tags = ["zero"] * qp.n_eq
    eye = np.eye(n)
    plus_rows, plus_rhs, minus_rows, minus_rhs = [], [], [], []
    ub_fin = np.isfinite(qp.x_ub)
    lb_fin = np.isfinite(qp.x_lb)
    if np.any(ub_fin):
        plus_rows.append(eye[ub_fin])
        plus_rhs.append(qp.x_ub[ub_fin])
    if qp.n_ineq:
        fin = np.isfinite(qp.h)
        if np.any(fin):
            plus_rows.append(qp.G[fin])
            plus_rhs.append(qp.h[fin])
    if np.any(lb_fin):
        minus_rows.append(-eye[lb_fin])
        minus_rhs.append(-qp.x_lb[lb_fin])
    if qp.n_ineq:
        fin = np.isfinite(qp.h_lb)
        if np.any(fin):
            minus_rows.append(-qp.G[fin])
            minus_rhs.append(-qp.h_lb[fin])
    for rws, rh in ((plus_rows, plus_rhs), (minus_rows, minus_rhs)):
        for r, v in zip(rws, rh):
            blocks.append(r)
            rhs.append(v)
            tags.extend(["nonneg"] * r.shape[0])
    A = np.vstack(blocks) if blocks else np.zeros((0, n))
    b = np.concatenate(rhs) if rhs else np.zeros(0)
    return ConeProblem(qp.P, qp.q.copy(), A, b, tags)
