"""Offline model construction for the three data-driven controllers.

Three predictor families are built from one excitation trajectory:

* DeePC blocks: the four scaled Hankel matrices (U_p, Y_p, U_f, Y_f) whose
  column space encodes all system trajectories of window length
  tau_p + tau_f.
* Transient predictor: increasing-length ARX models for every step of the
  horizon, extracted jointly from one LQ decomposition of the interleaved
  Hankel matrix Z.  The resulting one-shot predictor is
  y = H_p z_p + H_u u with H_u block strictly lower triangular, which
  enforces strict causality of the planned inputs.
* Fixed-length (single) ARX predictor: one tau_p-long single-step model,
  replicated along the horizon into a banded multi-step matrix and
  propagated through the same (I - Phi_y) recursion.

Window convention: a data window has tau_p + tau_f steps; steps
[0, tau_p-1] are the past, steps [tau_p, tau_p+tau_f-1] the future, and
n_col = n_samples - (tau_p + tau_f) + 1.  Stacked past vectors z_p run
oldest-first with z = [y; u] per step.  Planned inputs start one step after
the newest past sample, so the first block row of H_u is identically zero.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import qr, solve_triangular

from .errors import ConfigurationError, DegenerateDataError, DimensionError
from .signals import HankelConfig, HankelMatrix, Trajectory, build_hankel, interleave

PERSIST_FORMAT_VERSION = 1

# diagonal entries of L smaller than this (relative to ||Z||_F) count as singular
_DIAG_GUARD = 1e-10
# content a singular direction may carry, relative to its target row, before
# the fit refuses to continue (below this it is truncated like rank-revealing
# least squares would)
_TRUNC_REL = 1e-3


@dataclass
class DeePCData:
    """The four Hankel blocks sharing one column space."""

    U_p: HankelMatrix
    Y_p: HankelMatrix
    U_f: HankelMatrix
    Y_f: HankelMatrix
    config: HankelConfig

    @property
    def m(self) -> int:
        return self.U_p.n_channels

    @property
    def p(self) -> int:
        return self.Y_p.n_channels

    @property
    def n_col(self) -> int:
        return self.U_p.n_col


@dataclass
class LqFactors:
    """Z = L @ Q_orth with L lower triangular and orthonormal rows in Q_orth."""

    L: np.ndarray
    Q_orth: np.ndarray
    rank: int


@dataclass
class TransientPredictor:
    """Increasing-length ARX multi-step predictor y = H_p z_p + H_u u."""

    H_p: np.ndarray
    H_u: np.ndarray
    Phi_p: np.ndarray
    Phi_y: np.ndarray
    Phi_u: np.ndarray
    config: HankelConfig
    m: int
    p: int


@dataclass
class SingleArxPredictor:
    """Fixed-length ARX predictor: one single-step coefficient block plus its
    banded multi-step expansion."""

    phi: np.ndarray
    residual_std: np.ndarray
    H_p: np.ndarray
    H_u: np.ndarray
    config: HankelConfig
    m: int
    p: int


def build_deepc_data(u: Trajectory, y: Trajectory, cfg: HankelConfig) -> DeePCData:
    """Segment the excitation trajectory into the four DeePC Hankel blocks.

    Uses the last ``cfg.n_samples`` samples, so longer recordings only
    contribute their tail.
    """
    if u.length != y.length:
        raise DimensionError("u and y must be aligned")
    if u.length < cfg.n_samples:
        raise ConfigurationError(
            f"need {cfg.n_samples} samples, trajectory has {u.length}")
    ut = u.tail(cfg.n_samples)
    yt = y.tail(cfg.n_samples)
    tp, tf, nc = cfg.tau_p, cfg.tau_f, cfg.n_col
    return DeePCData(
        U_p=build_hankel(ut, 0, tp - 1, nc),
        Y_p=build_hankel(yt, 0, tp - 1, nc),
        U_f=build_hankel(ut, tp, tp + tf - 1, nc),
        Y_f=build_hankel(yt, tp, tp + tf - 1, nc),
        config=cfg,
    )


def lq_decompose(Z: HankelMatrix) -> LqFactors:
    """LQ factorization via QR of the transpose, with the sign convention
    diag(L) >= 0.  Rank is estimated from the diagonal of L."""
    vals = Z.values
    n_row, n_col = vals.shape
    if n_row > n_col:
        raise DimensionError(f"need tall data (n_row={n_row} > n_col={n_col})")
    Qt, Rt = qr(vals.T, mode="economic")
    L = Rt.T.copy()
    Q_orth = Qt.T.copy()
    flip = np.sign(np.diag(L))
    flip[flip == 0] = 1.0
    L *= flip[np.newaxis, :]
    Q_orth *= flip[:, np.newaxis]
    znorm = np.linalg.norm(vals)
    rank = int(np.sum(np.abs(np.diag(L)) > _DIAG_GUARD * znorm))
    return LqFactors(L, Q_orth, rank)


def _interleaved_hankel(u: Trajectory, y: Trajectory, cfg: HankelConfig) -> HankelMatrix:
    if u.length != y.length:
        raise DimensionError("u and y must be aligned")
    if u.length < cfg.n_samples:
        raise ConfigurationError(
            f"need {cfg.n_samples} samples, trajectory has {u.length}")
    z = interleave(y.tail(cfg.n_samples), u.tail(cfg.n_samples))
    return build_hankel(z, 0, cfg.window - 1, cfg.n_col)


def _solve_rows_against_L(L: np.ndarray, B: np.ndarray, n_cols: int,
                          znorm: float, block: int) -> np.ndarray:
    """Solve X L[:c,:c] = B[:, :c] for row vectors X, zero-padded to L's size.

    Rows of B are known to vanish beyond column ``n_cols``; the reduced
    triangular system is solved directly, so trailing singular diagonals of a
    rank-deficient L never enter.  Singular diagonals inside the reduced
    system get a zero coefficient when the content they would explain is
    insignificant for their target row (rank truncation); significant content
    on an unexcited direction raises instead of amplifying it into garbage.
    """
    c = n_cols
    Lc = L[:c, :c]
    diag = np.abs(np.diag(Lc))
    X = np.zeros((B.shape[0], L.shape[0]))
    if diag.min() > _DIAG_GUARD * znorm:
        X[:, :c] = solve_triangular(Lc, B[:, :c].T, lower=True, trans="T").T
        return X
    # guarded back-substitution for rank-deficient data
    Xc = np.zeros((B.shape[0], c))
    row_scale = np.maximum(np.max(np.abs(B), axis=1), 1e-14 * znorm)
    for i in range(c - 1, -1, -1):
        num = B[:, i] - Xc[:, i + 1:] @ Lc[i + 1:, i]
        if diag[i] <= _DIAG_GUARD * znorm:
            if np.any(np.abs(num) > _TRUNC_REL * row_scale):
                lag = i // block
                raise DegenerateDataError(
                    f"excitation data is degenerate: window step {lag} "
                    f"(channel {i % block}) carries target content on an "
                    f"unexcited direction")
            Xc[:, i] = 0.0
        else:
            Xc[:, i] = num / Lc[i, i]
    X[:, :c] = Xc
    return X


def _split_future_blocks(Phi: np.ndarray, cfg: HankelConfig, m: int, p: int):
    """Partition Phi into the dense past part and the per-step future
    (output, input) column blocks."""
    tp, tf = cfg.tau_p, cfg.tau_f
    blk = p + m
    Phi_p = Phi[:, :blk * tp].copy()
    fut = Phi[:, blk * tp:]
    Phi_y = np.zeros((p * tf, p * tf))
    Phi_u = np.zeros((p * tf, m * tf))
    for j in range(tf):
        Phi_y[:, j * p:(j + 1) * p] = fut[:, j * blk:j * blk + p]
        Phi_u[:, j * m:(j + 1) * m] = fut[:, j * blk + p:(j + 1) * blk]
    return Phi_p, Phi_y, Phi_u


def _propagate(Phi_p, Phi_y, Phi_u):
    """H = (I - Phi_y)^-1 [Phi_p Phi_u] by forward substitution; the left
    factor is unit lower triangular by construction so the solve is exact."""
    A = np.eye(Phi_y.shape[0]) - Phi_y
    H_p = solve_triangular(A, Phi_p, lower=True, unit_diagonal=True)
    H_u = solve_triangular(A, Phi_u, lower=True, unit_diagonal=True)
    return H_p, H_u


def fit_transient_predictor(u: Trajectory, y: Trajectory,
                            cfg: HankelConfig) -> TransientPredictor:
    """Fit the increasing-length ARX predictor from excitation data.

    Pipeline: interleaved Hankel Z -> LQ -> select the future output rows of
    L and zero each row from its own diagonal block onward (the retained
    part is the linear combination of strictly previous measurements) ->
    triangular solve for Phi -> partition -> propagate through (I - Phi_y).
    """
    m, p = u.channels, y.channels
    Z = _interleaved_hankel(u, y, cfg)
    lq = lq_decompose(Z)
    if lq.rank < Z.n_row:
        warnings.warn(
            f"excitation Hankel is rank deficient ({lq.rank}/{Z.n_row}); "
            "the excitation may not be persistently exciting", stacklevel=2)
    tp, tf = cfg.tau_p, cfg.tau_f
    blk = p + m
    L = lq.L
    znorm = np.linalg.norm(Z.values)

    out_rows = np.concatenate(
        [np.arange(blk * (tp + k), blk * (tp + k) + p) for k in range(tf)])
    Ly0 = L[out_rows, :].copy()
    for k in range(tf):
        Ly0[k * p:(k + 1) * p, blk * (tp + k):] = 0.0

    # all rows are supported on the leading columns of the last block row
    c_max = blk * (tp + tf - 1)
    Phi = _solve_rows_against_L(L, Ly0, c_max, znorm, blk)

    Phi_p, Phi_y, Phi_u = _split_future_blocks(Phi, cfg, m, p)
    H_p, H_u = _propagate(Phi_p, Phi_y, Phi_u)
    return TransientPredictor(H_p, H_u, Phi_p, Phi_y, Phi_u, cfg, m, p)


def fit_single_arx(u: Trajectory, y: Trajectory,
                   cfg: HankelConfig) -> SingleArxPredictor:
    """Least-squares fit of one tau_p-long single-step ARX model, expanded
    along the horizon.

    The regression uses the same interleaved Hankel data as the transient
    predictor (columns restricted to tau_p+1-step windows), so both fits see
    identical information.
    """
    m, p = u.channels, y.channels
    Z = _interleaved_hankel(u, y, cfg)
    blk = p + m
    tp = cfg.tau_p
    reg = Z.values[:blk * tp, :]                    # z(t-tau_p+1)..z(t), scaled
    target = Z.values[blk * tp:blk * tp + p, :]     # y(t+1), same scaling
    sol, _, rank, _ = np.linalg.lstsq(reg.T, target.T, rcond=None)
    if rank < reg.shape[0]:
        warnings.warn(
            f"single-step ARX regressor is rank deficient ({rank}/{reg.shape[0]}); "
            "returning the minimum-norm fit", stacklevel=2)
    phi = sol.T
    resid = (target - phi @ reg) * np.sqrt(Z.n_col)   # undo Hankel scaling
    residual_std = np.sqrt(np.mean(resid ** 2, axis=1))
    H_p, H_u = expand_single_arx(phi, cfg)
    return SingleArxPredictor(phi, residual_std, H_p, H_u, cfg, m, p)


def expand_single_arx(phi: np.ndarray, cfg: HankelConfig) -> tuple[np.ndarray, np.ndarray]:
    """Replicate a single-step coefficient block across the horizon.

    ``phi`` is p x ((p+m) tau_p) with column blocks oldest-first.  Each future
    step shifts the same block one position to the right; the banded matrix is
    partitioned into (past | future outputs | future inputs) and propagated
    through the unit-lower-triangular recursion, giving the fixed-length
    analog of the transient predictor's (H_p, H_u).
    """
    p = phi.shape[0]
    tp, tf = cfg.tau_p, cfg.tau_f
    if phi.shape[1] % tp != 0:
        raise DimensionError(f"phi width {phi.shape[1]} not divisible by tau_p={tp}")
    blk = phi.shape[1] // tp
    if blk <= p:
        raise DimensionError("phi must carry at least one input channel per step")
    psi = np.zeros((p * tf, blk * (tp + tf)))
    for k in range(tf):
        psi[k * p:(k + 1) * p, k * blk:(k + tp) * blk] = phi
    Psi_p, Psi_y, Psi_u = _split_future_blocks(psi, cfg, blk - p, p)
    return _propagate(Psi_p, Psi_y, Psi_u)


def predict(H_p: np.ndarray, H_u: np.ndarray, z_p: np.ndarray,
            u: np.ndarray) -> np.ndarray:
    """Stacked future outputs y = H_p z_p + H_u u."""
    z_p = np.asarray(z_p, dtype=float).reshape(-1)
    u = np.asarray(u, dtype=float).reshape(-1)
    if z_p.shape[0] != H_p.shape[1]:
        raise DimensionError(f"z_p has {z_p.shape[0]} entries, H_p expects {H_p.shape[1]}")
    if u.shape[0] != H_u.shape[1]:
        raise DimensionError(f"u has {u.shape[0]} entries, H_u expects {H_u.shape[1]}")
    return H_p @ z_p + H_u @ u


def save_predictor(path, pred):
    """Persist a predictor (or DeePC blocks) as an .npz with a version tag."""
    if isinstance(pred, TransientPredictor):
        np.savez(path, format_version=PERSIST_FORMAT_VERSION, kind="tpc",
                 H_p=pred.H_p, H_u=pred.H_u, Phi_p=pred.Phi_p,
                 Phi_y=pred.Phi_y, Phi_u=pred.Phi_u, m=pred.m, p=pred.p,
                 cfg=_cfg_array(pred.config))
    elif isinstance(pred, SingleArxPredictor):
        np.savez(path, format_version=PERSIST_FORMAT_VERSION, kind="single_arx",
                 phi=pred.phi, residual_std=pred.residual_std,
                 H_p=pred.H_p, H_u=pred.H_u, m=pred.m, p=pred.p,
                 cfg=_cfg_array(pred.config))
    elif isinstance(pred, DeePCData):
        np.savez(path, format_version=PERSIST_FORMAT_VERSION, kind="deepc",
                 U_p=pred.U_p.values, Y_p=pred.Y_p.values,
                 U_f=pred.U_f.values, Y_f=pred.Y_f.values,
                 m=pred.m, p=pred.p, cfg=_cfg_array(pred.config))
    else:
        raise ConfigurationError(f"cannot persist object of type {type(pred).__name__}")


def load_predictor(path):
    with np.load(path, allow_pickle=False) as z:
        version = int(z["format_version"])
        if version != PERSIST_FORMAT_VERSION:
            raise ConfigurationError(f"{path}: unsupported format version {version}")
        kind = str(z["kind"])
        cfg = _cfg_from_array(z["cfg"])
        m, p = int(z["m"]), int(z["p"])
        if kind == "tpc":
            return TransientPredictor(z["H_p"], z["H_u"], z["Phi_p"],
                                      z["Phi_y"], z["Phi_u"], cfg, m, p)
        if kind == "single_arx":
            return SingleArxPredictor(z["phi"], z["residual_std"],
                                      z["H_p"], z["H_u"], cfg, m, p)
        if kind == "deepc":
            return DeePCData(HankelMatrix(z["U_p"], m), HankelMatrix(z["Y_p"], p),
                             HankelMatrix(z["U_f"], m), HankelMatrix(z["Y_f"], p),
                             cfg)
    raise ConfigurationError(f"{path}: unknown predictor kind {kind!r}")


def _cfg_array(cfg: HankelConfig) -> np.ndarray:
    return np.array([cfg.tau_p, cfg.tau_f, cfg.n_samples], dtype=np.int64)


def _cfg_from_array(a: np.ndarray) -> HankelConfig:
    return HankelConfig(int(a[0]), int(a[1]), int(a[2]))
