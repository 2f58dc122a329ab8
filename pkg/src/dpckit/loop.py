"""Receding-horizon closed loop: plant + band-pass measurement path +
controllers + solver, plus episode metrics and the input-linearity harness.

Actuation timing: at step t the loop measures y(t), filters it, computes the
input u(t) from the buffered past and applies it in the plant transition
that produces y(t+1) (zero computation delay, never using y(t) to influence
y(t)).  The predictors pair same-step (y, u) samples, so the newest output
enters the past window one cycle later, once its companion input exists;
the first planned input of every OCP is exactly the input applied now.
"""
from __future__ import annotations

import csv
import time
from collections import deque
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DimensionError
from .ocp import (OcpBounds, WeightSpec, arx_default_weights, build_deepc_qp,
                  build_tpc_qp, deepc_default_weights, deepc_gain,
                  default_bounds, refresh_qp, tpc_gain)
from .plant import PlantModel, PlantState, doublet, simulate, step
from .predictors import (DeePCData, SingleArxPredictor, TransientPredictor,
                         build_deepc_data, fit_single_arx,
                         fit_transient_predictor)
from .qpsolver import SolverSettings, SolverWorkspace
from .signals import (BandPassFilter, HankelConfig, Trajectory, prbs_load_noise,
                      white_excitation)

CONTROLLER_KINDS = ("zero", "tpc", "single_arx", "deepc",
                    "closed_form_tpc", "closed_form_deepc")
DIVERGENCE_LIMIT = 1e3


class PastBuffer:
    """Ring of the most recent filtered outputs and applied inputs.

    Outputs lead inputs by one sample: y(t) is pushed before u(t) is known.
    ``z_p`` exposes the last ``tau_p`` complete (y, u) pairs interleaved
    oldest-first, matching the predictor convention.
    """

    def __init__(self, tau_p: int, p: int, m: int):
        self.tau_p = tau_p
        self.p = p
        self.m = m
        self._y: deque = deque(maxlen=tau_p + 1)
        self._u: deque = deque(maxlen=tau_p)

    def push_output(self, y):
        y = np.asarray(y, dtype=float).reshape(-1)
        if y.shape[0] != self.p:
            raise DimensionError("output dimension mismatch")
        self._y.append(y)

    def push_input(self, u):
        u = np.asarray(u, dtype=float).reshape(-1)
        if u.shape[0] != self.m:
            raise DimensionError("input dimension mismatch")
        self._u.append(u)

    @property
    def full(self) -> bool:
        return len(self._u) >= self.tau_p and len(self._y) >= self.tau_p + 1

    def _pairs(self):
        ys = list(self._y)[:self.tau_p] if len(self._y) > self.tau_p else list(self._y)
        return ys, list(self._u)

    def z_p(self) -> np.ndarray:
        ys, us = self._pairs()
        return np.concatenate([np.concatenate([y, u]) for y, u in zip(ys, us)])

    def y_p(self) -> np.ndarray:
        ys, _ = self._pairs()
        return np.concatenate(ys)

    def u_p(self) -> np.ndarray:
        _, us = self._pairs()
        return np.concatenate(us)

    def last_input(self) -> np.ndarray:
        return self._u[-1].copy() if self._u else np.zeros(self.m)


@dataclass
class StepStats:
    solve_ms: float = 0.0
    iters: int = 0
    status: str = "solved"
    fallback: bool = False


class ZeroController:
    """No wide-area control (the open-loop baseline)."""

    kind = "zero"

    def __init__(self, m: int = 3, tau_p: int = 1):
        self.m = m
        self.tau_p = tau_p

    def step(self, buffer: PastBuffer):
        return np.zeros(self.m), StepStats()


class PredictorQpController:
    """Receding-horizon controller backed by (H_p, H_u) predictor matrices
    and the embedded operator-splitting solver."""

    def __init__(self, pred, weights: WeightSpec | None = None,
                 bounds: OcpBounds | None = None,
                 settings: SolverSettings | None = None):
        self.pred = pred
        self.kind = "single_arx" if isinstance(pred, SingleArxPredictor) else "tpc"
        self.m = pred.m
        self.p = pred.p
        self.tau_p = pred.config.tau_p
        self.weights = weights or arx_default_weights(pred.p, pred.m)
        self.bounds = bounds or default_bounds(pred.m)
        z0 = np.zeros((pred.p + pred.m) * self.tau_p)
        self.qp = build_tpc_qp(pred, self.weights, self.bounds, z0)
        self.ws = SolverWorkspace(self.qp, settings or SolverSettings())

    def step(self, buffer: PastBuffer):
        refresh_qp(self.qp, z_p=buffer.z_p())
        sol = self.ws.refresh_from(self.qp)
        u_plan = self.qp.extract_u(sol.x)
        return u_plan[:self.m], StepStats(sol.solve_ms, sol.iterations, sol.status)


class DeepcController:
    """DeePC with soft past-output matching and hard input bounds."""

    kind = "deepc"

    def __init__(self, data: DeePCData, weights: WeightSpec | None = None,
                 bounds: OcpBounds | None = None,
                 settings: SolverSettings | None = None):
        self.data = data
        self.m = data.m
        self.p = data.p
        self.tau_p = data.config.tau_p
        self.weights = weights or deepc_default_weights(data.p, data.m)
        self.bounds = bounds or default_bounds(data.m)
        u0 = np.zeros(data.m * self.tau_p)
        y0 = np.zeros(data.p * self.tau_p)
        self.qp = build_deepc_qp(data, self.weights, self.bounds, u0, y0)
        self.ws = SolverWorkspace(self.qp, settings or SolverSettings())

    def step(self, buffer: PastBuffer):
        refresh_qp(self.qp, u_p=buffer.u_p(), y_p=buffer.y_p())
        sol = self.ws.refresh_from(self.qp)
        u_plan = self.qp.extract_u(sol.x)
        return u_plan[:self.m], StepStats(sol.solve_ms, sol.iterations, sol.status)


class ClosedFormTpcController:
    """Unconstrained predictor-based optimum as a single precomputed gain;
    the applied input is clipped to the box afterwards."""

    kind = "closed_form_tpc"

    def __init__(self, pred, weights: WeightSpec | None = None,
                 bounds: OcpBounds | None = None):
        self.m = pred.m
        self.tau_p = pred.config.tau_p
        self.weights = weights or arx_default_weights(pred.p, pred.m)
        self.bounds = bounds or default_bounds(pred.m)
        self.gain = tpc_gain(pred, self.weights)

    def step(self, buffer: PastBuffer):
        t0 = time.perf_counter()
        u_plan = self.gain @ buffer.z_p()
        ms = 1e3 * (time.perf_counter() - t0)
        return u_plan[:self.m], StepStats(ms, 0, "solved")


class ClosedFormDeepcController:
    """Modified-DeePC optimum as a precomputed gain on [u_p; y_p]."""

    kind = "closed_form_deepc"

    def __init__(self, data: DeePCData, weights: WeightSpec | None = None,
                 bounds: OcpBounds | None = None):
        self.m = data.m
        self.tau_p = data.config.tau_p
        self.weights = weights or deepc_default_weights(data.p, data.m)
        self.bounds = bounds or default_bounds(data.m)
        self.gain = deepc_gain(data, self.weights)

    def step(self, buffer: PastBuffer):
        t0 = time.perf_counter()
        u_plan = self.gain @ np.concatenate([buffer.u_p(), buffer.y_p()])
        ms = 1e3 * (time.perf_counter() - t0)
        return u_plan[:self.m], StepStats(ms, 0, "solved")


def controller_step(ctrl, buffer: PastBuffer) -> tuple[np.ndarray, StepStats]:
    """One controller evaluation with clipping and solver fail-safe.

    A solver failure keeps the previously applied input rather than an
    unconverged iterate.
    """
    if ctrl.kind == "zero":
        return ctrl.step(buffer)
    if not buffer.full:
        raise ConfigurationError("controller_step requires a full past buffer")
    u, stats = ctrl.step(buffer)
    if stats.status != "solved":
        u = buffer.last_input()
        stats.fallback = True
    b = getattr(ctrl, "bounds", None)
    if b is not None:
        u = np.clip(u, b.u_lb, b.u_ub)
    return u, stats


@dataclass
class EpisodeReport:
    """Full per-step log plus the summary metrics."""

    t_s: np.ndarray
    y: np.ndarray
    y_filtered: np.ndarray
    u: np.ndarray
    solve_ms: np.ndarray
    iters: np.ndarray
    status: list[str]
    rms: np.ndarray
    cumulative_abs: np.ndarray
    input_effort_l1: float
    diverged: bool

    @property
    def n_steps(self) -> int:
        return self.t_s.shape[0]


def metrics(y: np.ndarray, u: np.ndarray):
    """(per-channel RMS, cumulative |y| trace, total l1 input effort)."""
    y = np.atleast_2d(np.asarray(y, dtype=float))
    u = np.atleast_2d(np.asarray(u, dtype=float))
    if y.size == 0:
        raise ConfigurationError("metrics need a nonempty log")
    rms = np.sqrt(np.mean(y ** 2, axis=0))
    cumulative = np.cumsum(np.abs(y), axis=0)
    effort = float(np.sum(np.abs(u)))
    return rms, cumulative, effort


def run_episode(plant: PlantModel, ctrl, scenario: Trajectory | None = None,
                noise_std: float = 0.0, noise_seed: int = 0,
                duration_s: float = 60.0,
                filter_kwargs: dict | None = None,
                divergence_limit: float = DIVERGENCE_LIMIT) -> EpisodeReport:
    """Closed-loop episode: measure -> band-pass -> buffer -> controller ->
    plant step with disturbance and process noise.

    The controller outputs zero until the past buffer holds tau_p complete
    pairs.  Divergence (any |y| beyond ``divergence_limit``) truncates the
    episode and flags the report.
    """
    n_steps = int(round(duration_s / plant.Ts))
    noise = (prbs_load_noise(plant.d, duration_s, noise_std, noise_seed, plant.Ts)
             if noise_std > 0 else None)
    filt = BandPassFilter(plant.p, sample_period=plant.Ts, **(filter_kwargs or {}))
    buffer = PastBuffer(ctrl.tau_p, plant.p, plant.m)
    state = PlantState(np.zeros(plant.n), 0)
    ys = np.zeros((n_steps, plant.p))
    yf = np.zeros((n_steps, plant.p))
    us = np.zeros((n_steps, plant.m))
    solve_ms = np.zeros(n_steps)
    iters = np.zeros(n_steps, dtype=int)
    status: list[str] = []
    diverged = False
    n_done = n_steps
    for t in range(n_steps):
        y_t = plant.output(state)
        if np.max(np.abs(y_t)) > divergence_limit:
            diverged = True
            n_done = t
            break
        yf_t = filt.apply(y_t)
        buffer.push_output(yf_t)
        if ctrl.kind == "zero" or buffer.full:
            u_t, stats = controller_step(ctrl, buffer)
        else:
            u_t, stats = np.zeros(plant.m), StepStats(status="bootstrap")
        buffer.push_input(u_t)
        d_t = np.zeros(plant.d)
        if scenario is not None and t < scenario.length:
            d_t = d_t + scenario.data[t]
        if noise is not None:
            d_t = d_t + noise.data[t]
        state, _ = step(plant, state, u_t, d_t)
        ys[t] = y_t
        yf[t] = yf_t
        us[t] = u_t
        solve_ms[t] = stats.solve_ms
        iters[t] = stats.iters
        status.append("fallback" if stats.fallback else stats.status)
    ys, yf, us = ys[:n_done], yf[:n_done], us[:n_done]
    solve_ms, iters = solve_ms[:n_done], iters[:n_done]
    if n_done == 0:
        rms = np.zeros(plant.p)
        cumulative = np.zeros((0, plant.p))
        effort = 0.0
    else:
        rms, cumulative, effort = metrics(ys, us)
    return EpisodeReport(np.arange(n_done) * plant.Ts, ys, yf, us, solve_ms,
                         iters, status, rms, cumulative, effort, diverged)


@dataclass
class TrainedModels:
    """Output of one excitation campaign: all three predictor families plus
    the collected (input, filtered-output) data."""

    tpc: TransientPredictor
    single_arx: SingleArxPredictor
    deepc: DeePCData
    u: Trajectory
    y_filtered: Trajectory


def excite_and_fit(plant: PlantModel, arx_cfg: HankelConfig,
                   deepc_cfg: HankelConfig, excitation_seed: int = 1,
                   noise_std: float = 0.0, noise_seed: int = 2,
                   excitation_std: float = 0.0025, clip: float = 0.1,
                   warmup_s: float = 30.0,
                   filter_kwargs: dict | None = None) -> TrainedModels:
    """Run the offline white-noise excitation through the plant and fit all
    predictor families on the same measurement path used online
    (band-pass-filtered outputs paired with applied inputs).

    The collected record is the longest configured training length plus a
    warm-up that absorbs the filter transient; fits use the record tail.
    """
    n_need = max(arx_cfg.n_samples, deepc_cfg.n_samples)
    n_collect = n_need + int(round(warmup_s / plant.Ts))
    u = white_excitation(plant.m, n_collect, excitation_std, clip,
                         excitation_seed, plant.Ts)
    noise = (prbs_load_noise(plant.d, n_collect * plant.Ts, noise_std,
                             noise_seed, plant.Ts)
             if noise_std > 0 else None)
    filt = BandPassFilter(plant.p, sample_period=plant.Ts, **(filter_kwargs or {}))
    state = PlantState(np.zeros(plant.n), 0)
    yf = np.zeros((n_collect, plant.p))
    for t in range(n_collect):
        y_t = plant.output(state)
        yf[t] = filt.apply(y_t)
        d_t = noise.data[t] if noise is not None else None
        state, _ = step(plant, state, u.data[t], d_t)
    y_traj = Trajectory(yf, plant.Ts)
    tpc = fit_transient_predictor(u, y_traj, arx_cfg)
    arx = fit_single_arx(u, y_traj, arx_cfg)
    deepc = build_deepc_data(u, y_traj, deepc_cfg)
    return TrainedModels(tpc, arx, deepc, u, y_traj)


def make_controller(kind: str, trained: TrainedModels,
                    weights: WeightSpec | None = None,
                    bounds: OcpBounds | None = None,
                    settings: SolverSettings | None = None):
    """Instantiate a controller variant from trained models."""
    if kind == "zero":
        m = trained.tpc.m if trained else 3
        return ZeroController(m)
    if kind == "tpc":
        return PredictorQpController(trained.tpc, weights, bounds, settings)
    if kind == "single_arx":
        return PredictorQpController(trained.single_arx, weights, bounds, settings)
    if kind == "deepc":
        return DeepcController(trained.deepc, weights, bounds, settings)
    if kind == "closed_form_tpc":
        return ClosedFormTpcController(trained.tpc, weights, bounds)
    if kind == "closed_form_deepc":
        return ClosedFormDeepcController(trained.deepc, weights, bounds)
    raise ConfigurationError(f"unknown controller kind {kind!r}; "
                             f"expected one of {CONTROLLER_KINDS}")


@dataclass
class LinearityReport:
    """Superposition/homogeneity probe results.

    ``rmse`` has shape (n_combos, n_scales, p): the per-output RMS mismatch
    between the measured response to a scaled doublet combination and the
    same combination of single-doublet responses.
    """

    scale_factors: list[float]
    combos: list[tuple[int, ...]]
    rmse: np.ndarray
    tau_sim_s: float


def linearity_test(plant: PlantModel, scales=(1.0, 5.0, 10.0, 20.0),
                   combos: list[tuple[int, ...]] | None = None,
                   amplitude: float = 0.01, duration_s: float = 1.0,
                   tau_sim_s: float = 30.0) -> LinearityReport:
    """Single-excitation doublet superposition test.

    Each input channel is probed alone to get the basis responses; then each
    (combo, scale) pair drives the plant with the scaled doublet sum and the
    RMSE against the equally scaled basis sum is recorded per output.
    Saturation (if enabled on the plant) is the only mechanism that can make
    these errors grow.
    """
    m = plant.m
    if combos is None:
        combos = ([(i,) for i in range(m)]
                  + [(i, j) for i in range(m) for j in range(i + 1, m)]
                  + [tuple(range(m))])
    bases = []
    for i in range(m):
        d = doublet(i, amplitude, duration_s, plant.Ts, m, total_s=tau_sim_s)
        bases.append(simulate(plant, d).data)
    n_steps = bases[0].shape[0]
    rmse = np.zeros((len(combos), len(scales), plant.p))
    for ci, combo in enumerate(combos):
        base_u = np.zeros((n_steps, m))
        base_y = np.zeros((n_steps, plant.p))
        for i in combo:
            base_u += doublet(i, amplitude, duration_s, plant.Ts, m,
                              total_s=tau_sim_s).data
            base_y += bases[i]
        for si, s in enumerate(scales):
            y = simulate(plant, Trajectory(s * base_u, plant.Ts)).data
            err = s * base_y - y
            rmse[ci, si] = np.sqrt(np.mean(err ** 2, axis=0))
    return LinearityReport(list(scales), combos, rmse, tau_sim_s)


def write_episode_csv(path, report: EpisodeReport):
    """Per-step log: t_s, y, filtered y, u, solver stats."""
    p = report.y.shape[1] if report.n_steps else 3
    m = report.u.shape[1] if report.n_steps else 3
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t_s"] + [f"y{i + 1}" for i in range(p)]
                   + [f"yf{i + 1}" for i in range(p)]
                   + [f"u{i + 1}" for i in range(m)]
                   + ["solve_ms", "iters", "status"])
        for t in range(report.n_steps):
            w.writerow([f"{report.t_s[t]:.6f}"]
                       + [f"{v:.12g}" for v in report.y[t]]
                       + [f"{v:.12g}" for v in report.y_filtered[t]]
                       + [f"{v:.12g}" for v in report.u[t]]
                       + [f"{report.solve_ms[t]:.6g}", str(report.iters[t]),
                          report.status[t]])
