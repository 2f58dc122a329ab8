"""Trajectory containers, scaled Hankel matrices, band-pass filtering and
excitation/noise generators.

All signals are per-unit, sampled at a fixed period (0.1 s default).  A
trajectory stores samples row-wise: ``data[t]`` is the channel vector at
step ``t``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy import signal as sps

from .errors import ConfigurationError, DimensionError, OutOfRangeError

DEFAULT_TS = 0.1


@dataclass
class Trajectory:
    """Time-indexed multi-channel signal.

    data : (length, channels) float array, one row per sample
    sample_period : seconds between samples
    """

    data: np.ndarray
    sample_period: float = DEFAULT_TS

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        if self.data.ndim == 1:
            self.data = self.data.reshape(-1, 1)
        if self.data.ndim != 2:
            raise DimensionError("trajectory data must be 2-D (length, channels)")
        if self.data.shape[0] < 1:
            raise DimensionError("trajectory must hold at least one sample")
        if not self.sample_period > 0:
            raise ConfigurationError("sample_period must be positive")

    @property
    def length(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[1]

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.length) * self.sample_period

    def tail(self, n: int) -> "Trajectory":
        """Last ``n`` samples (fits use the tail, so prepended warm-up data
        never changes the result)."""
        if n > self.length:
            raise OutOfRangeError(f"tail({n}) exceeds trajectory length {self.length}")
        return Trajectory(self.data[self.length - n:].copy(), self.sample_period)

    def stacked(self) -> np.ndarray:
        """Samples concatenated oldest-first into one vector."""
        return self.data.reshape(-1)


@dataclass(frozen=True)
class HankelConfig:
    """Horizon bookkeeping shared by all data-driven predictors.

    tau_p : past-window length in steps
    tau_f : prediction-horizon length in steps
    n_samples : training-data length in steps
    """

    tau_p: int
    tau_f: int
    n_samples: int

    def __post_init__(self):
        if self.tau_p < 1 or self.tau_f < 1:
            raise ConfigurationError("tau_p and tau_f must be >= 1")
        if self.n_samples < self.tau_p + self.tau_f:
            raise ConfigurationError(
                f"n_samples={self.n_samples} shorter than window "
                f"tau_p+tau_f={self.tau_p + self.tau_f}"
            )

    @property
    def window(self) -> int:
        return self.tau_p + self.tau_f

    @property
    def n_col(self) -> int:
        return self.n_samples - self.window + 1


@dataclass
class HankelMatrix:
    """Dense Hankel block scaled by 1/sqrt(n_col) so row variance is
    normalized across different column counts."""

    values: np.ndarray
    n_channels: int

    @property
    def n_row(self) -> int:
        return self.values.shape[0]

    @property
    def n_col(self) -> int:
        return self.values.shape[1]


def build_hankel(traj: Trajectory, t0: int, t1: int, n_col: int) -> HankelMatrix:
    """Scaled Hankel matrix of the window [t0, t1] with ``n_col`` columns.

    Block-row i, column j holds w(t0+i+j) / sqrt(n_col); block rows are the
    channel vectors, so n_row = channels * (t1 - t0 + 1).
    """
    if t1 < t0:
        raise OutOfRangeError(f"t1={t1} < t0={t0}")
    if n_col < 1:
        raise OutOfRangeError("n_col must be >= 1")
    if t1 + n_col - 1 >= traj.length:
        raise OutOfRangeError(
            f"window [{t0},{t1}] with n_col={n_col} needs {t1 + n_col} samples, "
            f"trajectory has {traj.length}"
        )
    nw = traj.channels
    depth = t1 - t0 + 1
    h = np.empty((nw * depth, n_col))
    for i in range(depth):
        h[i * nw:(i + 1) * nw, :] = traj.data[t0 + i:t0 + i + n_col].T
    h /= np.sqrt(n_col)
    return HankelMatrix(h, nw)


def interleave(y: Trajectory, u: Trajectory) -> Trajectory:
    """Joint signal z(t) = [y(t); u(t)], outputs first."""
    if y.length != u.length:
        raise DimensionError(f"length mismatch: y has {y.length}, u has {u.length}")
    if y.sample_period != u.sample_period:
        raise DimensionError("sample_period mismatch between y and u")
    return Trajectory(np.hstack([y.data, u.data]), y.sample_period)


def deinterleave(z: Trajectory, p: int) -> tuple[Trajectory, Trajectory]:
    """Inverse of :func:`interleave`: first ``p`` channels are outputs."""
    if p < 1 or p >= z.channels:
        raise DimensionError(f"p={p} incompatible with {z.channels} channels")
    return (Trajectory(z.data[:, :p].copy(), z.sample_period),
            Trajectory(z.data[:, p:].copy(), z.sample_period))


class BandPassFilter:
    """Streaming Butterworth band-pass (second-order sections) with implicit
    mean removal through its DC zero.

    The filter runs at ``internal_rate`` (default 100 Hz) on a zero-order-hold
    upsample of each incoming sample and decimates back to the external rate,
    because the nominal 5 Hz upper cutoff coincides with the 10 Hz-sampling
    Nyquist frequency.  When ``internal_rate`` equals the external rate the
    upper cutoff is clamped below Nyquist (4.5 Hz for 10 Hz sampling).
    """

    def __init__(self, channels: int, low_cutoff: float = 0.05,
                 high_cutoff: float = 5.0, order: int = 4,
                 internal_rate: float = 100.0,
                 sample_period: float = DEFAULT_TS):
        if channels < 1:
            raise ConfigurationError("channels must be >= 1")
        nyq = internal_rate / 2.0
        high = high_cutoff
        if high >= nyq:
            high = 0.9 * nyq
        if not 0 < low_cutoff < high:
            raise ConfigurationError(
                f"need 0 < low_cutoff < high_cutoff < {nyq} Hz, got "
                f"({low_cutoff}, {high_cutoff}) at internal_rate={internal_rate}"
            )
        self.channels = channels
        self.low_cutoff = low_cutoff
        self.high_cutoff = high
        self.order = order
        self.internal_rate = internal_rate
        self.sample_period = sample_period
        self.oversample = max(1, int(round(internal_rate * sample_period)))
        self.sos = sps.butter(order, [low_cutoff, high],
                              btype="bandpass", fs=internal_rate, output="sos")
        self.reset()

    def reset(self):
        # zi shape (n_sections, 2, channels): scipy's sosfilt state layout for axis=0
        self.state = np.zeros((self.sos.shape[0], 2, self.channels))

    def apply(self, sample) -> np.ndarray:
        """Filter one external-rate sample; advances the filter state."""
        x = np.asarray(sample, dtype=float).reshape(-1)
        if x.shape[0] != self.channels:
            raise DimensionError(f"sample has {x.shape[0]} entries, filter expects {self.channels}")
        block = np.tile(x, (self.oversample, 1))
        out, self.state = sps.sosfilt(self.sos, block, axis=0, zi=self.state)
        return out[-1].copy()

    def gain_at(self, freq_hz: float) -> float:
        """Magnitude response of the section cascade at ``freq_hz`` (does not
        include the zero-order-hold droop of the upsampling)."""
        w = 2 * np.pi * freq_hz / self.internal_rate
        _, h = sps.sosfreqz(self.sos, worN=[w])
        return float(abs(h[0]))


def bandpass_trajectory(traj: Trajectory, **filter_kwargs) -> Trajectory:
    """Run a fresh band-pass filter over a whole trajectory."""
    f = BandPassFilter(traj.channels, sample_period=traj.sample_period, **filter_kwargs)
    out = np.empty_like(traj.data)
    for t in range(traj.length):
        out[t] = f.apply(traj.data[t])
    return Trajectory(out, traj.sample_period)


def prbs_load_noise(n_channels: int, duration_s: float, std: float,
                    rng_seed: int, sample_period: float = DEFAULT_TS,
                    n_registers: int = 5,
                    band_hz: tuple[float, float] = (0.01, 10.0)) -> Trajectory:
    """Low-pass filtered PRBS mix emulating stochastic load variation.

    Each channel sums ``n_registers`` binary sequences with switching rates
    log-spaced over ``band_hz``, each first-order low-pass filtered at its own
    switching rate, then rescales to the requested empirical std.
    """
    if std < 0:
        raise ConfigurationError("std must be >= 0")
    if duration_s <= 0:
        raise ConfigurationError("duration_s must be positive")
    n = int(round(duration_s / sample_period))
    n = max(n, 1)
    if std == 0.0:
        return Trajectory(np.zeros((n, n_channels)), sample_period)
    rng = np.random.default_rng(rng_seed)
    freqs = np.logspace(np.log10(band_hz[0]), np.log10(band_hz[1]), n_registers)
    data = np.zeros((n, n_channels))
    for c in range(n_channels):
        acc = np.zeros(n)
        for f in freqs:
            dwell = max(1, int(round(1.0 / (f * sample_period))))
            n_switch = n // dwell + 1
            bits = rng.choice([-1.0, 1.0], size=n_switch)
            raw = np.repeat(bits, dwell)[:n]
            # first-order low-pass at the switching rate
            tau = 1.0 / (2 * np.pi * f)
            a = sample_period / (tau + sample_period)
            acc += sps.lfilter([a], [1.0, -(1.0 - a)], raw)
        data[:, c] = acc
    emp = data.std(axis=0)
    emp[emp == 0] = 1.0
    data *= std / emp
    return Trajectory(data, sample_period)


def white_excitation(m: int, n_samples: int, std: float = 0.0025,
                     clip: float = 0.1, rng_seed: int = 0,
                     sample_period: float = DEFAULT_TS) -> Trajectory:
    """Zero-mean Gaussian white excitation, hard-clipped to +/- clip."""
    if std <= 0:
        raise ConfigurationError("std must be positive")
    if clip <= 0:
        raise ConfigurationError("clip must be positive")
    rng = np.random.default_rng(rng_seed)
    data = rng.normal(0.0, std, size=(n_samples, m))
    np.clip(data, -clip, clip, out=data)
    return Trajectory(data, sample_period)


def write_trajectory_csv(path, traj: Trajectory, prefix: str = "y"):
    """CSV with a mandatory header: t_s (6 decimals) then <prefix>1..<prefix>C."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t_s"] + [f"{prefix}{i + 1}" for i in range(traj.channels)])
        for t in range(traj.length):
            w.writerow([f"{t * traj.sample_period:.6f}"]
                       + [f"{v:.12g}" for v in traj.data[t]])


def read_trajectory_csv(path, sample_period: float | None = None) -> Trajectory:
    """Read a trajectory CSV written by :func:`write_trajectory_csv`."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "t_s":
        raise ConfigurationError(f"{path}: missing t_s header row")
    body = np.array([[float(v) for v in r] for r in rows[1:]])
    if sample_period is None:
        sample_period = DEFAULT_TS if body.shape[0] < 2 else float(body[1, 0] - body[0, 0])
    return Trajectory(body[:, 1:], sample_period)


def write_io_csv(path, u: Trajectory, y: Trajectory):
    """Paired excitation file: t_s, u1..um, y1..yp."""
    if u.length != y.length:
        raise DimensionError("u and y must have equal length")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        header = (["t_s"] + [f"u{i + 1}" for i in range(u.channels)]
                  + [f"y{i + 1}" for i in range(y.channels)])
        w.writerow(header)
        for t in range(u.length):
            w.writerow([f"{t * u.sample_period:.6f}"]
                       + [f"{v:.12g}" for v in u.data[t]]
                       + [f"{v:.12g}" for v in y.data[t]])


def read_io_csv(path) -> tuple[Trajectory, Trajectory]:
    """Read a paired excitation file back into (u, y)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header = rows[0]
    if header[0] != "t_s":
        raise ConfigurationError(f"{path}: missing t_s header row")
    m = sum(1 for h in header if h.startswith("u"))
    p = sum(1 for h in header if h.startswith("y"))
    if m + p + 1 != len(header):
        raise ConfigurationError(f"{path}: unrecognized columns in header")
    body = np.array([[float(v) for v in r] for r in rows[1:]])
    ts = DEFAULT_TS if body.shape[0] < 2 else float(body[1, 0] - body[0, 0])
    return (Trajectory(body[:, 1:1 + m], ts), Trajectory(body[:, 1 + m:], ts))
