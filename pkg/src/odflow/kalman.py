"""State-augmented Kalman filter over O-D deviations from historical flows.

The state variable is the deviation of each O-D flow from its value at the
same interval seven days earlier; deviations can take either sign and are
closer to Gaussian than raw counts. A diagonal autoregression of order q'
drives the deviations, and link-count deviations observe them through lagged
assignment matrices (order p'). Stacking s + 1 = max(p', q' - 1) + 1 lagged
deviation vectors into one augmented state turns both into first-order form:

    X_h = F X_{h-1} + W_h          F = companion form, top row the AR blocks
    Y_h = A X_h + v_h              A = [a^0 a^1 ... a^s], zero past p'

The covariance update uses the Joseph form and every innovation system is
solved through a symmetric positive-definite factorization, which keeps the
estimate covariance PSD over arbitrarily long runs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .assignment import estimate_assignment, ground_truth_assignment, max_lag_intervals
from .panels import FlowPanel
from .topology import DirectedNetwork

__all__ = [
    "KalmanConfig",
    "TransitionModel",
    "MeasurementModel",
    "AugmentedKalmanState",
    "FilterMatrices",
    "estimate_transition",
    "estimate_measurement_noise",
    "build_measurement_model",
    "ground_truth_assignment",
    "estimate_assignment",
    "build_filter_matrices",
    "initial_state",
    "predict_step",
    "update_step",
    "run_filter",
]


@dataclass(frozen=True)
class KalmanConfig:
    """Lag orders of the deviation model; ``s`` is always recomputed."""

    q_prime: int = 1
    p_prime: int = 0

    def __post_init__(self):
        if self.q_prime < 1:
            raise ValueError("autoregression order q' must be >= 1")
        if self.p_prime < 0:
            raise ValueError("assignment lag order p' must be >= 0")

    @property
    def s(self) -> int:
        return max(self.p_prime, self.q_prime - 1)

    @classmethod
    def for_network(
        cls, net: DirectedNetwork, speed_mph: float, interval_minutes: float, q_prime: int = 1
    ) -> "KalmanConfig":
        """p' from travel-time geometry: enough lags to cover the slowest entrance."""
        return cls(q_prime=q_prime, p_prime=max_lag_intervals(net, speed_mph, interval_minutes))


@dataclass(frozen=True)
class TransitionModel:
    """Diagonal AR blocks (one coefficient row per lag) and diagonal process covariance."""

    f_diags: np.ndarray  # (q', n_od)
    q_diag: np.ndarray  # (n_od,)
    fallback_pairs: tuple[int, ...] = ()

    def __post_init__(self):
        if self.f_diags.ndim != 2:
            raise ValueError("f_diags must be (q', n_od)")
        if self.q_diag.shape != (self.f_diags.shape[1],):
            raise ValueError("q_diag must have one entry per O-D pair")
        if np.any(self.q_diag < 0):
            raise ValueError("process variances cannot be negative")


@dataclass(frozen=True)
class MeasurementModel:
    """Lagged assignment blocks a^0..a^p' and diagonal measurement covariance."""

    a_blocks: tuple[np.ndarray, ...]
    r_diag: np.ndarray
    fallback_links: tuple[int, ...] = ()

    def __post_init__(self):
        for block in self.a_blocks:
            if block.shape != self.a_blocks[0].shape:
                raise ValueError("all assignment blocks must share one shape")
            if np.any(block < 0) or np.any(block > 1):
                raise ValueError("assignment fractions must lie in [0, 1]")
        if self.r_diag.shape != (self.a_blocks[0].shape[0],):
            raise ValueError("r_diag must have one entry per sensor link")
        if np.any(self.r_diag < 0):
            raise ValueError("measurement variances cannot be negative")

    @property
    def p_prime(self) -> int:
        return len(self.a_blocks) - 1


@dataclass
class AugmentedKalmanState:
    """Stacked deviation vector [dx_h; dx_{h-1}; ...; dx_{h-s}] with its covariance."""

    x: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        n = self.x.shape[0]
        if self.cov.shape != (n, n):
            raise ValueError(f"covariance shape {self.cov.shape} does not match state length {n}")

    def top_block(self, n_od: int) -> np.ndarray:
        """Current-interval deviation estimate."""
        return self.x[:n_od]


# ----------------------------------------------------------- model fitting


def _usable_deviations(panel: FlowPanel, hist: FlowPanel) -> np.ndarray:
    """O-D deviations over post-warmup days: (days, intervals, n_od)."""
    if panel.od.shape != hist.od.shape:
        raise ValueError("panel and historical panel must be aligned")
    start = hist.warmup_days
    return (panel.od_flat() - hist.od_flat())[start:]


def estimate_transition(panel: FlowPanel, hist: FlowPanel, q_prime: int = 1) -> TransitionModel:
    """Per-pair ordinary least squares of a deviation on its q' within-day lags.

    Regression rows pool every training day and interval (the AR structure is
    held constant over the day). Coefficients are clipped to [-1, 1]; pairs
    with an underdetermined or all-zero design fall back to f = 0 with the
    sample variance as process noise and are reported in ``fallback_pairs``.
    """
    if q_prime < 1:
        raise ValueError("q' must be >= 1")
    dev = _usable_deviations(panel, hist)
    days, intervals, n_od = dev.shape
    if intervals < 2 * q_prime:
        raise ValueError(f"need at least {2 * q_prime} intervals per day for an order-{q_prime} regression")
    f_diags = np.zeros((q_prime, n_od))
    q_diag = np.zeros(n_od)
    fallback = []
    for r in range(n_od):
        target = dev[:, q_prime:, r].reshape(-1)
        design = np.stack(
            [dev[:, q_prime - lag : intervals - lag, r].reshape(-1) for lag in range(1, q_prime + 1)],
            axis=1,
        )
        if design.shape[0] <= q_prime or not np.any(design):
            fallback.append(r)
            q_diag[r] = float(np.var(dev[:, :, r]))
            continue
        coef, *_ = np.linalg.lstsq(design, target, rcond=None)
        coef = np.clip(coef, -1.0, 1.0)
        residual = target - design @ coef
        f_diags[:, r] = coef
        q_diag[r] = float(np.mean(residual * residual))
    return TransitionModel(f_diags=f_diags, q_diag=q_diag, fallback_pairs=tuple(fallback))


def estimate_measurement_noise(panel: FlowPanel, hist: FlowPanel) -> np.ndarray:
    """Diagonal R: per-link sample variance of link-count deviations."""
    start = hist.warmup_days
    dev = (panel.link - hist.link)[start:]
    return np.var(dev.reshape(-1, dev.shape[-1]), axis=0)


def build_measurement_model(
    panel: FlowPanel,
    hist: FlowPanel,
    net: DirectedNetwork,
    config: KalmanConfig,
    speed_mph: float,
    interval_minutes: float,
    assignment_mode: str = "estimate",
) -> MeasurementModel:
    """Assignment blocks (estimated or exact) plus the diagonal measurement covariance."""
    if assignment_mode == "ground_truth":
        blocks = ground_truth_assignment(net, speed_mph, interval_minutes)
        if len(blocks) > config.p_prime + 1:
            raise ValueError(
                f"p' = {config.p_prime} cannot cover travel-time lags up to {len(blocks) - 1}"
            )
        while len(blocks) < config.p_prime + 1:
            blocks.append(np.zeros_like(blocks[0]))
        fallback: tuple[int, ...] = ()
    elif assignment_mode == "estimate":
        blocks, fallback_list = estimate_assignment(panel, net, config.p_prime, speed_mph, interval_minutes)
        fallback = tuple(fallback_list)
    else:
        raise ValueError(f"unknown assignment mode {assignment_mode!r}")
    r_diag = estimate_measurement_noise(panel, hist)
    return MeasurementModel(a_blocks=tuple(blocks), r_diag=r_diag, fallback_links=fallback)


# ------------------------------------------------------------ filter steps


@dataclass(frozen=True)
class FilterMatrices:
    """Dense augmented-form operators shared by every step of a run."""

    f_full: np.ndarray  # ((s+1) n_od)^2 companion transition
    theta: np.ndarray  # process covariance, Q in the top-left block
    h_full: np.ndarray  # n_l x (s+1) n_od measurement matrix
    r_diag: np.ndarray
    n_od: int
    s: int


def build_filter_matrices(
    transition: TransitionModel, measurement: MeasurementModel, config: KalmanConfig
) -> FilterMatrices:
    n_od = transition.f_diags.shape[1]
    s = config.s
    if config.q_prime != transition.f_diags.shape[0]:
        raise ValueError("transition model order does not match config q'")
    if measurement.p_prime > s:
        raise ValueError("measurement lags exceed the augmented state length")
    dim = n_od * (s + 1)
    f_full = np.zeros((dim, dim))
    for lag in range(config.q_prime):
        block = np.diag(transition.f_diags[lag])
        f_full[:n_od, lag * n_od : (lag + 1) * n_od] = block
    for i in range(1, s + 1):
        f_full[i * n_od : (i + 1) * n_od, (i - 1) * n_od : i * n_od] = np.eye(n_od)
    theta = np.zeros((dim, dim))
    theta[:n_od, :n_od] = np.diag(transition.q_diag)
    n_l = measurement.a_blocks[0].shape[0]
    h_full = np.zeros((n_l, dim))
    for p, block in enumerate(measurement.a_blocks):
        h_full[:, p * n_od : (p + 1) * n_od] = block
    return FilterMatrices(
        f_full=f_full, theta=theta, h_full=h_full, r_diag=np.asarray(measurement.r_diag, dtype=float),
        n_od=n_od, s=s,
    )


def initial_state(mats: FilterMatrices) -> AugmentedKalmanState:
    """Zero deviation, covariance = the process covariance block, repeated down the diagonal."""
    dim = mats.f_full.shape[0]
    cov = np.zeros((dim, dim))
    q_block = mats.theta[: mats.n_od, : mats.n_od]
    for i in range(mats.s + 1):
        cov[i * mats.n_od : (i + 1) * mats.n_od, i * mats.n_od : (i + 1) * mats.n_od] = q_block
    return AugmentedKalmanState(x=np.zeros(dim), cov=cov)


def predict_step(state: AugmentedKalmanState, mats: FilterMatrices) -> AugmentedKalmanState:
    """Time update: x <- F x, P <- F P F^T + Theta (resymmetrized)."""
    x = mats.f_full @ state.x
    cov = mats.f_full @ state.cov @ mats.f_full.T + mats.theta
    cov = 0.5 * (cov + cov.T)
    return AugmentedKalmanState(x=x, cov=cov)


def update_step(
    state: AugmentedKalmanState,
    mats: FilterMatrices,
    y_obs: np.ndarray,
    y_hist: np.ndarray,
) -> AugmentedKalmanState:
    """Measurement update on the link-count deviation, Joseph-form covariance.

    The innovation system is solved via a Cholesky factorization; if the
    innovation covariance is not positive definite, a single 1e-9 jitter is
    added before giving up.
    """
    h = mats.h_full
    innovation = (np.asarray(y_obs, dtype=float) - np.asarray(y_hist, dtype=float)) - h @ state.x
    s_mat = h @ state.cov @ h.T + np.diag(mats.r_diag)
    s_mat = 0.5 * (s_mat + s_mat.T)
    try:
        factor = cho_factor(s_mat, lower=True)
    except np.linalg.LinAlgError:
        try:
            factor = cho_factor(s_mat + 1e-9 * np.eye(s_mat.shape[0]), lower=True)
        except np.linalg.LinAlgError as exc:
            raise RuntimeError(
                f"innovation covariance not positive definite even with jitter "
                f"(min diagonal {s_mat.diagonal().min():.3e})"
            ) from exc
    gain = cho_solve(factor, h @ state.cov).T  # P H^T S^{-1}, using P = P^T
    x = state.x + gain @ innovation
    identity = np.eye(state.x.shape[0])
    shrink = identity - gain @ h
    cov = shrink @ state.cov @ shrink.T + (gain * mats.r_diag[None, :]) @ gain.T
    cov = 0.5 * (cov + cov.T)
    return AugmentedKalmanState(x=x, cov=cov)


def run_filter(
    panel: FlowPanel,
    hist: FlowPanel,
    transition: TransitionModel,
    measurement: MeasurementModel,
    config: KalmanConfig,
    horizons: tuple[int, ...] = (1, 2, 3),
    days: range | None = None,
) -> dict[int, np.ndarray]:
    """Filter each day independently and extrapolate point predictions per horizon.

    Returns, per horizon, an array shaped like the O-D panel. A target
    interval t is predicted from the state updated with observations through
    t - horizon; early intervals with no usable observation fall back to the
    prior (historical flows). Predictions are deviations plus historical
    flows, clamped at zero. Days outside ``days`` (default: every post-warmup
    day) keep their historical flows as a neutral fill.
    """
    mats = build_filter_matrices(transition, measurement, config)
    intervals = panel.intervals_per_day
    n_d = panel.n_d
    if days is None:
        days = range(hist.warmup_days, panel.days)
    preds = {step: hist.od.copy() for step in horizons}
    for day in days:
        state = initial_state(mats)
        for h in range(intervals):
            state = predict_step(state, mats)
            state = update_step(state, mats, panel.link[day, h], hist.link[day, h])
            rollout = state.x
            for ahead in range(1, max(horizons) + 1):
                rollout = mats.f_full @ rollout
                target = h + ahead
                if ahead in preds and target < intervals:
                    deviation = rollout[: mats.n_od].reshape(n_d, n_d - 1)
                    preds[ahead][day, target] = hist.od[day, target] + deviation
    for step in horizons:
        np.maximum(preds[step], 0.0, out=preds[step])
    return preds
