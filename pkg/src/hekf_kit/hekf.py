"""Hybrid EKF: soft-sensor outputs fused as confidence-weighted measurements.

Per time step:

1. the soft-sensor bank predicts ``y_ann`` from ``[v_x2, F_z2, psi2_dot]``;
2. the KNN confidence ``tau`` of that input is evaluated;
3. the soft block of the measurement covariance is inflated by
   ``c (tau - 1)^2 + 1``;
4. EKF prediction with ``[v_x2, F_z2]`` as input;
5. EKF correction with ``[psi2_dot, y_ann]``.

The soft sensor may run at a lower rate than the filter (``bank.decimation``).
Soft measurements are then fused only at the steps where a new output
arrives; the steps in between correct with the yaw rate alone.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field, replace

import numpy as np

from . import confidence as conf
from . import ekf, vehicle
from .datagen import ManeuverDataset
from .errors import ConfigurationError, DomainError, NumericalFailure, TuningFailure
from .narx import OUTPUT_CHANNELS, SoftSensorBank
from .vehicle import AUG_STATE_NAMES, DELTA1, LCOG, N_AUG, VehicleParams

L_COG_MIN = 0.5
DELTA1_MAX = np.radians(30.0)
L_COG_PRIOR = 5.0
N_SOFT = 5
DEFAULT_C = 1e4

# per-step process noise standard deviations at dt = 0.01 s
DEFAULT_Q_STD = {
    "v_y1": 0.01, "psi1_dot": 0.002, "v_y2": 0.01, "psi2_dot": 0.002, "theta": 3e-4,
    "F_y11": 200.0, "F_y12": 200.0, "F_y21": 200.0, "F_y22": 200.0, "F_y23": 200.0,
    "delta1": 1e-3, "l_cog": 1e-4,
}
DEFAULT_P0_STD = {
    "v_y1": 0.1, "psi1_dot": 0.01, "v_y2": 0.1, "psi2_dot": 0.01, "theta": 0.01,
    "F_y11": 1000.0, "F_y12": 1000.0, "F_y21": 1000.0, "F_y22": 1000.0, "F_y23": 1000.0,
    "delta1": 0.01, "l_cog": 0.5,
}
# soft-measurement noise std used before tuning: psi1_dot, theta, F_y21, F_y23, delta1
DEFAULT_SOFT_STD = (0.01, 0.01, 2000.0, 2000.0, 0.01)
QUANTITIES = ("theta", "F_y21", "F_y23", "delta1")


def default_Q():
    return np.diag([DEFAULT_Q_STD[n] ** 2 for n in AUG_STATE_NAMES])


def initial_belief(l_cog: float = L_COG_PRIOR) -> ekf.GaussianBelief:
    mean = np.zeros(N_AUG)
    mean[LCOG] = l_cog
    return ekf.GaussianBelief(mean, np.diag([DEFAULT_P0_STD[n] ** 2 for n in AUG_STATE_NAMES]))


@dataclass
class NoiseConfig:
    Q: np.ndarray
    R0: np.ndarray

    def __post_init__(self):
        self.Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        self.R0 = np.atleast_2d(np.asarray(self.R0, dtype=float))
        for name, M in (("Q", self.Q), ("R0", self.R0)):
            if M.shape[0] != M.shape[1] or not np.allclose(M, M.T):
                raise ConfigurationError(f"{name} must be a symmetric square matrix")
            if np.linalg.eigvalsh(M)[0] < -1e-12 * max(1.0, np.abs(M).max()):
                raise ConfigurationError(f"{name} must be positive semidefinite")
        if self.Q.shape != (N_AUG, N_AUG):
            raise ConfigurationError(f"Q must be {N_AUG}x{N_AUG}")
        if not (self.Q[DELTA1, DELTA1] > 0 and self.Q[LCOG, LCOG] > 0):
            raise ConfigurationError("random-walk variances of delta1 and l_cog must be > 0")


def vehicle_filter_model(params: VehicleParams, mode: str = "ekf", dt: float = vehicle.DT) -> ekf.FilterModel:
    C = vehicle.output_matrix(mode)
    hi = params.l_Agg

    def clamp(x):
        x = x.copy()
        x[LCOG] = min(max(x[LCOG], L_COG_MIN), hi)
        x[DELTA1] = min(max(x[DELTA1], -DELTA1_MAX), DELTA1_MAX)
        return x

    return ekf.FilterModel(
        transition=lambda X, u: vehicle.augmented_transition(X, u, params, dt),
        measure=lambda x: vehicle.measurement(x, mode),
        output_jacobian=lambda x: C,
        postprocess=clamp,
    )


def scale_measurement_covariance(R0, tau, c, scale_hard: bool = False):
    """Inflate ``R0`` by ``c (tau - 1)^2 + 1``.

    With ``scale_hard=False`` only the soft-measurement block (all but the
    first row/column) is scaled; the physical yaw-rate sensor keeps its noise.
    """
    if not 0.0 <= tau <= 1.0:
        raise DomainError(f"tau must lie in [0, 1], got {tau}")
    factor = c * (tau - 1.0) ** 2 + 1.0
    R0 = np.asarray(R0, dtype=float)
    if scale_hard:
        return factor * R0
    s = np.full(R0.shape[0], np.sqrt(factor))
    s[0] = 1.0
    return R0 * np.outer(s, s)


@dataclass
class Trace:
    """Per-step filter output of one run."""

    method: str
    time: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    soft: np.ndarray | None = None
    tau: np.ndarray | None = None
    scale: np.ndarray | None = None
    warmup: int = 0
    innovations: np.ndarray | None = None
    innovation_var: np.ndarray | None = None

    def estimate(self, quantity: str):
        if self.method == "ann":
            return self.soft[:, OUTPUT_CHANNELS.index(quantity)]
        return self.mean[:, AUG_STATE_NAMES.index(quantity)]

    def to_csv(self) -> str:
        n = len(self.time)
        cols = {"time": self.time}
        if self.mean is not None:
            cols.update({f"mean.{s}": self.mean[:, i] for i, s in enumerate(AUG_STATE_NAMES)})
            cols.update({f"var.{s}": self.var[:, i] for i, s in enumerate(AUG_STATE_NAMES)})
        if self.soft is not None:
            cols.update({f"soft.{s}": self.soft[:, i] for i, s in enumerate(OUTPUT_CHANNELS)})
        cols["tau"] = self.tau if self.tau is not None else np.full(n, np.nan)
        cols["scale"] = self.scale if self.scale is not None else np.full(n, np.nan)
        buf = io.StringIO()
        buf.write(f"# method = {self.method}\n# warmup = {self.warmup}\n")
        buf.write(",".join(cols) + "\n")
        np.savetxt(buf, np.column_stack(list(cols.values())), fmt="%.9g", delimiter=",")
        return buf.getvalue()


def _run_filter(ds: ManeuverDataset, model, Q, R_of_step, y_of_step, belief=None, on_step=None):
    n = len(ds)
    u = ds.filter_inputs
    belief = belief or initial_belief()
    means, variances = np.empty((n, N_AUG)), np.empty((n, N_AUG))
    innov = []
    for k in range(n):
        if k:
            belief = ekf.predict(model, belief, u[k - 1], Q)
        if on_step is not None:
            on_step(k)
        y = y_of_step(k)
        R = R_of_step(k)
        innov.append(y - model.measure(belief.mean))
        belief = ekf.correct(model, belief, y, R)
        means[k], variances[k] = belief.mean, belief.variances
    return means, variances, np.asarray(innov)


def run_ekf(ds: ManeuverDataset, params: VehicleParams, noise: NoiseConfig, belief=None) -> Trace:
    """Model-only EKF with the semitrailer yaw rate as single measurement."""
    model = vehicle_filter_model(params, "ekf", ds.dt)
    psi2 = ds["meas.psi2_dot"]
    R = noise.R0[:1, :1]
    means, variances, innov = _run_filter(ds, model, noise.Q, lambda k: R, lambda k: psi2[k:k + 1], belief)
    return Trace("ekf", ds["time"], means, variances, innovations=innov)


def run_ann(ds: ManeuverDataset, bank: SoftSensorBank) -> Trace:
    """Soft sensor alone, held between its (decimated) sample instants."""
    soft = _soft_outputs(ds, bank)
    return Trace("ann", ds["time"], None, None, soft=soft, warmup=bank.feedback_delays * bank.decimation)


def _soft_outputs(ds, bank):
    n = len(ds)
    U = ds.ann_inputs
    dec = bank.decimation
    fresh = bank.predict_sequence(U[::dec])
    return np.repeat(fresh, dec, axis=0)[:n]


@dataclass
class HekfConfig:
    Q: np.ndarray
    R0: np.ndarray  # 6x6: psi2_dot, then the soft channels
    bank: SoftSensorBank
    confidence: conf.ConfidenceModel
    c: float = DEFAULT_C
    scale_hard: bool = False
    # re-apply the held soft output at every filter step instead of only at
    # the steps where the soft sensor produced it
    hold_soft: bool = False

    def __post_init__(self):
        NoiseConfig(self.Q, self.R0)
        if self.R0.shape != (1 + N_SOFT, 1 + N_SOFT):
            raise ConfigurationError("R0 must be 6x6")
        if not self.c > 0:
            raise ConfigurationError("c must be > 0")


@dataclass
class HekfStepRecord:
    time: float
    belief: ekf.GaussianBelief
    y_ann: np.ndarray
    tau: float
    R_diag: np.ndarray


class HybridEKF:
    """Streaming hybrid filter for one maneuver."""

    def __init__(self, params: VehicleParams, config: HekfConfig, dt: float = vehicle.DT,
                 tau_override: float | None = None, belief=None):
        self.params = params
        self.config = config
        self.dt = dt
        self.model = vehicle_filter_model(params, "hekf", dt)
        self.hard_model = vehicle_filter_model(params, "ekf", dt)
        self.tau_override = tau_override
        self.belief = belief or initial_belief()
        self.k = 0
        self._u_prev = None
        self._y_ann = np.zeros(N_SOFT)
        self._tau = 0.0
        config.bank.reset()

    def step(self, time: float, sample) -> HekfStepRecord:
        """Process one sensor sample ``[v_x2, F_z2, psi2_dot]``."""
        sample = np.asarray(sample, dtype=float)
        cfg = self.config
        stage = "soft sensor"
        try:
            fresh = self.k % cfg.bank.decimation == 0
            if fresh:
                self._y_ann = cfg.bank.predict_step(sample)
                stage = "confidence"
                if cfg.bank.warming_up:
                    self._tau = 0.0
                elif self.tau_override is not None:
                    self._tau = float(self.tau_override)
                else:
                    self._tau = conf.confidence(cfg.confidence, conf.mean_knn_distance(cfg.confidence, sample))
            stage = "covariance scaling"
            R = scale_measurement_covariance(cfg.R0, self._tau, cfg.c, cfg.scale_hard)
            stage = "predict"
            if self._u_prev is not None:
                self.belief = ekf.predict(self.model, self.belief, self._u_prev, cfg.Q)
            stage = "correct"
            y = np.concatenate([sample[2:3], self._y_ann])
            self.innovation = y - self.model.measure(self.belief.mean)
            if fresh or cfg.hold_soft:
                self.belief = ekf.correct(self.model, self.belief, y, R)
            else:
                self.innovation[1:] = np.nan
                self.belief = ekf.correct(self.hard_model, self.belief, y[:1], R[:1, :1])
        except (DomainError, NumericalFailure) as exc:
            raise type(exc)(f"HEKF step {self.k} ({stage}): {exc}") from exc
        self._u_prev = sample[:2]
        self.k += 1
        return HekfStepRecord(time, self.belief, self._y_ann.copy(), self._tau, np.diag(R).copy())


def run_hekf(ds: ManeuverDataset, params: VehicleParams, config: HekfConfig,
             tau_override: float | None = None, belief=None) -> Trace:
    filt = HybridEKF(params, config, ds.dt, tau_override, belief)
    n = len(ds)
    U = ds.ann_inputs
    means, variances = np.empty((n, N_AUG)), np.empty((n, N_AUG))
    soft, tau, scale = np.empty((n, N_SOFT)), np.empty(n), np.empty(n)
    innov = np.empty((n, 1 + N_SOFT))
    t = ds["time"]
    for k in range(n):
        rec = filt.step(t[k], U[k])
        means[k], variances[k] = rec.belief.mean, rec.belief.variances
        soft[k], tau[k] = rec.y_ann, rec.tau
        scale[k] = config.c * (rec.tau - 1.0) ** 2 + 1.0
        innov[k] = filt.innovation
    warm = config.bank.feedback_delays * config.bank.decimation
    return Trace("hekf", t, means, variances, soft, tau, scale, warm, innovations=innov)


# -- tuning ------------------------------------------------------------------

def normalized_rmse(trace: Trace, ds: ManeuverDataset, quantities=QUANTITIES, skip: int = 0):
    out = {}
    for q in quantities:
        truth = ds[f"true.{q}"][skip:]
        err = trace.estimate(q)[skip:] - truth
        out[q] = float(np.sqrt(np.mean(err**2)) / max(np.std(truth), 1e-12))
    return out


def lag1_autocorrelation(x):
    x = np.asarray(x, dtype=float) - np.mean(x)
    denom = x @ x
    return float(x[1:] @ x[:-1] / denom) if denom > 0 else 0.0


@dataclass
class TuningResult:
    Q: np.ndarray
    R0: np.ndarray
    q_scale: float
    r_scale: float
    table: list = field(default_factory=list)  # (q_scale, r_scale, score, tracking, whiteness, ok)


def tune_full_confidence(template: HekfConfig, params: VehicleParams, ds: ManeuverDataset,
                         q_scales=(1.0, 3.0, 10.0), r_scales=(0.1, 0.3, 1.0),
                         tracking_bound: float = 0.5, whiteness_bound: float = 0.98) -> TuningResult:
    """Grid search over Q and soft-R0 scalings with every soft measurement trusted.

    A candidate is admissible when the filter runs without numerical failure,
    the posterior follows the soft measurements (normalised RMS gap below
    ``tracking_bound``) and the normalised yaw-rate innovation is not
    degenerate (lag-1 autocorrelation below ``whiteness_bound``).  Among
    admissible candidates the lowest mean normalised ground-truth RMSE wins.
    """
    table, best = [], None
    for qs in q_scales:
        for rs in r_scales:
            R0 = template.R0.copy()
            R0[1:, 1:] *= rs
            cand = replace(template, Q=template.Q * qs, R0=R0)
            try:
                tr = run_hekf(ds, params, cand, tau_override=1.0)
            except (NumericalFailure, DomainError):
                table.append((qs, rs, np.inf, np.inf, np.nan, False))
                continue
            skip = tr.warmup
            idx = [AUG_STATE_NAMES.index(ch) for ch in OUTPUT_CHANNELS]
            steps = np.arange(len(tr.time))
            at = (steps >= skip) & (steps % cand.bank.decimation == 0)
            gap = tr.mean[at][:, idx] - tr.soft[at]
            tracking = float(np.mean(np.sqrt(np.mean(gap**2, axis=0)) / np.maximum(tr.soft[at].std(axis=0), 1e-12)))
            white = lag1_autocorrelation(tr.innovations[skip:, 0])
            score = float(np.mean(list(normalized_rmse(tr, ds, skip=skip).values())))
            ok = tracking < tracking_bound and abs(white) < whiteness_bound
            table.append((qs, rs, score, tracking, white, ok))
            if ok and (best is None or score < best[0]):
                best = (score, qs, rs, cand)
    if best is None:
        raise TuningFailure("no stable full-confidence configuration found")
    _, qs, rs, cand = best
    return TuningResult(cand.Q, cand.R0, qs, rs, table)


def tune_process_noise(ds: ManeuverDataset, params: VehicleParams, noise: NoiseConfig,
                       delta1_std=(1e-3, 3e-3, 1e-2), scales=(0.3, 1.0, 3.0), skip: int = 0):
    """Grid-tune ``Q`` so the EKF's average NEES is closest to the state dimension.

    NEES uses the diagonal of the posterior covariance, since only the
    variances are recorded per step.

    The steering random walk is searched separately from a common scaling of
    all other entries.  Returns ``(Q, table)`` with rows
    ``(delta1_std, scale, mean NEES)``; failed runs have NEES ``inf``.
    """
    truth = ds.truth
    table, best = [], None
    for d_std in delta1_std:
        for s in scales:
            Q = noise.Q * s
            Q[DELTA1, DELTA1] = d_std**2
            try:
                tr = run_ekf(ds, params, NoiseConfig(Q, noise.R0))
            except (NumericalFailure, DomainError):
                table.append((d_std, s, np.inf))
                continue
            value = float(np.mean([ekf.nees(tr.mean[k] - truth[k], np.diag(tr.var[k]))
                                   for k in range(skip, len(ds))]))
            table.append((d_std, s, value))
            gap = abs(np.log(value / N_AUG))
            if best is None or gap < best[0]:
                best = (gap, Q)
    if best is None:
        raise TuningFailure("every process-noise candidate failed")
    return best[1], table
