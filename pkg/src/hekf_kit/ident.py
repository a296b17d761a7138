"""Vehicle parameter identification by particle swarm optimisation.

The free parameters are the truck mass and both yaw inertias plus, for each
of the three tire groups (truck front, truck rear, semitrailer), the Magic
Formula coefficients ``C``, ``c1``, ``c2`` and the relaxation length.  The
peak factor ``D`` only enters as ``c1 / D`` and ``mu_max * D`` and is
therefore held fixed.

Cost: mean normalised MSE between simulated and recorded channels
``psi1_dot, psi2_dot, theta, F_y21, F_y23`` with the recorded steering angle,
speed, axle load and centre-of-gravity position as inputs.  The whole swarm
is simulated as one batch.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field, replace

import numpy as np

from . import kvfile, vehicle
from .datagen import ManeuverDataset
from .errors import ConfigurationError, IdentificationFailure
from .vehicle import TireParams, VehicleParams

GROUPS = {"front": (0,), "rear": (1,), "trailer": (2, 3, 4)}
TIRE_FIELDS = ("C", "c1", "c2", "l_relax")
PARAM_NAMES = ("m1", "J1", "J2") + tuple(f"{g}.{f}" for g in GROUPS for f in TIRE_FIELDS)
COST_CHANNELS = ("psi1_dot", "psi2_dot", "theta", "F_y21", "F_y23")
PENALTY = 1e6


@dataclass(frozen=True)
class PsoConfig:
    swarm_size: int = 40
    iterations: int = 300
    inertia: float = 0.729
    cognitive: float = 1.494
    social: float = 1.494
    velocity_fraction: float = 0.2  # velocity clamp as fraction of the bound width
    tolerance: float = 0.0  # stop once the best cost falls below this

    def __post_init__(self):
        if self.swarm_size < 2 or self.iterations < 1:
            raise ConfigurationError("need swarm_size >= 2 and iterations >= 1")
        if not 0 < self.velocity_fraction <= 1:
            raise ConfigurationError("velocity_fraction must lie in (0, 1]")


@dataclass
class PsoResult:
    x: np.ndarray
    cost: float
    history: list = field(default_factory=list)  # best cost after each iteration
    evaluations: int = 0


def pso(cost, lower, upper, config: PsoConfig = PsoConfig(), seed: int = 0, x0=None) -> PsoResult:
    """Global-best particle swarm minimisation inside a box.

    ``cost`` maps a ``(P, d)`` array of candidates to ``P`` costs.  Particles
    leaving the box are reflected back and their velocity component reversed.
    ``x0`` (optional) seeds the first particle.
    """
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    if lower.shape != upper.shape or np.any(~(upper > lower)):
        raise ConfigurationError("bounds need upper > lower elementwise")
    rng = np.random.default_rng(seed)
    n, d = config.swarm_size, lower.size
    width = upper - lower
    vmax = config.velocity_fraction * width
    x = lower + rng.random((n, d)) * width
    if x0 is not None:
        x[0] = np.clip(x0, lower, upper)
    v = (rng.random((n, d)) - 0.5) * vmax
    f = _safe_cost(cost, x)
    pbest, pcost = x.copy(), f.copy()
    g = int(np.argmin(pcost))
    history, evals = [], n
    for _ in range(config.iterations):
        r1, r2 = rng.random((n, d)), rng.random((n, d))
        v = (config.inertia * v + config.cognitive * r1 * (pbest - x)
             + config.social * r2 * (pbest[g] - x))
        v = np.clip(v, -vmax, vmax)
        x = x + v
        low, high = x < lower, x > upper
        x = np.where(low, 2 * lower - x, x)
        x = np.where(high, 2 * upper - x, x)
        v = np.where(low | high, -v, v)
        x = np.clip(x, lower, upper)
        f = _safe_cost(cost, x)
        evals += n
        better = f < pcost
        pbest[better], pcost[better] = x[better], f[better]
        g = int(np.argmin(pcost))
        history.append(float(pcost[g]))
        if pcost[g] < config.tolerance:
            break
    return PsoResult(pbest[g].copy(), float(pcost[g]), history, evals)


def _safe_cost(cost, x):
    with np.errstate(all="ignore"):
        f = np.asarray(cost(x), dtype=float).reshape(len(x))
    return np.where(np.isfinite(f), f, PENALTY)


# -- parameter vector --------------------------------------------------------

def params_to_vector(params: VehicleParams) -> np.ndarray:
    vals = [params.m1, params.J1, params.J2]
    for idx in GROUPS.values():
        tire = params.tires[idx[0]]
        vals += [getattr(tire, f) for f in TIRE_FIELDS]
    return np.array(vals, dtype=float)


def vector_to_params(theta, base: VehicleParams = VehicleParams()) -> VehicleParams:
    """Build parameters from ``(15,)`` or a batch ``(P, 15)``.

    A batch yields array-valued fields of shape ``(P, 1)``, which broadcast
    against simulation batches of shape ``(P, M)``.
    """
    theta = np.asarray(theta, dtype=float)
    if theta.shape[-1] != len(PARAM_NAMES):
        raise ConfigurationError(f"expected {len(PARAM_NAMES)} parameters, got {theta.shape[-1]}")
    col = (lambda j: theta[:, j:j + 1]) if theta.ndim == 2 else (lambda j: float(theta[j]))
    tires = list(base.tires)
    for gi, idx in enumerate(GROUPS.values()):
        values = {f: col(3 + 4 * gi + k) for k, f in enumerate(TIRE_FIELDS)}
        for i in idx:
            tires[i] = replace(base.tires[i], **values)
    return replace(base, m1=col(0), J1=col(1), J2=col(2), tires=tuple(tires))


def default_bounds(nominal: VehicleParams = VehicleParams(), rel: float = 0.3):
    x = params_to_vector(nominal)
    return x * (1 - rel), x * (1 + rel)


def read_bounds(path):
    """Bounds file: one ``name = lower, upper`` line per free parameter."""
    raw = kvfile.read_kv(path, PARAM_NAMES)
    missing = [n for n in PARAM_NAMES if n not in raw]
    if missing:
        raise ConfigurationError(f"bounds file lacks {missing}")
    lo, hi = [], []
    for name in PARAM_NAMES:
        parts = raw[name].split(",")
        if len(parts) != 2:
            raise ConfigurationError(f"{name}: expected 'lower, upper'")
        a, b = (kvfile.to_float(name, p) for p in parts)
        if not 0 < a < b:
            raise ConfigurationError(f"{name}: need 0 < lower < upper")
        lo.append(a)
        hi.append(b)
    return np.array(lo), np.array(hi)


def write_bounds(path, lower, upper):
    kvfile.write_kv(path, {n: f"{float(a)!r}, {float(b)!r}" for n, a, b in zip(PARAM_NAMES, lower, upper)},
                    header="identification bounds: name = lower, upper")


# -- cost --------------------------------------------------------------------

@dataclass
class IdentData:
    """Recorded maneuvers of equal length stacked along a batch axis."""

    delta1: np.ndarray  # (N, M)
    v_x2: np.ndarray
    F_z2: np.ndarray
    l_cog: np.ndarray
    targets: np.ndarray  # (N, M, 5) in COST_CHANNELS order
    dt: float

    @classmethod
    def from_datasets(cls, datasets, stride: int = 1):
        if not datasets:
            raise ConfigurationError("need at least one maneuver")
        n = min(len(ds) for ds in datasets)
        dt = datasets[0].dt
        if any(abs(ds.dt - dt) > 1e-12 for ds in datasets):
            raise ConfigurationError("maneuvers differ in sample period")

        def stack(col):
            return np.stack([ds[col][:n] for ds in datasets], axis=1)

        targets = np.stack([stack(f"true.{c}") for c in COST_CHANNELS], axis=-1)
        sl = slice(None, None, stride)
        return cls(stack("true.delta1")[sl], stack("in.v_x2")[sl], stack("in.F_z2")[sl],
                   stack("true.l_cog")[sl], targets[sl], dt * stride)


def nmse_cost(sim, targets):
    """Mean over channels of sum((sim - y)^2) / sum((y - mean y)^2).

    ``sim`` may carry leading batch axes ahead of the ``targets`` shape
    ``(N, M, C)``; the result then has those batch axes.
    """
    sim = np.asarray(sim, dtype=float)
    targets = np.asarray(targets, dtype=float)
    err = ((sim - targets) ** 2).sum(axis=(-3, -2))
    denom = ((targets - targets.mean(axis=(0, 1))) ** 2).sum(axis=(0, 1))
    if np.any(denom <= 0):
        raise ConfigurationError("a cost channel is constant")
    return (err / denom).mean(axis=-1)


_STATE_OF = {"psi1_dot": vehicle.R1, "psi2_dot": vehicle.R2, "theta": vehicle.THETA,
             "F_y21": vehicle.FY21, "F_y23": vehicle.FY23}


def simulate_batch(thetas, data: IdentData, base: VehicleParams = VehicleParams()):
    """Simulate all maneuvers for every candidate; returns ``(P, N, M, 5)``."""
    thetas = np.atleast_2d(thetas)
    P, M = len(thetas), data.delta1.shape[1]
    params = vector_to_params(thetas, base)
    x0 = np.zeros((P, M, vehicle.N_SSM))
    with np.errstate(all="ignore"):
        X = vehicle.simulate(x0, data.delta1[:, None, :], data.v_x2[:, None, :], data.F_z2[:, None, :],
                             data.l_cog[:, None, :], params, data.dt, validate=False)
    sel = X[..., [_STATE_OF[c] for c in COST_CHANNELS]]  # (N, P, M, 5)
    return np.moveaxis(sel, 1, 0)


def batch_cost(thetas, data: IdentData, base: VehicleParams = VehicleParams()):
    sim = simulate_batch(thetas, data, base)
    cost = nmse_cost(sim, data.targets)
    diverged = ~np.all(np.isfinite(sim), axis=(1, 2, 3)) | (np.abs(sim[..., 2]).max(axis=(1, 2)) > np.pi / 2)
    return np.where(diverged | ~np.isfinite(cost), PENALTY, cost)


@dataclass
class IdentResult:
    params: VehicleParams
    vector: np.ndarray
    cost: float
    history: list

    def history_csv(self) -> str:
        buf = io.StringIO()
        buf.write("iteration,best_cost\n")
        for i, c in enumerate(self.history, start=1):
            buf.write(f"{i},{c:.9g}\n")
        return buf.getvalue()


def identify(datasets, lower=None, upper=None, config: PsoConfig = PsoConfig(), seed: int = 0,
             base: VehicleParams = VehicleParams(), stride: int = 1) -> IdentResult:
    """Fit the free parameters to recorded maneuvers.

    Raises :class:`IdentificationFailure` when no candidate produced a
    finite, non-divergent simulation.
    """
    if lower is None or upper is None:
        lower, upper = default_bounds(base)
    data = IdentData.from_datasets(datasets, stride)
    x0 = np.clip(params_to_vector(base), lower, upper)
    res = pso(lambda X: batch_cost(X, data, base), lower, upper, config, seed, x0=x0)
    if not res.cost < PENALTY:
        raise IdentificationFailure("every particle diverged; check bounds and data")
    return IdentResult(vector_to_params(res.x, base), res.x, res.cost, res.history)


def save_result(result: IdentResult, params_path, history_path=None):
    vehicle.save_params(params_path, result.params, header=f"identified parameters, final NMSE {result.cost:.6g}")
    if history_path is not None:
        with open(history_path, "w") as fh:
            fh.write(result.history_csv())
