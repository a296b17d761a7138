"""Nonlinear single-track model of a truck-semitrailer combination.

Two planar rigid bodies (truck ``1``, semitrailer ``2``) are coupled at the
king pin by a lateral constraint force.  Each axle carries a lateral tire
force that relaxes towards a Magic Formula steady-state value.  The state is

    [v_y1, psi1_dot, v_y2, psi2_dot, theta, F_y11, F_y12, F_y21, F_y22, F_y23]

and the inputs are the truck steering angle ``delta1``, the semitrailer
longitudinal speed ``v_x2``, the summed semitrailer vertical axle force
``F_z2`` and the semitrailer centre-of-gravity distance ``l_cog`` (measured
rearwards from the king pin).

Conventions: ISO axes (x forward, y left, yaw counter-clockwise), steering
positive to the left, slip angle = velocity direction minus wheel heading.
A tire force therefore opposes its slip: the relaxation target of an axle
with slip ``alpha`` is ``mftm_steady_force(-alpha, ...)``.

Coupling: small-angle form.  Both bodies share the longitudinal speed
``v_x2``, the king-pin force acts laterally on both bodies, and the
velocity constraint at the king pin reads

    v_y1 - l_c1 * psi1_dot - v_x2 * theta = v_y2 + l_cog * psi2_dot.

It is enforced at acceleration level with Baumgarte stabilisation, so states
that violate it (e.g. after a Kalman correction) relax back onto it.

All functions broadcast over leading axes of the state and over array-valued
parameters, which is what the batched Jacobian and the particle swarm rely on.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from typing import NamedTuple

import numpy as np

from .errors import ConfigurationError, DomainError
from .kvfile import read_kv, to_float, write_kv

G = 9.81
DT = 0.01
# Baumgarte rate for the king-pin velocity constraint (1/s)
CONSTRAINT_RATE = 10.0

STATE_NAMES = (
    "v_y1", "psi1_dot", "v_y2", "psi2_dot", "theta",
    "F_y11", "F_y12", "F_y21", "F_y22", "F_y23",
)
AUG_STATE_NAMES = STATE_NAMES + ("delta1", "l_cog")
N_SSM = len(STATE_NAMES)
N_AUG = len(AUG_STATE_NAMES)

(VY1, R1, VY2, R2, THETA,
 FY11, FY12, FY21, FY22, FY23, DELTA1, LCOG) = range(N_AUG)

AXLES = ("11", "12", "21", "22", "23")

EKF_OUTPUTS = (R2,)
HEKF_OUTPUTS = (R2, R1, THETA, FY21, FY23, DELTA1)


def _positive(name, value):
    if not np.all(np.asarray(value) > 0):
        raise ConfigurationError(f"{name} must be > 0, got {value}")


@dataclass(frozen=True)
class TireParams:
    """Magic Formula lateral tire parameters of one axle.

    ``D`` is dimensionless; the peak force is ``mu_max * F_z``.  ``c1`` is the
    load-normalised cornering stiffness scale (1/rad) and ``c2`` the load at
    which the stiffness curve saturates (N).
    """

    C: float = 1.4
    D: float = 1.0
    c1: float = 7.0
    c2: float = 45e3
    l_relax: float = 0.6

    def __post_init__(self):
        for f in fields(self):
            _positive(f.name, getattr(self, f.name))


def _default_tires():
    front = TireParams(C=1.4, D=1.0, c1=7.0, c2=40e3, l_relax=0.6)
    rear = TireParams(C=1.4, D=1.0, c1=7.5, c2=60e3, l_relax=0.7)
    trailer = TireParams(C=1.35, D=1.0, c1=7.0, c2=45e3, l_relax=0.55)
    return (front, rear, trailer, trailer, trailer)


@dataclass(frozen=True)
class VehicleParams:
    """Geometry, inertia and tire data of the combination.

    Truck axle positions ``l11`` (ahead) and ``l12`` (behind) and the king-pin
    offset ``l_c1`` (behind) are measured from the truck centre of gravity.
    Semitrailer axle positions ``l21..l23`` and ``l_Agg`` (running-gear centre)
    are measured rearwards from the king pin.
    """

    m1: float = 8000.0
    J1: float = 3.5e4
    J2: float = 2.5e5
    l11: float = 1.3
    l12: float = 2.3
    l_c1: float = 1.8
    l21: float = 6.4
    l22: float = 7.7
    l23: float = 9.0
    l_Agg: float = 7.7
    mu_max: float = 0.9
    g: float = G
    F_z11: float = 65e3
    F_z12: float = 110e3
    tires: tuple = field(default_factory=_default_tires)

    def __post_init__(self):
        for name in ("m1", "J1", "J2", "l11", "l12", "l_c1", "l21", "l22", "l23",
                     "l_Agg", "g", "F_z11", "F_z12"):
            _positive(name, getattr(self, name))
        mu = np.asarray(self.mu_max)
        if not np.all((mu > 0) & (mu <= 2)):
            raise ConfigurationError(f"mu_max must lie in (0, 2], got {self.mu_max}")
        if len(self.tires) != len(AXLES):
            raise ConfigurationError(f"expected {len(AXLES)} TireParams, got {len(self.tires)}")

    @property
    def trailer_axles(self):
        return (self.l21, self.l22, self.l23)


class ModelInput(NamedTuple):
    delta1: float
    v_x2: float
    F_z2: float
    l_cog: float


# -- parameter files ---------------------------------------------------------

_SCALAR_KEYS = tuple(f.name for f in fields(VehicleParams) if f.name != "tires")
_TIRE_KEYS = tuple(f"tire{a}.{f.name}" for a in AXLES for f in fields(TireParams))
PARAM_KEYS = _SCALAR_KEYS + _TIRE_KEYS


def params_to_dict(params: VehicleParams) -> dict[str, float]:
    out = {k: float(getattr(params, k)) for k in _SCALAR_KEYS}
    for axle, tire in zip(AXLES, params.tires):
        for f in fields(TireParams):
            out[f"tire{axle}.{f.name}"] = float(getattr(tire, f.name))
    return out


def params_from_dict(values, base: VehicleParams | None = None) -> VehicleParams:
    """Build parameters from a flat mapping; missing keys keep ``base`` values."""
    base = base or VehicleParams()
    unknown = set(values) - set(PARAM_KEYS)
    if unknown:
        raise ConfigurationError(f"unknown parameter keys: {sorted(unknown)}")
    flat = params_to_dict(base)
    flat.update({k: to_float(k, v) if isinstance(v, str) else float(v) for k, v in values.items()})
    tires = tuple(
        TireParams(**{f.name: flat[f"tire{a}.{f.name}"] for f in fields(TireParams)})
        for a in AXLES
    )
    return VehicleParams(**{k: flat[k] for k in _SCALAR_KEYS}, tires=tires)


def load_params(path, base: VehicleParams | None = None) -> VehicleParams:
    return params_from_dict(read_kv(path, PARAM_KEYS), base)


def save_params(path, params: VehicleParams, header: str | None = None) -> None:
    write_kv(path, params_to_dict(params), header)


# -- static relations --------------------------------------------------------

def vertical_axle_forces(F_z2):
    """Split the summed semitrailer axle load equally over the three axles.

    Returns an array with a trailing axis of length 3.
    """
    F_z2 = np.asarray(F_z2, dtype=float)
    if np.any(F_z2 < 0):
        raise DomainError(f"F_z2 must be >= 0, got {F_z2}")
    per_axle = F_z2 / 3.0
    return np.stack([per_axle, per_axle, per_axle], axis=-1)


def semitrailer_mass(F_z2, l_cog, l_Agg, g=G):
    """Semitrailer mass (kg) from the static moment balance about the king pin."""
    l_cog = np.asarray(l_cog, dtype=float)
    if np.any(l_cog <= 0):
        raise DomainError(f"l_cog must be > 0, got {l_cog}")
    return l_Agg * np.asarray(F_z2, dtype=float) / (l_cog * g)


# -- tire model --------------------------------------------------------------

def _mftm(alpha, F_z, tire, mu_max):
    B = tire.c1 * np.sin(2.0 * np.arctan(F_z / tire.c2)) / (tire.C * tire.D)
    return mu_max * F_z * np.sin(tire.C * np.arctan(B * np.tan(alpha)))


def mftm_steady_force(alpha, F_z, tire: TireParams, mu_max):
    """Steady-state Magic Formula lateral force (N) at slip angle ``alpha``."""
    alpha = np.asarray(alpha, dtype=float)
    F_z = np.asarray(F_z, dtype=float)
    if np.any(np.abs(alpha) >= np.pi / 2):
        raise DomainError("|alpha| must be < pi/2")
    if np.any(F_z < 0):
        raise DomainError("F_z must be >= 0")
    return _mftm(alpha, F_z, tire, mu_max)


def tire_force_derivative(F_y, alpha, F_z, v_x, tire: TireParams, mu_max):
    """First-order relaxation of the lateral force towards its steady value."""
    v_x = np.asarray(v_x, dtype=float)
    if np.any(v_x <= 0):
        raise DomainError("v_x must be > 0")
    return v_x / tire.l_relax * (mftm_steady_force(alpha, F_z, tire, mu_max) - F_y)


# -- rigid-body dynamics -----------------------------------------------------

def _slip_angles(x, delta1, v_x, l_cog, p):
    vy1, r1, vy2, r2 = x[..., VY1], x[..., R1], x[..., VY2], x[..., R2]
    a11 = np.arctan((vy1 + p.l11 * r1) / v_x) - delta1
    a12 = np.arctan((vy1 - p.l12 * r1) / v_x)
    a2 = [np.arctan((vy2 - (l2j - l_cog) * r2) / v_x) for l2j in p.trailer_axles]
    return np.stack(np.broadcast_arrays(a11, a12, *a2), axis=-1)


def _unpack_input(inp):
    return tuple(np.asarray(v, dtype=float) for v in inp)


def slip_angles(state, inp, params: VehicleParams):
    """Slip angles (rad) of axles 11, 12, 21, 22, 23; trailing axis of length 5."""
    delta1, v_x, _, l_cog = _unpack_input(inp)
    if np.any(v_x <= 0):
        raise DomainError("v_x2 must be > 0")
    return _slip_angles(np.asarray(state, dtype=float), delta1, v_x, l_cog, params)


def _dynamics(x, delta1, v_x, F_z2, l_cog, p: VehicleParams):
    vy1, r1, vy2, r2, theta = (x[..., i] for i in (VY1, R1, VY2, R2, THETA))
    forces = [x[..., i] for i in (FY11, FY12, FY21, FY22, FY23)]
    alpha = _slip_angles(x, delta1, v_x, l_cog, p)
    f_z = (p.F_z11, p.F_z12, F_z2 / 3.0, F_z2 / 3.0, F_z2 / 3.0)
    dF = [
        v_x / tire.l_relax * (_mftm(-alpha[..., j], f_z[j], tire, p.mu_max) - forces[j])
        for j, tire in enumerate(p.tires)
    ]

    m2 = p.l_Agg * F_z2 / (l_cog * p.g)
    cos_d = np.cos(delta1)
    F11, F12, F21, F22, F23 = forces
    # generalized forces without the king-pin reaction
    q1 = F11 * cos_d + F12 - p.m1 * v_x * r1
    q2 = p.l11 * F11 * cos_d - p.l12 * F12
    q3 = F21 + F22 + F23 - m2 * v_x * r2
    q4 = -sum((l2j - l_cog) * F for l2j, F in zip(p.trailer_axles, (F21, F22, F23)))

    violation = vy1 - p.l_c1 * r1 - v_x * theta - vy2 - l_cog * r2
    rhs = v_x * (r2 - r1) - CONSTRAINT_RATE * violation
    compliance = 1.0 / p.m1 + p.l_c1**2 / p.J1 + 1.0 / m2 + l_cog**2 / p.J2
    F_c = (rhs - q1 / p.m1 + p.l_c1 * q2 / p.J1 + q3 / m2 + l_cog * q4 / p.J2) / compliance

    d = [
        (q1 + F_c) / p.m1,
        (q2 - p.l_c1 * F_c) / p.J1,
        (q3 - F_c) / m2,
        (q4 - l_cog * F_c) / p.J2,
        r2 - r1,
        *dF,
    ]
    return np.stack(np.broadcast_arrays(*d), axis=-1)


def _validate_input(delta1, v_x, F_z2, l_cog):
    if np.any(~(v_x > 0)):
        raise DomainError("v_x2 must be > 0 (model is singular at standstill)")
    if np.any(~(F_z2 > 0)):
        raise DomainError("F_z2 must be > 0")
    if np.any(~(l_cog > 0)):
        raise DomainError("l_cog must be > 0")
    if np.any(np.abs(delta1) >= np.pi / 2):
        raise DomainError("|delta1| must be < pi/2")


def continuous_dynamics(state, inp, params: VehicleParams, validate: bool = True):
    """Time derivative of the 10-element single-track state.

    ``inp`` is a :class:`ModelInput` (or any 4-sequence) whose entries may be
    arrays broadcasting against ``state[..., 0]``.
    """
    x = np.asarray(state, dtype=float)
    delta1, v_x, F_z2, l_cog = _unpack_input(inp)
    if validate:
        _validate_input(delta1, v_x, F_z2, l_cog)
    return _dynamics(x, delta1, v_x, F_z2, l_cog, params)


def rk4_step(f, x, dt):
    """One classical Runge-Kutta step of ``dx/dt = f(x)``."""
    k1 = f(x)
    k2 = f(x + 0.5 * dt * k1)
    k3 = f(x + 0.5 * dt * k2)
    k4 = f(x + dt * k3)
    return x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def discretize_step(state, inp, params: VehicleParams, dt: float = DT, validate: bool = True):
    """Advance the state by ``dt`` with RK4, holding the input constant."""
    if dt <= 0:
        raise DomainError("dt must be > 0")
    delta1, v_x, F_z2, l_cog = _unpack_input(inp)
    if validate:
        _validate_input(delta1, v_x, F_z2, l_cog)
    return rk4_step(lambda x: _dynamics(x, delta1, v_x, F_z2, l_cog, params),
                    np.asarray(state, dtype=float), dt)


def simulate(x0, delta1, v_x2, F_z2, l_cog, params: VehicleParams, dt: float = DT,
             validate: bool = True):
    """Open-loop simulation with zero-order-hold inputs.

    Input sequences have length ``N`` along axis 0 (optionally followed by batch
    axes matching ``x0``).  Returns the ``N`` states visited, starting at ``x0``;
    ``out[k + 1]`` is the RK4 successor of ``out[k]`` under input ``k``.
    """
    seqs = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (delta1, v_x2, F_z2, l_cog)))
    n = seqs[0].shape[0]
    x = np.asarray(x0, dtype=float)
    out = np.empty((n,) + np.broadcast_shapes(x.shape, seqs[0].shape[1:] + (N_SSM,)))
    out[0] = x
    for k in range(n - 1):
        x = discretize_step(x, tuple(s[k] for s in seqs), params, dt, validate)
        out[k + 1] = x
    return out


def augmented_transition(x, u, params: VehicleParams, dt: float = DT, validate: bool = True):
    """Filter state transition: RK4 on the physical states, random walks held.

    ``x`` has 12 entries (physical states, ``delta1``, ``l_cog``); ``u`` is
    ``[v_x2, F_z2]``.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    inp = ModelInput(x[..., DELTA1], u[..., 0], u[..., 1], x[..., LCOG])
    out = x.copy()
    out[..., :N_SSM] = discretize_step(x[..., :N_SSM], inp, params, dt, validate)
    return out


# -- outputs -----------------------------------------------------------------

def output_indices(mode: str = "ekf"):
    if mode == "ekf":
        return EKF_OUTPUTS
    if mode == "hekf":
        return HEKF_OUTPUTS
    raise ConfigurationError(f"unknown measurement mode {mode!r}")


def measurement(state, mode: str = "ekf"):
    """Select measured components of the 12-element augmented state."""
    return np.asarray(state, dtype=float)[..., list(output_indices(mode))]


def output_matrix(mode: str = "ekf"):
    idx = output_indices(mode)
    C = np.zeros((len(idx), N_AUG))
    C[np.arange(len(idx)), idx] = 1.0
    return C


def with_tires(params: VehicleParams, **axle_tires) -> VehicleParams:
    """Return a copy with selected axles' tires replaced, e.g. ``with_tires(p, t21=...)``."""
    tires = list(params.tires)
    for key, tire in axle_tires.items():
        tires[AXLES.index(key.lstrip("t"))] = tire
    return replace(params, tires=tuple(tires))
