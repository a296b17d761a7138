"""Synthetic maneuvers, sensor simulation and CSV datasets.

A maneuver is simulated with a "truth" parameter set, typically the nominal
parameters with perturbed tire coefficients, so that a filter built on the
nominal model faces realistic model mismatch.
"""

from __future__ import annotations

import io
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import vehicle
from .errors import ConfigurationError, GenerationError
from .vehicle import AUG_STATE_NAMES, G, VehicleParams

MAX_STEER = np.radians(30.0)
SPEED_RANGE = (3.0, 22.0)
PROFILE_KINDS = ("sine", "step", "ramp")

TIME = "time"
TRUE_COLUMNS = tuple(f"true.{n}" for n in AUG_STATE_NAMES)
INPUT_COLUMNS = ("in.v_x2", "in.F_z2")
MEAS_COLUMNS = ("meas.v_x2", "meas.psi2_dot", "meas.F_z2")
COLUMNS = (TIME,) + TRUE_COLUMNS + INPUT_COLUMNS + MEAS_COLUMNS


@dataclass(frozen=True)
class TrailerBody:
    """Unladen semitrailer: mass and centre of gravity behind the king pin."""

    mass: float = 7000.0
    cog: float = 6.5


@dataclass(frozen=True)
class LoadingState:
    id: str
    payload: float  # kg
    position: float  # payload centre behind the king pin (m)

    def __post_init__(self):
        if self.payload < 0:
            raise ConfigurationError("payload must be >= 0")
        if not 0 < self.position < 13.6:
            raise ConfigurationError("payload position must lie on the trailer bed (0, 13.6) m")

    def mass(self, body: TrailerBody = TrailerBody()):
        return body.mass + self.payload

    def l_cog(self, body: TrailerBody = TrailerBody()):
        return (body.mass * body.cog + self.payload * self.position) / self.mass(body)

    def F_z2(self, l_Agg: float, body: TrailerBody = TrailerBody(), g: float = G):
        """Summed axle load from the static moment balance about the king pin."""
        return self.mass(body) * g * self.l_cog(body) / l_Agg


LOADING_STATES = {
    "full_load": LoadingState("full_load", 21600.0, 6.0),
    "partial_load_1": LoadingState("partial_load_1", 16000.0, 4.5),
    "no_load": LoadingState("no_load", 0.0, 6.5),
    # same payload as partial_load_1, moved forward: F_z2 falls between training clusters
    "partial_load_2": LoadingState("partial_load_2", 16000.0, 2.5),
}
TRAINING_LOADS = ("full_load", "partial_load_1", "no_load")
OOD_LOAD = "partial_load_2"


@dataclass(frozen=True)
class ManeuverSpec:
    """Steering and speed profile of one maneuver.

    ``sine``: ``amplitude * sin(2 pi f t)`` with ``f`` sweeping linearly from
    ``frequency`` to ``frequency_end``.  ``step``: steps alternating between
    ``+amplitude``, 0 and ``-amplitude`` every ``period / 2`` s.  ``ramp``:
    trapezoids rising at ``rate`` rad/s to ``+-amplitude``.  Steering is zero
    before ``t_start``; that straight segment doubles as the static segment
    for sensor-noise estimation.
    """

    kind: str
    amplitude: float
    speed_start: float
    speed_end: float
    duration: float
    loading: str
    seed: int = 0
    frequency: float = 0.2
    frequency_end: float | None = None
    period: float = 8.0
    rate: float = 0.05
    t_start: float = 1.0
    name: str = ""

    def __post_init__(self):
        if self.kind not in PROFILE_KINDS:
            raise ConfigurationError(f"kind must be one of {PROFILE_KINDS}")
        if not 0 <= self.amplitude <= MAX_STEER + 1e-12:
            raise ConfigurationError("steering amplitude must lie in [0, 30 deg]")
        for v in (self.speed_start, self.speed_end):
            if not SPEED_RANGE[0] <= v <= SPEED_RANGE[1]:
                raise ConfigurationError(f"speeds must lie in {SPEED_RANGE} m/s")
        if self.duration <= self.t_start:
            raise ConfigurationError("duration must exceed t_start")
        if self.loading not in LOADING_STATES:
            raise ConfigurationError(f"unknown loading state {self.loading!r}")

    @property
    def label(self):
        return self.name or f"{self.loading}_{self.kind}_{self.seed}"

    def steering(self, t):
        t = np.asarray(t, dtype=float)
        tau = np.maximum(t - self.t_start, 0.0)
        if self.kind == "sine":
            f1 = self.frequency if self.frequency_end is None else self.frequency_end
            T = self.duration - self.t_start
            phase = 2 * np.pi * (self.frequency * tau + 0.5 * (f1 - self.frequency) * tau**2 / T)
            out = self.amplitude * np.sin(phase)
        elif self.kind == "step":
            quarter = np.floor(tau / (self.period / 2)).astype(int) % 4
            out = self.amplitude * np.choose(quarter, [1.0, 0.0, -1.0, 0.0])
        else:
            ramp_time = self.amplitude / self.rate if self.rate > 0 else 0.0
            cycle = 4 * ramp_time + self.period
            s = np.mod(tau, cycle)
            hold = self.period / 2
            up = np.clip(s / max(ramp_time, 1e-12), 0, 1)
            down = np.clip((s - ramp_time - hold) / max(ramp_time, 1e-12), 0, 2)
            back = np.clip((s - 3 * ramp_time - 2 * hold) / max(ramp_time, 1e-12), 0, 1)
            out = self.amplitude * (up - down + back)
        return np.where(t >= self.t_start, out, 0.0)

    def speed(self, t):
        t = np.asarray(t, dtype=float)
        return self.speed_start + (self.speed_end - self.speed_start) * np.clip(t / self.duration, 0, 1)


@dataclass(frozen=True)
class SensorNoise:
    psi2_dot: float = 0.005  # rad/s
    v_x2: float = 0.05  # m/s
    F_z2: float = 500.0  # N
    yaw_from_wheel_speeds: bool = False
    track_width: float = 2.04  # m, middle semitrailer axle
    wheel_speed: float = 0.0025  # m/s per wheel, used with yaw_from_wheel_speeds


@dataclass
class ManeuverDataset:
    """Uniformly sampled columns of one maneuver plus free-form metadata."""

    dt: float
    columns: dict
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        missing = [c for c in COLUMNS if c not in self.columns]
        if missing:
            raise ConfigurationError(f"dataset lacks columns {missing}")
        n = len(self.columns[TIME])
        if any(len(np.asarray(v)) != n for v in self.columns.values()):
            raise ConfigurationError("dataset columns differ in length")
        t = np.asarray(self.columns[TIME])
        if n > 1 and not np.allclose(np.diff(t), self.dt, rtol=0, atol=1e-6):
            raise ConfigurationError("dataset time base is not uniform with the declared dt")

    def __len__(self):
        return len(self.columns[TIME])

    def __getitem__(self, key):
        return np.asarray(self.columns[key])

    @property
    def name(self):
        return self.meta.get("name", "")

    @property
    def loading(self):
        return self.meta.get("loading", "")

    @property
    def truth(self):
        return np.column_stack([self[c] for c in TRUE_COLUMNS])

    @property
    def ann_inputs(self):
        """Measured soft-sensor inputs ``[v_x2, F_z2, psi2_dot]``."""
        return np.column_stack([self["meas.v_x2"], self["meas.F_z2"], self["meas.psi2_dot"]])

    @property
    def filter_inputs(self):
        return np.column_stack([self["meas.v_x2"], self["meas.F_z2"]])

    def to_csv(self) -> str:
        buf = io.StringIO()
        for key, value in self.meta.items():
            buf.write(f"# {key} = {value}\n")
        buf.write(f"# dt = {float(self.dt)!r}\n")
        buf.write(",".join(COLUMNS) + "\n")
        data = np.column_stack([np.asarray(self.columns[c], dtype=float) for c in COLUMNS])
        np.savetxt(buf, data, fmt="%.9g", delimiter=",")
        return buf.getvalue()

    def write(self, path):
        Path(path).write_text(self.to_csv())

    @classmethod
    def from_csv(cls, text: str) -> "ManeuverDataset":
        meta, header, body_start = {}, None, 0
        lines = text.splitlines()
        for i, line in enumerate(lines):
            if line.startswith("#"):
                key, _, value = line[1:].partition("=")
                meta[key.strip()] = value.strip()
                continue
            header = line.strip().split(",")
            body_start = i + 1
            break
        if header is None or "dt" not in meta:
            raise ConfigurationError("dataset CSV lacks a header row or dt metadata")
        dt = float(meta.pop("dt"))
        data = np.loadtxt(io.StringIO("\n".join(lines[body_start:])), delimiter=",", ndmin=2)
        if data.shape[1] != len(header):
            raise ConfigurationError("dataset CSV rows do not match the header")
        return cls(dt, {h: data[:, j] for j, h in enumerate(header)}, meta)

    @classmethod
    def read(cls, path) -> "ManeuverDataset":
        return cls.from_csv(Path(path).read_text())


def perturbed_params(nominal: VehicleParams, rel: float = 0.10, seed: int = 0) -> VehicleParams:
    """Truth parameters: every tire coefficient scaled by ``1 +- rel`` (random sign).

    ``D`` is left alone because it only enters through ``c1 / D``.  Tires that
    share a group in ``nominal`` stay shared.
    """
    rng = np.random.default_rng(seed)
    cache: dict = {}
    for tire in nominal.tires:
        if tire not in cache:
            cache[tire] = replace(tire, **{
                name: getattr(tire, name) * (1 + rel * rng.choice((-1.0, 1.0)))
                for name in ("C", "c1", "c2", "l_relax")})
    tires = [cache[t] for t in nominal.tires]
    return replace(nominal, tires=tuple(tires))


def _time_base(duration, dt):
    n = int(round(duration / dt)) + 1
    return np.arange(n) * dt


def simulate_specs(specs, params: VehicleParams, dt: float = vehicle.DT, body: TrailerBody = TrailerBody()):
    """Simulate maneuvers of equal duration together; returns ``(t, states)``.

    ``states`` has shape ``(N, len(specs), 10)``.
    """
    durations = {s.duration for s in specs}
    if len(durations) != 1:
        raise ConfigurationError("batched simulation needs equal durations")
    t = _time_base(durations.pop(), dt)
    loads = [LOADING_STATES[s.loading] for s in specs]
    delta = np.column_stack([s.steering(t) for s in specs])
    speed = np.column_stack([s.speed(t) for s in specs])
    F_z2 = np.array([ls.F_z2(params.l_Agg, body, params.g) for ls in loads])
    l_cog = np.array([ls.l_cog(body) for ls in loads])
    with np.errstate(all="ignore"):
        X = vehicle.simulate(np.zeros((len(specs), vehicle.N_SSM)), delta, speed,
                             np.broadcast_to(F_z2, delta.shape), np.broadcast_to(l_cog, delta.shape),
                             params, dt, validate=False)
    for j, spec in enumerate(specs):
        xs = X[:, j]
        if not np.all(np.isfinite(xs)) or np.max(np.abs(xs[:, vehicle.THETA])) >= np.pi / 2:
            raise GenerationError(f"unstable simulation for maneuver {spec.label}")
    return t, X, delta, speed, F_z2, l_cog


def _dataset(spec, t, x, delta, speed, F_z2, l_cog, noise: SensorNoise, dt, truth_tag=""):
    rng = np.random.default_rng(spec.seed)
    n = len(t)
    cols = {TIME: t}
    for name, col in zip(vehicle.STATE_NAMES, x.T):
        cols[f"true.{name}"] = col
    cols["true.delta1"] = delta
    cols["true.l_cog"] = np.full(n, l_cog)
    cols["in.v_x2"] = speed
    cols["in.F_z2"] = np.full(n, F_z2)
    r2 = x[:, vehicle.R2]
    if noise.yaw_from_wheel_speeds:
        half = 0.5 * noise.track_width
        left = speed - half * r2 + rng.normal(0, noise.wheel_speed, n)
        right = speed + half * r2 + rng.normal(0, noise.wheel_speed, n)
        cols["meas.v_x2"] = 0.5 * (left + right)
        cols["meas.psi2_dot"] = (right - left) / noise.track_width
    else:
        cols["meas.v_x2"] = speed + rng.normal(0, noise.v_x2, n)
        cols["meas.psi2_dot"] = r2 + rng.normal(0, noise.psi2_dot, n)
    cols["meas.F_z2"] = F_z2 + rng.normal(0, noise.F_z2, n)
    meta = {"name": spec.label, "loading": spec.loading, "spec": repr(asdict(spec)),
            "noise": repr(asdict(noise)), "seed": spec.seed}
    if truth_tag:
        meta["truth"] = truth_tag
    return ManeuverDataset(dt, cols, meta)


def generate_maneuvers(specs, truth: VehicleParams, noise: SensorNoise = SensorNoise(),
                       dt: float = vehicle.DT, body: TrailerBody = TrailerBody(), truth_tag: str = ""):
    """Generate datasets for many specs, batching equal durations."""
    out = [None] * len(specs)
    groups: dict = {}
    for i, spec in enumerate(specs):
        groups.setdefault(spec.duration, []).append(i)
    for idx in groups.values():
        t, X, delta, speed, F_z2, l_cog = simulate_specs([specs[i] for i in idx], truth, dt, body)
        for j, i in enumerate(idx):
            out[i] = _dataset(specs[i], t, X[:, j], delta[:, j], speed[:, j], F_z2[j], l_cog[j],
                              noise, dt, truth_tag)
    return out


def generate_maneuver(spec: ManeuverSpec, truth: VehicleParams, noise: SensorNoise = SensorNoise(),
                      dt: float = vehicle.DT, body: TrailerBody = TrailerBody()) -> ManeuverDataset:
    return generate_maneuvers([spec], truth, noise, dt, body)[0]


def max_amplitude(speed: float, params: VehicleParams = VehicleParams(), a_lat: float = 2.5,
                  theta_max: float = 0.5):
    """Steering amplitude keeping steady lateral acceleration and articulation moderate."""
    wheelbase = params.l11 + params.l12
    by_accel = a_lat * wheelbase / speed**2
    trailer_arm = params.l_Agg + params.l_c1 - params.l12
    by_theta = theta_max * wheelbase / trailer_arm
    return float(min(MAX_STEER, by_accel, by_theta))


def maneuver_suite(loading: str, count: int, duration: float, seed: int,
                   params: VehicleParams = VehicleParams(), prefix: str = "train"):
    """``count`` randomised maneuvers cycling through sine, step and ramp."""
    rng = np.random.default_rng(seed)
    specs = []
    for i in range(count):
        kind = PROFILE_KINDS[i % 3]
        v0, v1 = np.sort(rng.uniform(*SPEED_RANGE, size=2))
        if rng.random() < 0.5:
            v0, v1 = v1, v0
        amp = float(max_amplitude(max(v0, v1), params) * rng.uniform(0.4, 1.0))
        v0, v1 = float(v0), float(v1)
        specs.append(ManeuverSpec(
            kind=kind, amplitude=amp, speed_start=float(v0), speed_end=float(v1), duration=duration,
            loading=loading, seed=int(rng.integers(2**31)),
            frequency=float(rng.uniform(0.05, 0.3)), frequency_end=float(rng.uniform(0.3, 0.8)),
            period=float(rng.uniform(4.0, 12.0)), rate=float(amp / rng.uniform(0.5, 3.0)),
            name=f"{prefix}_{loading}_{i:02d}",
        ))
    return specs


def identification_suite(duration: float = 10.0, params: VehicleParams = VehicleParams(),
                         speeds=(9.0, 15.0), a_lat: float = 5.0, seed: int = 0):
    """Chirps per training loading state that reach the nonlinear tire range.

    Steady lateral acceleration up to ``a_lat`` exposes the Magic Formula
    shape factor, which is invisible at small slip.
    """
    specs = []
    for i, load in enumerate(TRAINING_LOADS):
        for j, v in enumerate(speeds):
            amp = max_amplitude(v, params, a_lat=a_lat, theta_max=1.0)
            specs.append(ManeuverSpec(kind="sine", amplitude=amp, speed_start=v, speed_end=v, duration=duration,
                                      loading=load, seed=seed + 10 * i + j, frequency=0.2, frequency_end=1.2,
                                      t_start=0.5, name=f"ident_{load}_{j}"))
    return specs


def evaluation_spec(loading: str, seed: int, duration: float = 60.0,
                    params: VehicleParams = VehicleParams()) -> ManeuverSpec:
    """A broad chirp at moderate speed, one per loading state."""
    rng = np.random.default_rng(seed)
    v0, v1 = float(rng.uniform(8.0, 12.0)), float(rng.uniform(12.0, 16.0))
    amp = max_amplitude(v1, params) * 0.9
    return ManeuverSpec(kind="sine", amplitude=amp, speed_start=v0, speed_end=v1, duration=duration,
                        loading=loading, seed=int(rng.integers(2**31)), frequency=0.05,
                        frequency_end=0.6, name=f"eval_{loading}")


def static_variance(ds: ManeuverDataset, column: str = "meas.psi2_dot", t_end: float | None = None):
    """Sample variance of a measured channel over the initial straight segment (default: first second)."""
    if t_end is None:
        t_end = 1.0
    seg = ds[column][ds[TIME] < t_end]
    if len(seg) < 2:
        raise ConfigurationError("static segment too short for a variance estimate")
    return float(np.var(seg, ddof=1))


def spec_fields():
    return tuple(f.name for f in fields(ManeuverSpec))
