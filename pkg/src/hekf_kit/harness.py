"""Evaluation protocol: train on three loading states, evaluate in and out of distribution.

:func:`run_protocol` chains the whole pipeline with a single seed:

* truth parameters = nominal parameters with perturbed tire coefficients;
* training suites for ``full_load``, ``partial_load_1`` and ``no_load``;
* one soft-sensor bank (grid search per output) plus the KNN confidence model;
* full-confidence tuning of ``Q`` and the soft ``R0`` on a held-out maneuver;
* EKF, ANN-only and HEKF runs over one evaluation maneuver per loading state,
  including the out-of-distribution ``partial_load_2``.
"""

from __future__ import annotations

import io
import os
import time
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import confidence as conf
from . import datagen, hekf, kvfile, narx
from .datagen import ManeuverDataset, SensorNoise
from .errors import ConfigurationError, HekfKitError, ProtocolError
from .narx import INPUT_CHANNELS, OUTPUT_CHANNELS, NarxConfig, SequenceSet, SoftSensorBank, Standardizer
from .vehicle import VehicleParams

METHODS = ("ekf", "ann", "hekf")
QUANTITIES = hekf.QUANTITIES
UNITS = {"theta": "rad", "F_y21": "kN", "F_y23": "kN", "delta1": "rad"}
REPORT_SCALE = {"theta": 1.0, "F_y21": 1e-3, "F_y23": 1e-3, "delta1": 1.0}
EVAL_LOADS = datagen.TRAINING_LOADS + (datagen.OOD_LOAD,)


def rmse(estimate, truth, warmup: int = 0) -> float:
    """Root-mean-square error after dropping the first ``warmup`` samples."""
    estimate = np.asarray(estimate, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if estimate.shape != truth.shape:
        raise ConfigurationError(f"misaligned series: {estimate.shape} vs {truth.shape}")
    if not 0 <= warmup < len(truth):
        raise ConfigurationError(f"warm-up exclusion {warmup} leaves no samples")
    err = estimate[warmup:] - truth[warmup:]
    return float(np.sqrt(np.mean(err**2)))


def quantity_rmse(trace: hekf.Trace, ds: ManeuverDataset, warmup: int):
    """RMSE per reported quantity in report units (kN for forces)."""
    return {q: rmse(trace.estimate(q), ds[f"true.{q}"], warmup) * REPORT_SCALE[q] for q in QUANTITIES}


# -- configuration -------------------------------------------------------------

@dataclass
class ProtocolConfig:
    seed: int = 7
    perturbation: float = 0.10
    train_count: int = 12
    train_duration: float = 60.0
    eval_duration: float = 60.0
    validation_fraction: float = 0.2
    decimation: int = 10
    grid_layers: tuple = (1, 2)
    grid_neurons: tuple = (10, 20)
    l2: float = 1e-4
    max_epochs: int = 60
    patience: int = 10
    K: int = conf.DEFAULT_K
    quantile: float = conf.DEFAULT_QUANTILE
    c: float = hekf.DEFAULT_C
    dmax_holdout: str = "maneuver"
    tune: bool = True
    warmup_s: float = 2.0
    noise_psi2_dot: float = 0.005
    noise_v_x2: float = 0.05
    noise_F_z2: float = 500.0

    def __post_init__(self):
        self.grid_layers = tuple(int(v) for v in np.atleast_1d(self.grid_layers))
        self.grid_neurons = tuple(int(v) for v in np.atleast_1d(self.grid_neurons))
        if self.train_count < 2:
            raise ConfigurationError("train_count must be >= 2")
        if not 0 < self.validation_fraction < 0.5:
            raise ConfigurationError("validation_fraction must lie in (0, 0.5)")
        if self.decimation < 1:
            raise ConfigurationError("decimation must be >= 1")
        if not 0 <= self.perturbation < 1:
            raise ConfigurationError("perturbation must lie in [0, 1)")
        if self.dmax_holdout not in ("maneuver", "sample"):
            raise ConfigurationError("dmax_holdout must be 'maneuver' or 'sample'")
        if not 1 <= self.max_epochs <= narx.MAX_EPOCHS:
            raise ConfigurationError(f"max_epochs must lie in [1, {narx.MAX_EPOCHS}]")

    @property
    def noise(self) -> SensorNoise:
        return SensorNoise(psi2_dot=self.noise_psi2_dot, v_x2=self.noise_v_x2, F_z2=self.noise_F_z2)

    def grid(self):
        return narx.default_grid(self.grid_layers, self.grid_neurons, (self.l2,),
                                 max_closed_loop_epochs=self.max_epochs, patience=self.patience)

    def to_dict(self):
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = ", ".join(str(x) for x in v) if isinstance(v, tuple) else v
        return out

    @classmethod
    def from_dict(cls, values, base: "ProtocolConfig | None" = None):
        base = base or cls()
        kinds = {f.name: type(getattr(base, f.name)) for f in fields(cls)}
        unknown = set(values) - set(kinds)
        if unknown:
            raise ConfigurationError(f"unknown protocol keys: {sorted(unknown)}")
        parsed = {}
        for key, raw in values.items():
            kind = kinds[key]
            try:
                if kind is tuple:
                    parsed[key] = tuple(int(s) for s in str(raw).split(","))
                elif kind is bool:
                    s = str(raw).strip().lower()
                    if s not in ("true", "false", "1", "0", "yes", "no"):
                        raise ValueError(raw)
                    parsed[key] = s in ("true", "1", "yes")
                else:
                    parsed[key] = kind(raw)
            except ValueError:
                raise ConfigurationError(f"{key}: cannot parse {raw!r} as {kind.__name__}") from None
        return replace(base, **parsed)

    @classmethod
    def read(cls, path):
        keys = [f.name for f in fields(cls)]
        return cls.from_dict(kvfile.read_kv(path, keys))

    def write(self, path):
        kvfile.write_kv(path, self.to_dict(), header="hekf-kit protocol configuration")


# -- data --------------------------------------------------------------------

def training_specs(cfg: ProtocolConfig, nominal: VehicleParams):
    specs = []
    for i, load in enumerate(datagen.TRAINING_LOADS):
        specs += datagen.maneuver_suite(load, cfg.train_count, cfg.train_duration, cfg.seed * 1000 + i, nominal)
    return specs


def evaluation_specs(cfg: ProtocolConfig, nominal: VehicleParams):
    return [datagen.evaluation_spec(load, cfg.seed * 1000 + 100 + i, cfg.eval_duration, nominal)
            for i, load in enumerate(EVAL_LOADS)]


def tuning_spec(cfg: ProtocolConfig, nominal: VehicleParams):
    spec = datagen.evaluation_spec("partial_load_1", cfg.seed * 1000 + 200, cfg.eval_duration, nominal)
    return replace(spec, name="tune_partial_load_1")


def truth_params(cfg: ProtocolConfig, nominal: VehicleParams | None = None) -> VehicleParams:
    return datagen.perturbed_params(nominal or VehicleParams(), cfg.perturbation, cfg.seed)


SPLITS = ("train", "eval", "tune", "ident")


def generate_all(cfg: ProtocolConfig, nominal: VehicleParams | None = None) -> dict:
    """All datasets of the protocol keyed by split."""
    nominal = nominal or VehicleParams()
    truth = truth_params(cfg, nominal)
    return {
        "train": datagen.generate_maneuvers(training_specs(cfg, nominal), truth, cfg.noise),
        "eval": datagen.generate_maneuvers(evaluation_specs(cfg, nominal), truth, cfg.noise),
        "tune": [datagen.generate_maneuver(tuning_spec(cfg, nominal), truth, cfg.noise)],
        "ident": datagen.generate_maneuvers(datagen.identification_suite(params=nominal, seed=cfg.seed * 1000 + 300),
                                            truth, cfg.noise),
    }


def write_datasets(splits: dict, out_dir) -> list:
    """One CSV per maneuver under ``out_dir/<split>/``; returns written paths."""
    written = []
    for split, datasets in splits.items():
        os.makedirs(os.path.join(out_dir, split), exist_ok=True)
        for i, ds in enumerate(datasets):
            path = os.path.join(out_dir, split, f"{i:03d}_{ds.name or 'maneuver'}.csv")
            ds.write(path)
            written.append(path)
    return written


def read_datasets(data_dir, split: str):
    folder = os.path.join(data_dir, split)
    if not os.path.isdir(folder):
        raise ConfigurationError(f"no {split!r} folder in {data_dir}")
    names = sorted(n for n in os.listdir(folder) if n.endswith(".csv"))
    if not names:
        raise ConfigurationError(f"no CSV datasets in {folder}")
    return [ManeuverDataset.read(os.path.join(folder, n)) for n in names]


def _targets(ds: ManeuverDataset):
    return np.column_stack([ds[f"true.{name}"] for name in OUTPUT_CHANNELS])


# -- soft sensor -------------------------------------------------------------

@dataclass
class TrainedBank:
    bank: SoftSensorBank
    confidence: conf.ConfidenceModel
    scores: dict  # output -> list of (config, validation NMSE)
    residual_var: np.ndarray  # per output, SI units, on validation segments


def split_sequences(datasets, decimation: int, validation_fraction: float):
    """Decimated input/target sequences, each cut into a training head and validation tail."""
    train_u, train_y, valid_u, valid_y = [], [], [], []
    for ds in datasets:
        u = ds.ann_inputs[::decimation]
        y = _targets(ds)[::decimation]
        cut = int(round(len(u) * (1.0 - validation_fraction)))
        train_u.append(u[:cut])
        train_y.append(y[:cut])
        valid_u.append(u[cut:])
        valid_y.append(y[cut:])
    return train_u, train_y, valid_u, valid_y


def train_bank(datasets, cfg: ProtocolConfig, workers: int | None = None) -> TrainedBank:
    """Grid-search one network per soft output and build the confidence model."""
    tu, ty, vu, vy = split_sequences(datasets, cfg.decimation, cfg.validation_fraction)
    in_std = Standardizer.fit(np.vstack(tu))
    out_std = Standardizer.fit(np.vstack(ty))
    U_tr = [in_std.standardize(u) for u in tu]
    U_va = [in_std.standardize(u) for u in vu]
    Y_tr = [out_std.standardize(y) for y in ty]
    Y_va = [out_std.standardize(y) for y in vy]
    nets, configs, scores = [], [], {}
    for j, name in enumerate(OUTPUT_CHANNELS):
        train = SequenceSet.from_lists(U_tr, [y[:, j] for y in Y_tr])
        valid = SequenceSet.from_lists(U_va, [y[:, j] for y in Y_va])
        res = narx.grid_search(train, valid, cfg.seed * 100 + 10 * j, cfg.grid(), workers)
        nets.append(res.net)
        configs.append(res.config)
        scores[name] = res.scores
    bank = SoftSensorBank(nets, configs, in_std, out_std, cfg.decimation)
    # soft-measurement noise from cold-start validation residuals after warm-up
    warm = bank.feedback_delays
    resid = []
    for u, y in zip(vu, vy):
        resid.append(bank.predict_sequence(u)[warm:] - y[warm:])
    residual_var = np.var(np.vstack(resid), axis=0) + np.mean(np.vstack(resid), axis=0) ** 2
    groups = np.concatenate([np.full(len(u), i) for i, u in enumerate(tu)])
    confidence = conf.build(np.vstack(tu), in_std, cfg.K, quantile=cfg.quantile,
                            groups=groups if cfg.dmax_holdout == "maneuver" else None)
    return TrainedBank(bank, confidence, scores, residual_var)


TRAINED_FORMAT = "hekf_kit.trained_bank"


def save_trained(path, trained: TrainedBank) -> None:
    narx.save_json(path, {
        "format": TRAINED_FORMAT,
        "bank": trained.bank.to_dict(),
        "confidence": trained.confidence.to_dict(),
        "residual_var": trained.residual_var.tolist(),
        "scores": {name: [[c.hidden_layers, c.total_neurons, None if v is None else float(v)] for c, v in rows]
                   for name, rows in trained.scores.items()},
    })


def load_trained(path) -> TrainedBank:
    try:
        d = narx.load_json(path)
    except (OSError, ValueError) as exc:
        raise ConfigurationError(f"cannot read bank file {path}: {exc}") from None
    if not isinstance(d, dict) or d.get("format") != TRAINED_FORMAT:
        raise ConfigurationError(f"{path} is not a trained soft-sensor bank")
    bank = SoftSensorBank.from_dict(d["bank"])
    confidence = conf.ConfidenceModel.from_dict(d["confidence"], bank.input_standardizer)
    residual_var = np.asarray(d["residual_var"], dtype=float)
    if residual_var.shape != (len(OUTPUT_CHANNELS),) or np.any(residual_var <= 0):
        raise ConfigurationError("residual variances must be five positive numbers")
    return TrainedBank(bank, confidence, d.get("scores", {}), residual_var)


def default_noise(cfg: ProtocolConfig) -> hekf.NoiseConfig:
    return hekf.NoiseConfig(hekf.default_Q(), np.array([[cfg.noise_psi2_dot**2]]))


@dataclass
class TunedNoise:
    """Process and measurement noise for both filters."""

    ekf_Q: np.ndarray
    hekf_Q: np.ndarray
    R0: np.ndarray  # 6x6, psi2_dot first
    q_table: list = field(default_factory=list)
    full_confidence: hekf.TuningResult | None = None

    def ekf_noise(self) -> hekf.NoiseConfig:
        return hekf.NoiseConfig(self.ekf_Q, self.R0[:1, :1])

    def to_dict(self):
        out = {}
        for prefix, M in (("ekf_q", self.ekf_Q), ("hekf_q", self.hekf_Q)):
            out.update({f"{prefix}.{n}": float(M[i, i]) for i, n in enumerate(hekf.AUG_STATE_NAMES)})
        out.update({f"r0.{n}": float(self.R0[i, i]) for i, n in enumerate(R0_CHANNELS)})
        return out

    @classmethod
    def keys(cls):
        return ([f"{p}.{n}" for p in ("ekf_q", "hekf_q") for n in hekf.AUG_STATE_NAMES]
                + [f"r0.{n}" for n in R0_CHANNELS])

    @classmethod
    def from_dict(cls, values):
        missing = [k for k in cls.keys() if k not in values]
        if missing:
            raise ConfigurationError(f"noise file lacks {missing}")
        num = {k: kvfile.to_float(k, values[k]) for k in cls.keys()}
        ekf_Q = np.diag([num[f"ekf_q.{n}"] for n in hekf.AUG_STATE_NAMES])
        hekf_Q = np.diag([num[f"hekf_q.{n}"] for n in hekf.AUG_STATE_NAMES])
        R0 = np.diag([num[f"r0.{n}"] for n in R0_CHANNELS])
        hekf.NoiseConfig(ekf_Q, R0)
        hekf.NoiseConfig(hekf_Q, R0)
        return cls(ekf_Q, hekf_Q, R0)

    def write(self, path):
        kvfile.write_kv(path, self.to_dict(), header="filter noise: diagonal covariance entries")

    @classmethod
    def read(cls, path):
        return cls.from_dict(kvfile.read_kv(path, cls.keys()))


R0_CHANNELS = ("psi2_dot",) + OUTPUT_CHANNELS


def tune_noise(cfg: ProtocolConfig, nominal: VehicleParams, trained: TrainedBank, tune_ds: ManeuverDataset,
               log=None) -> TunedNoise:
    """NEES-tune the EKF process noise, then the HEKF at full confidence."""
    log = log or (lambda msg: None)
    warmup = int(round(cfg.warmup_s / tune_ds.dt))
    base = default_noise(cfg)
    ekf_Q, q_table = hekf.tune_process_noise(tune_ds, nominal, base, skip=warmup)
    log("process noise: " + ", ".join(f"delta1 {a:g} x{b:g} NEES {c:.1f}" for a, b, c in q_table))
    tmpl = hekf_template(cfg, trained, Q=ekf_Q)
    if not cfg.tune:
        return TunedNoise(ekf_Q, ekf_Q, tmpl.R0, q_table)
    res = hekf.tune_full_confidence(tmpl, nominal, tune_ds)
    log(f"full-confidence tuning: Q x{res.q_scale:g}, soft R0 x{res.r_scale:g}")
    return TunedNoise(ekf_Q, res.Q, res.R0, q_table, res)


def hekf_template(cfg: ProtocolConfig, trained: TrainedBank, Q=None) -> hekf.HekfConfig:
    R0 = np.diag(np.concatenate([[cfg.noise_psi2_dot**2], trained.residual_var]))
    return hekf.HekfConfig(Q=hekf.default_Q() if Q is None else Q, R0=R0, bank=trained.bank,
                           confidence=trained.confidence, c=cfg.c)


# -- report ------------------------------------------------------------------

@dataclass
class RmseReport:
    rows: list  # maneuver labels, "mean" last
    values: dict  # (method, row, quantity) -> RMSE in report units
    tau_median: dict = field(default_factory=dict)  # maneuver -> median tau of the HEKF run

    def get(self, method, row, quantity):
        return self.values[(method, row, quantity)]

    def relative_mean_error(self):
        """Mean RMSE of each method divided by the worst method's mean, per quantity."""
        out = {}
        for q in QUANTITIES:
            worst = max(self.get(m, "mean", q) for m in METHODS)
            for m in METHODS:
                out[(m, q)] = self.get(m, "mean", q) / worst if worst > 0 else 0.0
        return out

    def to_csv(self) -> str:
        lines = ["maneuver,method," + ",".join(f"{q}_{UNITS[q]}" for q in QUANTITIES)]
        for row in self.rows:
            for m in METHODS:
                lines.append(f"{row},{m}," + ",".join(f"{self.get(m, row, q):.6g}" for q in QUANTITIES))
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        head1 = f"{'maneuver':<16}" + "".join(f"{q + ' [' + UNITS[q] + ']':^30}" for q in QUANTITIES)
        head2 = f"{'':<16}" + "".join("".join(f"{m:>10}" for m in METHODS) for _ in QUANTITIES)
        out = [head1, head2, "-" * len(head2)]
        for row in self.rows:
            if row == "mean":
                out.append("-" * len(head2))
            cells = []
            for q in QUANTITIES:
                cells += [f"{self.get(m, row, q):>10.4f}" for m in METHODS]
            out.append(f"{row:<16}" + "".join(cells))
        rel = self.relative_mean_error()
        cells = []
        for q in QUANTITIES:
            cells += [f"{100 * rel[(m, q)]:>9.1f}%" for m in METHODS]
        out.append(f"{'relative mean':<16}" + "".join(cells))
        if self.tau_median:
            out.append("")
            out.append("median confidence: " + ", ".join(f"{k} {v:.3f}" for k, v in self.tau_median.items()))
        return "\n".join(out) + "\n"


def build_report(results) -> RmseReport:
    """``results`` maps maneuver -> {method: {quantity: rmse}}."""
    rows = list(results)
    values = {}
    for row in rows:
        for m in METHODS:
            for q in QUANTITIES:
                values[(m, row, q)] = results[row][m][q]
    for m in METHODS:
        for q in QUANTITIES:
            values[(m, "mean", q)] = float(np.mean([results[r][m][q] for r in rows]))
    return RmseReport(rows + ["mean"], values)


# -- protocol ----------------------------------------------------------------

@dataclass
class ProtocolResult:
    report: RmseReport
    traces: dict  # (maneuver, method) -> Trace
    tuning: TunedNoise
    trained: TrainedBank
    timings: dict


def evaluate_maneuvers(datasets, nominal: VehicleParams, noise: hekf.NoiseConfig, hcfg: hekf.HekfConfig,
                       warmup: int, trained: TrainedBank | None = None):
    """Run the three methods on each dataset; returns (report, traces)."""
    results, traces, tau_med = {}, {}, {}
    try:
        for ds in datasets:
            label = ds.loading or ds.name
            runs = {
                "ekf": hekf.run_ekf(ds, nominal, noise),
                "ann": hekf.run_ann(ds, hcfg.bank),
                "hekf": hekf.run_hekf(ds, nominal, hcfg),
            }
            results[label] = {m: quantity_rmse(tr, ds, warmup) for m, tr in runs.items()}
            for m, tr in runs.items():
                traces[(label, m)] = tr
            tau_med[label] = float(np.median(runs["hekf"].tau[warmup:]))
    except HekfKitError as exc:
        partial = build_report(results) if results else None
        raise ProtocolError(f"evaluation of {label!r} failed: {exc}", partial) from exc
    report = build_report(results)
    report.tau_median = tau_med
    return report, traces


def run_protocol(cfg: ProtocolConfig, nominal: VehicleParams | None = None, workers: int | None = None,
                 log=None) -> ProtocolResult:
    nominal = nominal or VehicleParams()
    log = log or (lambda msg: None)
    timings = {}
    t0 = time.perf_counter()
    splits = generate_all(cfg, nominal)
    train_ds, eval_ds, tune_ds = splits["train"], splits["eval"], splits["tune"][0]
    timings["generate"] = time.perf_counter() - t0
    log(f"generated {len(train_ds)} training and {len(eval_ds)} evaluation maneuvers")

    t0 = time.perf_counter()
    trained = train_bank(train_ds, cfg, workers)
    timings["train"] = time.perf_counter() - t0
    log("trained soft sensors: " + ", ".join(
        f"{name} {c.hidden_layers}x{c.total_neurons}" for name, c in zip(OUTPUT_CHANNELS, trained.bank.configs)))

    t0 = time.perf_counter()
    tuning = tune_noise(cfg, nominal, trained, tune_ds, log)
    hcfg = replace(hekf_template(cfg, trained), Q=tuning.hekf_Q, R0=tuning.R0)
    timings["tune"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    warmup = int(round(cfg.warmup_s / eval_ds[0].dt))
    report, traces = evaluate_maneuvers(eval_ds, nominal, tuning.ekf_noise(), hcfg, warmup, trained)
    timings["evaluate"] = time.perf_counter() - t0
    return ProtocolResult(report, traces, tuning, trained, timings)


def write_outputs(result: ProtocolResult, out_dir) -> list:
    """Write the report (CSV + table) and per-step traces; returns written paths."""
    os.makedirs(out_dir, exist_ok=True)
    written = []

    def put(name, text):
        path = os.path.join(out_dir, name)
        with open(path, "w") as fh:
            fh.write(text)
        written.append(path)

    put("report.csv", result.report.to_csv())
    put("report.txt", result.report.to_table())
    if result.report.tau_median:
        put("confidence.csv", "maneuver,median_tau\n" + "".join(
            f"{k},{v:.6g}\n" for k, v in result.report.tau_median.items()))
    for (label, method), tr in sorted(result.traces.items()):
        put(f"trace_{label}_{method}.csv", tr.to_csv())
    return written


def report_text(result: ProtocolResult) -> str:
    buf = io.StringIO()
    buf.write(result.report.to_table())
    return buf.getvalue()
