"""NARX soft sensor: small tanh networks with input and output-feedback delay lines.

Each estimated quantity gets its own single-output network.  The feature
vector at step ``k`` is::

    [u_k, u_{k-1}, ..., u_{k-nu}, y_{k-1}, ..., y_{k-ny}]

in standardized units.  Training runs one Levenberg-Marquardt epoch with the
measured outputs in the feedback line (open loop, teacher forcing), then up
to ``max_closed_loop_epochs`` epochs where the feedback line carries the
network's own predictions.  Closed-loop Jacobians are propagated forward
through the recursion (real-time recurrent learning), batched over
sequences.
"""

from __future__ import annotations

import json
import os
from collections import deque
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from itertools import product
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, TrainingFailure

FORMAT_VERSION = 1
INPUT_CHANNELS = ("v_x2", "F_z2", "psi2_dot")
OUTPUT_CHANNELS = ("psi1_dot", "theta", "F_y21", "F_y23", "delta1")

LAYER_CHOICES = (1, 2, 3)
NEURON_CHOICES = (5, 10, 15, 20, 25, 30)
MAX_NEURONS = 30
MAX_EPOCHS = 1000


@dataclass(frozen=True)
class NarxConfig:
    hidden_layers: int = 1
    total_neurons: int = 10
    input_delays: int = 2
    feedback_delays: int = 2
    max_closed_loop_epochs: int = MAX_EPOCHS
    l2: float = 1e-4
    patience: int = 25

    def __post_init__(self):
        if self.hidden_layers not in LAYER_CHOICES:
            raise ConfigurationError(f"hidden_layers must be one of {LAYER_CHOICES}")
        if not self.hidden_layers <= self.total_neurons <= MAX_NEURONS:
            raise ConfigurationError(f"total_neurons must be in [{self.hidden_layers}, {MAX_NEURONS}]")
        if not 0 <= self.max_closed_loop_epochs <= MAX_EPOCHS:
            raise ConfigurationError(f"max_closed_loop_epochs must be in [0, {MAX_EPOCHS}]")
        if self.input_delays < 0 or self.feedback_delays < 1:
            raise ConfigurationError("need input_delays >= 0 and feedback_delays >= 1")
        if self.l2 < 0 or self.patience < 1:
            raise ConfigurationError("need l2 >= 0 and patience >= 1")

    @property
    def hidden_sizes(self) -> tuple[int, ...]:
        base, extra = divmod(self.total_neurons, self.hidden_layers)
        return tuple(base + (i < extra) for i in range(self.hidden_layers))

    def n_features(self, n_inputs: int = len(INPUT_CHANNELS)) -> int:
        return n_inputs * (1 + self.input_delays) + self.feedback_delays


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.std = np.asarray(self.std, dtype=float)
        if np.any(~(self.std > 0)):
            raise ConfigurationError("constant channel: standard deviation must be > 0")

    @classmethod
    def fit(cls, data) -> "Standardizer":
        data = np.asarray(data, dtype=float)
        return cls(data.mean(axis=0), data.std(axis=0))

    def standardize(self, x):
        return (np.asarray(x, dtype=float) - self.mean) / self.std

    def destandardize(self, z):
        return np.asarray(z, dtype=float) * self.std + self.mean

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["mean"], d["std"])


# -- networks ----------------------------------------------------------------

@dataclass
class Mlp:
    """Feed-forward network: tanh hidden layers, one linear output unit."""

    weights: list
    biases: list

    @property
    def shapes(self):
        return [w.shape for w in self.weights]

    @property
    def n_inputs(self):
        return self.weights[0].shape[1]

    @property
    def n_params(self):
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def flat(self):
        return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in zip(self.weights, self.biases)])

    def with_flat(self, theta) -> "Mlp":
        weights, biases, pos = [], [], 0
        for w in self.weights:
            n_out, n_in = w.shape
            weights.append(theta[pos:pos + n_out * n_in].reshape(n_out, n_in))
            pos += n_out * n_in
            biases.append(theta[pos:pos + n_out].copy())
            pos += n_out
        return Mlp(weights, biases)

    def copy(self):
        return Mlp([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def to_dict(self):
        return {"weights": [w.tolist() for w in self.weights], "biases": [b.tolist() for b in self.biases]}

    @classmethod
    def from_dict(cls, d):
        weights = [np.asarray(w, dtype=float).reshape(len(w), -1) for w in d["weights"]]
        biases = [np.asarray(b, dtype=float) for b in d["biases"]]
        for i, (w, b) in enumerate(zip(weights, biases)):
            if b.shape != (w.shape[0],):
                raise ConfigurationError(f"layer {i}: bias shape {b.shape} does not match weights {w.shape}")
            if i and w.shape[1] != weights[i - 1].shape[0]:
                raise ConfigurationError(f"layer {i}: input width {w.shape[1]} != {weights[i - 1].shape[0]}")
        if weights[-1].shape[0] != 1:
            raise ConfigurationError("output layer must have a single unit")
        return cls(weights, biases)


def init_network(config: NarxConfig, n_features: int, rng) -> Mlp:
    """Uniform initialization in +-1/sqrt(fan_in)."""
    sizes = (n_features,) + config.hidden_sizes + (1,)
    weights, biases = [], []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(n_in)
        weights.append(rng.uniform(-bound, bound, size=(n_out, n_in)))
        biases.append(rng.uniform(-bound, bound, size=n_out))
    return Mlp(weights, biases)


def forward(net: Mlp, features):
    """Network output for features of shape ``(..., n_inputs)``."""
    a = np.asarray(features, dtype=float)
    if a.shape[-1] != net.n_inputs:
        raise ConfigurationError(f"expected {net.n_inputs} features, got {a.shape[-1]}")
    for w, b in zip(net.weights[:-1], net.biases[:-1]):
        a = np.tanh(a @ w.T + b)
    return (a @ net.weights[-1].T + net.biases[-1])[..., 0]


def forward_jacobian(net: Mlp, features):
    """Outputs and their derivatives for a batch of feature rows.

    Returns ``(y, dy_dtheta, dy_dfeatures)`` with shapes ``(B,)``,
    ``(B, n_params)`` and ``(B, n_inputs)``; parameter order matches
    :meth:`Mlp.flat`.
    """
    x = np.atleast_2d(np.asarray(features, dtype=float))
    if x.shape[-1] != net.n_inputs:
        raise ConfigurationError(f"expected {net.n_inputs} features, got {x.shape[-1]}")
    acts = [x]
    for w, b in zip(net.weights[:-1], net.biases[:-1]):
        acts.append(np.tanh(acts[-1] @ w.T + b))
    y = (acts[-1] @ net.weights[-1].T + net.biases[-1])[:, 0]

    n = x.shape[0]
    grads = [None] * len(net.weights)
    delta = np.ones((n, 1))
    for layer in range(len(net.weights) - 1, -1, -1):
        a_in = acts[layer]
        dW = (delta[:, :, None] * a_in[:, None, :]).reshape(n, -1)
        grads[layer] = np.concatenate([dW, delta], axis=1)
        delta = delta @ net.weights[layer]
        if layer > 0:
            delta = delta * (1.0 - a_in**2)
    return y, np.concatenate(grads, axis=1), delta


# -- sequences ---------------------------------------------------------------

@dataclass
class SequenceSet:
    """Standardized input/target sequences, zero-padded to a common length.

    ``U`` has shape ``(S, T, m)``, ``Y`` and ``mask`` have shape ``(S, T)``.
    """

    U: np.ndarray
    Y: np.ndarray
    mask: np.ndarray

    @classmethod
    def from_lists(cls, us: Sequence, ys: Sequence) -> "SequenceSet":
        if len(us) != len(ys) or not us:
            raise ConfigurationError("need the same, non-zero number of input and target sequences")
        T = max(len(u) for u in us)
        m = np.asarray(us[0]).shape[1]
        U = np.zeros((len(us), T, m))
        Y = np.zeros((len(us), T))
        mask = np.zeros((len(us), T), dtype=bool)
        for i, (u, y) in enumerate(zip(us, ys)):
            u = np.asarray(u, dtype=float)
            y = np.asarray(y, dtype=float)
            if len(u) != len(y):
                raise ConfigurationError(f"sequence {i}: {len(u)} inputs but {len(y)} targets")
            U[i, :len(u)] = u
            Y[i, :len(y)] = y
            mask[i, :len(u)] = True
        return cls(U, Y, mask)

    def scoring_mask(self, warmup: int):
        m = self.mask.copy()
        m[:, :warmup] = False
        return m


def _input_features(U, k, input_delays):
    S, _, m = U.shape
    cols = []
    for d in range(input_delays + 1):
        cols.append(U[:, k - d] if k - d >= 0 else np.zeros((S, m)))
    return np.concatenate(cols, axis=1)


def open_loop_features(data: SequenceSet, config: NarxConfig):
    """Feature rows with measured targets in the feedback line, shape ``(S, T, n)``."""
    S, T, _ = data.U.shape
    rows = np.empty((S, T, config.n_features(data.U.shape[2])))
    for k in range(T):
        fb = [data.Y[:, k - d] if k - d >= 0 else np.zeros(S) for d in range(1, config.feedback_delays + 1)]
        rows[:, k] = np.concatenate([_input_features(data.U, k, config.input_delays), np.stack(fb, axis=1)], axis=1)
    return rows


def closed_loop(net: Mlp, U, config: NarxConfig, with_jacobian: bool = False):
    """Run the recursion over ``U`` of shape ``(S, T, m)`` from a zero delay line.

    Returns predictions ``(S, T)`` and, if requested, total derivatives of
    each prediction w.r.t. the parameters, ``(S, T, P)``.
    """
    U = np.asarray(U, dtype=float)
    S, T, _ = U.shape
    ny = config.feedback_delays
    n_u = config.n_features(U.shape[2]) - ny
    y_hist = np.zeros((S, ny))
    Y = np.empty((S, T))
    if with_jacobian:
        P = net.n_params
        dy_hist = np.zeros((S, ny, P))
        J = np.empty((S, T, P))
    for k in range(T):
        feats = np.concatenate([_input_features(U, k, config.input_delays), y_hist], axis=1)
        if with_jacobian:
            y, g, dx = forward_jacobian(net, feats)
            total = g + np.einsum("sd,sdp->sp", dx[:, n_u:], dy_hist)
            J[:, k] = total
            dy_hist = np.concatenate([total[:, None, :], dy_hist[:, :-1]], axis=1)
        else:
            y = forward(net, feats)
        Y[:, k] = y
        y_hist = np.concatenate([y[:, None], y_hist[:, :-1]], axis=1)
    return (Y, J) if with_jacobian else Y


def nmse(pred, target, mask=None):
    """Normalised MSE: sum of squared errors over sum of squared deviations."""
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if mask is not None:
        pred, target = pred[mask], target[mask]
    denom = np.sum((target - target.mean()) ** 2)
    if denom <= 0:
        raise ConfigurationError("NMSE undefined for a constant target")
    return float(np.sum((pred - target) ** 2) / denom)


# -- Levenberg-Marquardt -----------------------------------------------------

def _objective(e, theta, l2):
    return e @ e / e.size + l2 * (theta @ theta) / theta.size


def _lm_step(theta, e, J, residuals, l2, mu, mu_max=1e10):
    """One LM epoch.  Returns ``(theta, objective, mu, accepted)``."""
    N, P = J.shape
    obj = _objective(e, theta, l2)
    g = J.T @ e / N + l2 * theta / P
    H = J.T @ J / N + (l2 / P) * np.eye(P)
    while mu <= mu_max:
        try:
            step = np.linalg.solve(H + mu * np.eye(P), -g)
        except np.linalg.LinAlgError:
            mu *= 10.0
            continue
        cand = theta + step
        e_new = residuals(cand)
        if np.all(np.isfinite(e_new)):
            obj_new = _objective(e_new, cand, l2)
            if obj_new < obj:
                return cand, obj_new, max(mu / 10.0, 1e-12), True
        mu *= 10.0
    return theta, obj, mu, False


@dataclass
class TrainingHistory:
    open_loop_loss: tuple = ()
    train_loss: list = field(default_factory=list)
    val_nmse: list = field(default_factory=list)
    best_epoch: int = 0
    epochs: int = 0
    stopped: str = ""


def train_open_loop(data: SequenceSet, config: NarxConfig, seed: int, net: Mlp | None = None):
    """Initialise a network and run exactly one open-loop LM epoch.

    Returns ``(net, (loss_before, loss_after))`` where losses are the
    regularised training objective.
    """
    rng = np.random.default_rng(seed)
    n_feat = config.n_features(data.U.shape[2])
    net = net.copy() if net is not None else init_network(config, n_feat, rng)
    mask = data.scoring_mask(0)
    X = open_loop_features(data, config)[mask]
    target = data.Y[mask]
    y, J, _ = forward_jacobian(net, X)
    theta = net.flat()
    e = y - target
    before = _objective(e, theta, config.l2)
    if not np.isfinite(before):
        raise TrainingFailure("non-finite open-loop loss at initialization")

    def residuals(th):
        return forward(net.with_flat(th), X) - target

    theta, after, _, _ = _lm_step(theta, e, J, residuals, config.l2, mu=1e-3)
    if not np.isfinite(after):
        raise TrainingFailure("non-finite open-loop loss")
    return net.with_flat(theta), (before, after)


def closed_loop_nmse(net: Mlp, data: SequenceSet, config: NarxConfig) -> float:
    pred = closed_loop(net, data.U, config)
    return nmse(pred, data.Y, data.scoring_mask(config.feedback_delays))


def train_closed_loop(net: Mlp, train: SequenceSet, valid: SequenceSet, config: NarxConfig,
                      seed: int = 0, history: TrainingHistory | None = None):
    """Closed-loop LM epochs with early stopping on validation NMSE.

    Returns ``(best_net, history)``; ``best_net`` is the snapshot with the
    lowest validation NMSE, the input network included.  ``seed`` is accepted
    for interface symmetry; the procedure itself is deterministic.
    """
    history = history or TrainingHistory()
    mask = train.scoring_mask(config.feedback_delays)
    target = train.Y[mask]
    theta = net.flat()

    def residuals(th):
        pred = closed_loop(net.with_flat(th), train.U, config)
        return pred[mask] - target

    initial_val = closed_loop_nmse(net, valid, config)
    if not np.isfinite(initial_val):
        raise TrainingFailure("non-finite validation NMSE before closed-loop training")
    best_val, best_theta, since_best, mu = initial_val, theta.copy(), 0, 1e-3
    history.val_nmse.append(initial_val)
    history.stopped = "max_epochs"
    for epoch in range(1, config.max_closed_loop_epochs + 1):
        pred, J = closed_loop(net.with_flat(theta), train.U, config, with_jacobian=True)
        e = pred[mask] - target
        if not np.all(np.isfinite(e)):
            raise TrainingFailure(f"non-finite closed-loop loss at epoch {epoch}")
        theta, obj, mu, accepted = _lm_step(theta, e, J[mask], residuals, config.l2, mu)
        history.epochs = epoch
        history.train_loss.append(obj)
        if not accepted:
            history.stopped = "converged"
            break
        val = closed_loop_nmse(net.with_flat(theta), valid, config)
        history.val_nmse.append(val)
        if not np.isfinite(val) or val > 10.0 * initial_val:
            raise TrainingFailure(f"closed-loop training diverged at epoch {epoch} (validation NMSE {val:.3g})")
        if val < best_val:
            best_val, best_theta, since_best = val, theta.copy(), 0
            history.best_epoch = epoch
        else:
            since_best += 1
            if since_best >= config.patience:
                history.stopped = "early_stopping"
                break
    return net.with_flat(best_theta), history


def train_network(train: SequenceSet, valid: SequenceSet, config: NarxConfig, seed: int):
    """Two-phase training: one open-loop epoch, then closed loop."""
    net, losses = train_open_loop(train, config, seed)
    net, history = train_closed_loop(net, train, valid, config, seed)
    history.open_loop_loss = losses
    return net, history


# -- grid search -------------------------------------------------------------

def default_grid(layers=LAYER_CHOICES, neurons=NEURON_CHOICES, l2=(1e-4,), **overrides):
    """Candidate configurations: every layer count x total neurons x l2."""
    return [NarxConfig(hidden_layers=L, total_neurons=n, l2=lam, **overrides)
            for L, n, lam in product(layers, neurons, l2) if n >= L]


@dataclass
class GridResult:
    config: NarxConfig
    net: Mlp
    val_nmse: float
    scores: list  # (config, val_nmse or None) per candidate, in grid order


def _workers():
    env = os.environ.get("HEKF_KIT_THREADS")
    if env:
        return max(1, int(env))
    return 1


def _fit_candidate(args):
    train, valid, config, seed = args
    try:
        net, _ = train_network(train, valid, config, seed)
    except TrainingFailure:
        return None
    return net, closed_loop_nmse(net, valid, config)


def _run_jobs(jobs, workers):
    if workers <= 1 or len(jobs) <= 1:
        return [_fit_candidate(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        return list(pool.map(_fit_candidate, jobs))


def grid_search(train: SequenceSet, valid: SequenceSet, seed: int, grid=None, workers: int | None = None) -> GridResult:
    """Train every candidate and keep the best validation NMSE.

    Ties are broken towards fewer parameters, then grid order.
    """
    grid = list(grid) if grid is not None else default_grid()
    workers = _workers() if workers is None else workers
    jobs = [(train, valid, cfg, seed + i) for i, cfg in enumerate(grid)]
    results = _run_jobs(jobs, workers)
    return _select(grid, results, train.U.shape[2])


def _select(grid, results, n_inputs):
    scores, best = [], None
    for i, (cfg, res) in enumerate(zip(grid, results)):
        scores.append((cfg, None if res is None else res[1]))
        if res is None or not np.isfinite(res[1]):
            continue
        key = (res[1], res[0].n_params, i)
        if best is None or key < best[0]:
            best = (key, cfg, res[0])
    if best is None:
        raise TrainingFailure("every grid candidate failed to train")
    return GridResult(best[1], best[2], best[0][0], scores)


# -- soft-sensor bank --------------------------------------------------------

@dataclass
class SoftSensorBank:
    """One trained network per output channel with shared standardization.

    Streaming use: call :meth:`reset` then :meth:`predict_step` once per
    soft-sensor sample.
    """

    networks: list
    configs: list
    input_standardizer: Standardizer
    output_standardizer: Standardizer
    decimation: int = 1
    outputs: tuple = OUTPUT_CHANNELS

    def __post_init__(self):
        if len(self.networks) != len(self.outputs) or len(self.configs) != len(self.outputs):
            raise ConfigurationError("need one network and config per output channel")
        delays = {(c.input_delays, c.feedback_delays) for c in self.configs}
        if len(delays) != 1:
            raise ConfigurationError("all networks must share the same delay structure")
        self.input_delays, self.feedback_delays = delays.pop()
        for net, cfg in zip(self.networks, self.configs):
            if net.n_inputs != cfg.n_features(len(INPUT_CHANNELS)):
                raise ConfigurationError("network input width does not match its delay configuration")
        self.reset()

    def reset(self):
        m = len(INPUT_CHANNELS)
        self._u_hist = deque([np.zeros(m) for _ in range(self.input_delays)], maxlen=max(self.input_delays, 1))
        self._y_hist = [deque([0.0] * self.feedback_delays, maxlen=self.feedback_delays) for _ in self.networks]
        self.steps = 0

    @property
    def warming_up(self) -> bool:
        """True while the feedback line still holds cold-start zeros."""
        return self.steps <= self.feedback_delays

    def predict_step(self, u_ann):
        """Advance all networks one closed-loop step; returns SI-unit outputs."""
        u = self.input_standardizer.standardize(u_ann)
        past = list(self._u_hist) if self.input_delays else []
        u_feat = np.concatenate([u] + past)
        out = np.empty(len(self.networks))
        for i, (net, hist) in enumerate(zip(self.networks, self._y_hist)):
            feats = np.concatenate([u_feat, np.fromiter(hist, dtype=float)])
            out[i] = forward(net, feats[None, :])[0]
            hist.appendleft(out[i])
        if self.input_delays:
            self._u_hist.appendleft(u)
        self.steps += 1
        return self.output_standardizer.destandardize(out)

    def predict_sequence(self, U_raw):
        """Closed-loop predictions for a whole input sequence ``(T, 3)`` in SI units."""
        U = self.input_standardizer.standardize(U_raw)[None]
        cols = [closed_loop(net, U, cfg)[0] for net, cfg in zip(self.networks, self.configs)]
        return self.output_standardizer.destandardize(np.stack(cols, axis=1))

    def to_dict(self):
        return {
            "format": "hekf_kit.soft_sensor_bank",
            "version": FORMAT_VERSION,
            "outputs": list(self.outputs),
            "inputs": list(INPUT_CHANNELS),
            "decimation": self.decimation,
            "configs": [asdict(c) for c in self.configs],
            "networks": [n.to_dict() for n in self.networks],
            "input_standardizer": self.input_standardizer.to_dict(),
            "output_standardizer": self.output_standardizer.to_dict(),
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("format") != "hekf_kit.soft_sensor_bank" or d.get("version") != FORMAT_VERSION:
            raise ConfigurationError("not a version-1 soft-sensor bank file")
        bank = cls(
            networks=[Mlp.from_dict(n) for n in d["networks"]],
            configs=[NarxConfig(**c) for c in d["configs"]],
            input_standardizer=Standardizer.from_dict(d["input_standardizer"]),
            output_standardizer=Standardizer.from_dict(d["output_standardizer"]),
            decimation=int(d["decimation"]),
            outputs=tuple(d["outputs"]),
        )
        if bank.input_standardizer.mean.shape != (len(INPUT_CHANNELS),):
            raise ConfigurationError("input standardizer has the wrong number of channels")
        if bank.output_standardizer.mean.shape != (len(bank.outputs),):
            raise ConfigurationError("output standardizer has the wrong number of channels")
        return bank


def save_json(path, payload) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_json(path):
    with open(path) as fh:
        return json.load(fh)
