"""Discrete-time extended Kalman filter with additive Gaussian noise.

The filter is model-agnostic: a :class:`FilterModel` bundles a (batch-capable)
transition ``f(x, u)`` and an output map ``h(x)``.  Jacobians default to
central finite differences; models may supply analytic ones.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import ConfigurationError, NumericalFailure

REL_STEP = 1e-6
ABS_STEP = 1e-6
PSD_TOL = 1e-9


@dataclass
class GaussianBelief:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.cov = np.asarray(self.cov, dtype=float)
        n = self.mean.shape[0]
        if self.mean.shape != (n,) or self.cov.shape != (n, n):
            raise ConfigurationError(
                f"belief shapes mismatch: mean {self.mean.shape}, cov {self.cov.shape}")

    @property
    def variances(self):
        return np.diag(self.cov).copy()

    def copy(self):
        return GaussianBelief(self.mean.copy(), self.cov.copy())


@dataclass
class FilterModel:
    """Callbacks describing one state-space model.

    ``transition(x, u)`` must accept a stack of states ``(B, n)`` so the
    numeric Jacobian can evaluate all perturbations in one call.
    ``postprocess`` is applied to the mean after each correction (used to
    clamp states to their physical range).
    """

    transition: Callable
    measure: Callable
    state_jacobian: Optional[Callable] = None
    output_jacobian: Optional[Callable] = None
    postprocess: Optional[Callable] = None


def check_covariance(P, where=""):
    """Raise :class:`NumericalFailure` unless ``P`` is finite, symmetric and PSD."""
    if not np.all(np.isfinite(P)):
        raise NumericalFailure(f"non-finite covariance {where}".strip())
    scale = max(np.max(np.abs(P)), 1e-300)
    if np.max(np.abs(P - P.T)) > 1e-9 * scale:
        raise NumericalFailure(f"asymmetric covariance {where}".strip())
    eig = np.linalg.eigvalsh(P)
    if eig[0] < -PSD_TOL * max(eig[-1], 1.0):
        raise NumericalFailure(f"covariance not PSD (min eigenvalue {eig[0]:.3e}) {where}".strip())


def _steps(x):
    return np.maximum(ABS_STEP, REL_STEP * np.abs(x))


def numeric_jacobian(func, x, steps=None):
    """Central-difference Jacobian of a batch-capable ``func`` at ``x``.

    Returns ``(func(x), J)``.  All ``2n + 1`` evaluations go through a single
    batched call.
    """
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    h = _steps(x) if steps is None else np.asarray(steps, dtype=float)
    plus = x + np.diag(h)
    minus = x - np.diag(h)
    out = np.asarray(func(np.vstack([x[None, :], plus, minus])))
    f0, fp, fm = out[0], out[1:n + 1], out[n + 1:]
    # divide by the representable step actually taken
    width = np.diag(plus) - np.diag(minus)
    J = ((fp - fm) / width[:, None]).T
    if not (np.all(np.isfinite(J)) and np.all(np.isfinite(f0))):
        raise NumericalFailure("non-finite Jacobian entries")
    return f0, J


def jacobian_state(model: FilterModel, mean, u):
    """Return ``(f(mean, u), A)`` with ``A = df/dx`` at ``mean``."""
    if model.state_jacobian is not None:
        A = np.asarray(model.state_jacobian(mean, u), dtype=float)
        return np.asarray(model.transition(mean, u), dtype=float), A
    return numeric_jacobian(lambda X: model.transition(X, u), mean)


def jacobian_output(model: FilterModel, mean):
    if model.output_jacobian is not None:
        return np.asarray(model.output_jacobian(mean), dtype=float)
    return numeric_jacobian(model.measure, mean)[1]


def predict(model: FilterModel, belief: GaussianBelief, u, Q) -> GaussianBelief:
    """Prediction step: ``x = f(x, u)``, ``P = A P A^T + Q``."""
    x_pred, A = jacobian_state(model, belief.mean, u)
    P = A @ belief.cov @ A.T + Q
    P = 0.5 * (P + P.T)
    if not np.all(np.isfinite(x_pred)):
        raise NumericalFailure("non-finite predicted mean")
    check_covariance(P, "after predict")
    return GaussianBelief(x_pred, P)


def correct(model: FilterModel, belief: GaussianBelief, y, R, joseph: bool = False) -> GaussianBelief:
    """Correction step with gain ``K = P C^T (C P C^T + R)^-1``.

    The default covariance update is ``(I - K C) P``; ``joseph=True`` selects
    the Joseph form ``(I - K C) P (I - K C)^T + K R K^T``.
    """
    x, P = belief.mean, belief.cov
    C = jacobian_output(model, x)
    R = np.atleast_2d(np.asarray(R, dtype=float))
    S = C @ P @ C.T + R
    S = 0.5 * (S + S.T)
    # judge singularity on the unit-diagonal version so that mixed units or
    # a strongly inflated channel do not look ill-conditioned
    d = np.sqrt(np.abs(np.diag(S)))
    if not np.all(np.isfinite(d)) or np.any(d == 0):
        raise NumericalFailure("innovation covariance has a zero or non-finite diagonal")
    cond = np.linalg.cond(S / np.outer(d, d))
    if not np.isfinite(cond) or cond > 1e12:
        raise NumericalFailure(f"innovation covariance is singular (condition number {cond:.3e})")
    K = np.linalg.solve(S, C @ P).T
    innovation = np.atleast_1d(np.asarray(y, dtype=float)) - np.atleast_1d(model.measure(x))
    x_new = x + K @ innovation
    IKC = np.eye(x.shape[0]) - K @ C
    if joseph:
        P_new = IKC @ P @ IKC.T + K @ R @ K.T
    else:
        P_new = IKC @ P
    P_new = 0.5 * (P_new + P_new.T)
    if model.postprocess is not None:
        x_new = model.postprocess(x_new)
    if not np.all(np.isfinite(x_new)):
        raise NumericalFailure("non-finite corrected mean")
    check_covariance(P_new, "after correct")
    return GaussianBelief(x_new, P_new)


def linear_model(F, H, B=None) -> FilterModel:
    """Wrap a linear system ``x' = F x (+ B u)``, ``y = H x`` as a FilterModel."""
    F = np.asarray(F, dtype=float)
    H = np.asarray(H, dtype=float)

    def transition(x, u):
        out = np.asarray(x) @ F.T
        if B is not None:
            out = out + np.asarray(u) @ np.asarray(B, dtype=float).T
        return out

    return FilterModel(
        transition=transition,
        measure=lambda x: np.asarray(x) @ H.T,
        state_jacobian=lambda x, u: F,
        output_jacobian=lambda x: H,
    )


def nees(error, cov):
    """Normalised estimation error squared ``e^T P^-1 e``."""
    error = np.asarray(error, dtype=float)
    return float(error @ np.linalg.solve(cov, error))
