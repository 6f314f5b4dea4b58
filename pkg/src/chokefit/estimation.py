"""Parameter estimation: MLE/MAP objectives over the mechanistic and hybrid
choke models, mini-batch Adam/SGD training with multi-restart statistics,
closed-form linear solutions used as oracles, and identifiability diagnostics
built from the sensitivity matrix.

The regularized objective is

    J(phi) = sum_i (y_i - f(x_i; phi))^2
           + (phi_phys - mu)^T Pi (phi_phys - mu) + lam * ||phi_dd||^2,

with Pi = diag(sigma_eps^2 / sigma_i^2) from the physical-parameter priors
and plain weight decay on the network parameters. Disabling regularization
sets Pi and lam literally to zero, which reduces J to the least-squares
objective exactly.

Internally the trainer optimizes the physical parameters in prior-standardized
coordinates, theta_i = (phi_i - mu_i) / sigma_i, so one learning rate works
across quantities whose scales span five orders of magnitude; gradients and
results are reported in physical units.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import nnet, physics
from .data import Dataset
from .exceptions import ConfigError, SingularMatrixError, TrainingError
from .nnet import MlpParams
from .physics import (
    PARAM_NAMES_HM,
    PARAM_NAMES_MM,
    AreaSpec,
    FluidConstants,
    PhysicalParams,
)

#: Loss charged to a row whose model evaluation failed (infeasible iterate).
EVAL_FAILURE_PENALTY = 1.0e6

#: Rows with |y| below this floor [m3/h] are excluded from MAPE.
MAPE_FLOOR = 1.0e-6

#: Abort a restart when more than half of the rows fail to evaluate for this
#: many consecutive epochs.
MAX_FAILING_EPOCHS = 10

#: Serialization format version for fit-result files.
RESULT_FORMAT_VERSION = 1

# Purpose tags for seed derivation: every random draw uses
# default_rng([seed, restart_index, tag]).
SEED_TAG_PHYS_INIT = 1
SEED_TAG_MLP_INIT = 2
SEED_TAG_SHUFFLE = 3
SEED_TAG_SEARCH = 4


# ---------------------------------------------------------------------------
# Configuration types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PriorSpec:
    """Gaussian priors of the physical parameters, in canonical order."""

    means: np.ndarray
    sigmas: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "means", np.asarray(self.means, dtype=float))
        object.__setattr__(self, "sigmas", np.asarray(self.sigmas, dtype=float))
        if self.means.shape != (6,) or self.sigmas.shape != (6,):
            raise ConfigError("priors must cover all six physical parameters")
        if np.any(self.sigmas <= 0.0):
            raise ConfigError("prior standard deviations must be positive")

    @classmethod
    def default(cls) -> "PriorSpec":
        """Default prior table: mean and standard deviation per parameter."""
        return cls(
            means=np.array([800.0, 1025.0, 1.32, 0.027, 0.6, 0.9]),
            sigmas=np.array([33.3, 8.33, 0.033, 0.003, 0.067, 0.25]),
        )

    def for_mode(self, hm_mode: bool):
        """(means, sigmas) restricted to the mode's parameter set."""
        k = 5 if hm_mode else 6
        return self.means[:k], self.sigmas[:k]

    def as_dict(self) -> dict:
        return {n: [float(m), float(s)] for n, m, s in
                zip(PARAM_NAMES_MM, self.means, self.sigmas)}

    @classmethod
    def from_dict(cls, d: dict) -> "PriorSpec":
        unknown = set(d) - set(PARAM_NAMES_MM)
        if unknown:
            raise ConfigError(f"unknown prior entries: {sorted(unknown)}")
        base = cls.default()
        means, sigmas = base.means.copy(), base.sigmas.copy()
        for i, name in enumerate(PARAM_NAMES_MM):
            if name in d:
                means[i], sigmas[i] = float(d[name][0]), float(d[name][1])
        return cls(means, sigmas)


@dataclass(frozen=True)
class RegularizationConfig:
    """Strength of the parameter-regularization terms.

    sigma_eps is the noise-scale tuning constant [same units as the target];
    lam is the weight-decay strength on the network parameters. With
    ``enabled=False`` both terms are literally zero (exact MLE reduction).
    """

    sigma_eps: float = 1.0
    lam: float = 1.0e-4
    enabled: bool = True

    def __post_init__(self):
        if self.sigma_eps <= 0.0:
            raise ConfigError(f"sigma_eps must be positive, got {self.sigma_eps}")
        if self.lam < 0.0:
            raise ConfigError(f"lambda must be non-negative, got {self.lam}")

    def pi_diag(self, priors: PriorSpec, hm_mode: bool) -> np.ndarray:
        """Diagonal of Pi for the mode's parameter set; zero when disabled."""
        _, sigmas = priors.for_mode(hm_mode)
        if not self.enabled:
            return np.zeros_like(sigmas)
        return (self.sigma_eps / sigmas) ** 2

    @property
    def effective_lam(self) -> float:
        return self.lam if self.enabled else 0.0


@dataclass(frozen=True)
class FitConfig:
    """Optimizer settings for one training run."""

    optimizer: str = "adam"
    learning_rate: float = 1.0e-3
    batch_size: int = 32
    epochs: int = 2000
    restarts: int = 10
    seed: int = 0
    fixed_params: dict = field(default_factory=dict)
    mode: str = "mm"
    mlp_sizes: tuple = nnet.DEFAULT_SIZES
    mlp_area_scale: float = nnet.DEFAULT_AREA_SCALE

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if not (0.0 < self.learning_rate <= 1.0):
            raise ConfigError(f"learning rate must be in (0, 1], got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be non-negative, got {self.epochs}")
        if self.restarts < 1:
            raise ConfigError(f"restarts must be at least 1, got {self.restarts}")
        if self.mode not in ("mm", "hm"):
            raise ConfigError(f"mode must be 'mm' or 'hm', got {self.mode!r}")
        names = PARAM_NAMES_HM if self.mode == "hm" else PARAM_NAMES_MM
        unknown = set(self.fixed_params) - set(names)
        if unknown:
            raise ConfigError(
                f"fixed_params {sorted(unknown)} are not parameters of the "
                f"{self.mode} model"
            )

    @property
    def hm_mode(self) -> bool:
        return self.mode == "hm"

    @property
    def param_names(self) -> tuple:
        return PARAM_NAMES_HM if self.hm_mode else PARAM_NAMES_MM


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

class Metrics(NamedTuple):
    mae: float
    mape: float
    n_mape_excluded: int


def metrics(y_true, y_pred, mape_floor: float = MAPE_FLOOR) -> Metrics:
    """Mean absolute error [m3/h] and mean absolute percentage error [%].

    Rows with |y_true| below the floor are excluded from MAPE (division
    guard); the exclusion count is reported.
    """
    y_true = np.asarray(y_true, dtype=float)
    y_pred = np.asarray(y_pred, dtype=float)
    if y_true.shape != y_pred.shape or y_true.ndim != 1:
        raise ValueError("y_true and y_pred must be 1-d arrays of equal length")
    if y_true.size == 0:
        raise ValueError("metrics of an empty vector are undefined")
    abs_err = np.abs(y_true - y_pred)
    mae = float(np.mean(abs_err))
    keep = np.abs(y_true) >= mape_floor
    if np.any(keep):
        mape = float(np.mean(abs_err[keep] / np.abs(y_true[keep])) * 100.0)
    else:
        mape = math.nan
    return Metrics(mae, mape, int((~keep).sum()))


# ---------------------------------------------------------------------------
# Model evaluation over datasets
# ---------------------------------------------------------------------------

def predict_dataset(ds: Dataset, phi: PhysicalParams, mlp: MlpParams | None = None,
                    consts: FluidConstants = physics.DEFAULT_CONSTANTS,
                    area_spec: AreaSpec = physics.DEFAULT_AREA):
    """Predictions [m3/h] over a dataset; returns ``(pred, ok_mask)``.

    MM predictions use the parametric area curve; passing network parameters
    switches to the hybrid model's learned area.
    """
    if mlp is not None:
        area = nnet.batch_forward(ds.u, mlp)
    else:
        area = area_spec.area(ds.u)
    return physics.batch_oil_rate(ds.p1, ds.p2, ds.t1, ds.eta_g, ds.eta_o,
                                  area, phi.to_vector(), phi.hm_mode, consts)


class ObjectiveValue(NamedTuple):
    loss: float
    grad_phi: np.ndarray
    grad_mlp: np.ndarray | None
    n_failed: int


def mle_objective(ds: Dataset, phi: PhysicalParams, mode: str = "mm",
                  mlp: MlpParams | None = None,
                  consts: FluidConstants = physics.DEFAULT_CONSTANTS,
                  area_spec: AreaSpec = physics.DEFAULT_AREA) -> ObjectiveValue:
    """Sum-of-squares loss and its gradient in physical units.

    Rows that fail to evaluate receive a fixed penalty of
    ``EVAL_FAILURE_PENALTY`` with zero gradient contribution; the count is
    reported.
    """
    _check_mode(mode, phi, mlp)
    if len(ds) == 0:
        raise ValueError("objective over an empty dataset is undefined")
    if mlp is not None:
        area, cache = nnet.batch_forward(ds.u, mlp, keep_cache=True)
    else:
        area, cache = area_spec.area(ds.u), None
    q, dq_dphi, dq_darea, ok = physics.batch_oil_rate_gradients(
        ds.p1, ds.p2, ds.t1, ds.eta_g, ds.eta_o, area,
        phi.to_vector(), phi.hm_mode, consts)
    resid = np.where(ok, q - ds.y, 0.0)
    n_failed = int((~ok).sum())
    loss = float(np.sum(resid * resid)) + EVAL_FAILURE_PENALTY * n_failed
    dl_dq = 2.0 * resid
    grad_phi = dq_dphi.T @ dl_dq
    grad_mlp = None
    if mlp is not None:
        grad_mlp, _ = nnet.batch_backward(mlp, cache, dl_dq * dq_darea)
    return ObjectiveValue(loss, grad_phi, grad_mlp, n_failed)


def map_objective(ds: Dataset, phi: PhysicalParams, priors: PriorSpec,
                  reg: RegularizationConfig, mode: str = "mm",
                  mlp: MlpParams | None = None,
                  consts: FluidConstants = physics.DEFAULT_CONSTANTS,
                  area_spec: AreaSpec = physics.DEFAULT_AREA) -> ObjectiveValue:
    """Regularized objective: the MLE term plus the split physical /
    non-physical penalties. Reduces bit-for-bit to :func:`mle_objective`
    when regularization is disabled."""
    base = mle_objective(ds, phi, mode, mlp, consts, area_spec)
    if not reg.enabled:
        return base
    mu, _ = priors.for_mode(phi.hm_mode)
    pi = reg.pi_diag(priors, phi.hm_mode)
    dev = phi.to_vector() - mu
    loss = base.loss + float(dev @ (pi * dev))
    grad_phi = base.grad_phi + 2.0 * pi * dev
    grad_mlp = base.grad_mlp
    if mlp is not None:
        loss += reg.lam * nnet.l2_norm_sq(mlp)
        grad_mlp = grad_mlp + 2.0 * reg.lam * nnet.flatten(mlp)
    return ObjectiveValue(loss, grad_phi, grad_mlp, base.n_failed)


def _check_mode(mode: str, phi: PhysicalParams, mlp) -> None:
    if mode not in ("mm", "hm"):
        raise ConfigError(f"mode must be 'mm' or 'hm', got {mode!r}")
    if (mode == "hm") != phi.hm_mode:
        raise ConfigError("parameter hm_mode flag does not match the requested mode")
    if (mode == "hm") != (mlp is not None):
        raise ConfigError("hybrid mode requires network parameters, mm forbids them")


# ---------------------------------------------------------------------------
# Optimizer steps
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AdamState:
    """First/second moment accumulators and the step counter."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1.0e-8


def adam_step(params, gradients, state: AdamState, alpha: float):
    """One Adam update with bias correction; returns ``(params', state')``."""
    g = np.asarray(gradients, dtype=float)
    if not np.all(np.isfinite(g)):
        raise ValueError("non-finite gradient; step rejected")
    if state.m.shape != g.shape or state.v.shape != g.shape:
        raise ValueError("optimizer state is not shape-congruent with the gradient")
    t = state.t + 1
    m = ADAM_BETA1 * state.m + (1.0 - ADAM_BETA1) * g
    v = ADAM_BETA2 * state.v + (1.0 - ADAM_BETA2) * g * g
    m_hat = m / (1.0 - ADAM_BETA1 ** t)
    v_hat = v / (1.0 - ADAM_BETA2 ** t)
    new_params = np.asarray(params, dtype=float) - alpha * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    return new_params, AdamState(m, v, t)


def sgd_step(params, gradients, alpha: float):
    """Plain stochastic-gradient update: params - alpha * gradient."""
    if alpha <= 0.0:
        raise ValueError(f"learning rate must be positive, got {alpha}")
    g = np.asarray(gradients, dtype=float)
    if not np.all(np.isfinite(g)):
        raise ValueError("non-finite gradient; step rejected")
    return np.asarray(params, dtype=float) - alpha * g


# ---------------------------------------------------------------------------
# Closed-form linear solutions (oracles for the iterative engine)
# ---------------------------------------------------------------------------

def _solve_checked(mat: np.ndarray, rhs: np.ndarray, what: str) -> np.ndarray:
    sv = np.linalg.svd(mat, compute_uv=False)
    if sv[0] == 0.0 or sv[-1] <= 1.0e-12 * sv[0]:
        raise SingularMatrixError(f"{what} is singular to working precision")
    return np.linalg.solve(mat, rhs)


def linear_mle_closed_form(X, y) -> np.ndarray:
    """Normal-equations solution (X^T X)^-1 X^T y; raises on singular X^T X."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    return _solve_checked(X.T @ X, X.T @ y, "X^T X")


def linear_map_closed_form(X, y, pi_diag, mu) -> np.ndarray:
    """Regularized solution (Pi + X^T X)^-1 (X^T y + Pi mu).

    Pi is diagonal with non-negative entries; a positive Pi can make the
    problem uniquely solvable even when X^T X is rank-deficient.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    pi = np.asarray(pi_diag, dtype=float)
    mu = np.asarray(mu, dtype=float)
    if pi.ndim != 1 or pi.shape[0] != X.shape[1]:
        raise ValueError("pi_diag must hold one entry per column of X")
    if np.any(pi < 0.0):
        raise ValueError("Pi entries must be non-negative")
    return _solve_checked(np.diag(pi) + X.T @ X, X.T @ y + pi * mu, "Pi + X^T X")


def fit_linear_iterative(X, y, learning_rate: float | None = None,
                         steps: int = 20000, tol: float = 1.0e-12) -> np.ndarray:
    """Minimize ||y - X phi||^2 by full-batch gradient descent from zero.

    Exercises the generic iterative machinery on the one problem with a known
    closed form; the default step size is 1/L with L the gradient's Lipschitz
    constant.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if learning_rate is None:
        lmax = float(np.linalg.svd(X.T @ X, compute_uv=False)[0])
        learning_rate = 1.0 / (2.0 * lmax)
    phi = np.zeros(X.shape[1])
    for _ in range(steps):
        g = 2.0 * (X.T @ (X @ phi - y))
        if float(np.max(np.abs(g))) < tol:
            break
        phi = sgd_step(phi, g, learning_rate)
    return phi


# ---------------------------------------------------------------------------
# Sensitivity / identifiability diagnostics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SensitivityReport:
    """Jacobian of predictions with respect to the parameters plus its
    singular-value based rank diagnostic."""

    jacobian: np.ndarray
    singular_values: np.ndarray
    numerical_rank: int
    rank_tolerance: float
    identifiable: bool
    column_names: tuple
    column_scales: np.ndarray
    n_failed_rows: int


def sensitivity_matrix(ds: Dataset, phi: PhysicalParams, mode: str = "mm",
                       mlp: MlpParams | None = None,
                       priors: PriorSpec | None = None,
                       rank_tolerance: float = 1.0e-8,
                       consts: FluidConstants = physics.DEFAULT_CONSTANTS,
                       area_spec: AreaSpec = physics.DEFAULT_AREA) -> SensitivityReport:
    """Stack per-row parameter gradients into the n x m Jacobian and rate its
    numerical rank.

    Physical columns are scaled by their prior standard deviations before the
    SVD so mixed units do not distort the rank; network columns (hybrid mode)
    keep unit scale. Rows that fail to evaluate are excluded and counted.
    """
    _check_mode(mode, phi, mlp)
    if mlp is not None:
        area = nnet.batch_forward(ds.u, mlp)
    else:
        area = area_spec.area(ds.u)
    _, dq_dphi, dq_darea, ok = physics.batch_oil_rate_gradients(
        ds.p1, ds.p2, ds.t1, ds.eta_g, ds.eta_o, area,
        phi.to_vector(), phi.hm_mode, consts)

    names = list(phi.names)
    jac = dq_dphi
    if mlp is not None:
        per_row = nnet.batch_param_jacobian(ds.u, mlp)
        jac = np.concatenate([dq_dphi, dq_darea[:, None] * per_row], axis=1)
        names += [f"w{i}" for i in range(per_row.shape[1])]

    jac = jac[ok]
    n_failed = int((~ok).sum())

    pr = priors if priors is not None else PriorSpec.default()
    _, sigmas = pr.for_mode(phi.hm_mode)
    scales = np.ones(jac.shape[1])
    scales[: len(sigmas)] = sigmas
    sv = np.linalg.svd(jac * scales, compute_uv=False)
    sv = np.sort(sv)[::-1]
    rank = int(np.sum(sv > rank_tolerance * (sv[0] if sv.size else 0.0)))
    return SensitivityReport(
        jacobian=jac,
        singular_values=sv,
        numerical_rank=rank,
        rank_tolerance=rank_tolerance,
        identifiable=bool(rank == jac.shape[1]),
        column_names=tuple(names),
        column_scales=scales,
        n_failed_rows=n_failed,
    )


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RestartRecord:
    """Outcome of one optimization restart."""

    index: int
    params: PhysicalParams | None
    mlp: MlpParams | None
    loss_trace: np.ndarray
    test_mae: float
    test_mape: float
    diverged: bool = False
    failure_reason: str = ""
    n_eval_failures: int = 0


@dataclass(frozen=True)
class FitResult:
    """Per-restart outcomes plus min/median/max summaries."""

    mode: str
    records: tuple
    n_train: int
    n_test: int
    fit: FitConfig
    reg: RegularizationConfig
    priors: PriorSpec
    area_spec: AreaSpec
    constants: FluidConstants

    @property
    def ok_records(self) -> list:
        return [r for r in self.records if not r.diverged]

    def summary(self) -> dict:
        """min/median/max of the test metrics and of each parameter across
        non-diverged restarts; recomputable from the records."""
        recs = self.ok_records
        if not recs:
            return {}
        out = {}
        for key, values in (("test_mae", [r.test_mae for r in recs]),
                            ("test_mape", [r.test_mape for r in recs])):
            arr = np.asarray(values)
            out[key] = {"min": float(np.min(arr)), "median": float(np.median(arr)),
                        "max": float(np.max(arr))}
        names = recs[0].params.names
        for i, name in enumerate(names):
            arr = np.asarray([r.params.to_vector()[i] for r in recs])
            out[name] = {"min": float(np.min(arr)), "median": float(np.median(arr)),
                         "max": float(np.max(arr))}
        return out

    def median_record(self) -> RestartRecord:
        """The non-diverged restart whose test MAE is the median (lower of the
        two middle records for even counts)."""
        recs = sorted(self.ok_records, key=lambda r: r.test_mae)
        if not recs:
            raise TrainingError("no non-diverged restarts")
        return recs[(len(recs) - 1) // 2]


class _TrainState:
    """Flat-vector view of the trainable parameters of one restart.

    Layout: standardized free physical parameters first, then the flat
    network parameters (hybrid mode).
    """

    def __init__(self, fit: FitConfig, priors: PriorSpec, phi0: np.ndarray,
                 mlp0: MlpParams | None):
        self.hm = fit.hm_mode
        self.names = fit.param_names
        self.mu, self.sigma = priors.for_mode(self.hm)
        self.fixed_mask = np.array([n in fit.fixed_params for n in self.names])
        self.free_idx = np.flatnonzero(~self.fixed_mask)
        self.phi_full = phi0.copy()
        self.n_free = len(self.free_idx)
        self.mlp_sizes = mlp0.sizes if mlp0 is not None else None
        self.mlp_scale = mlp0.area_scale if mlp0 is not None else None
        theta = (phi0[self.free_idx] - self.mu[self.free_idx]) / self.sigma[self.free_idx]
        self.x = np.concatenate([theta, nnet.flatten(mlp0)]) if mlp0 is not None else theta

    def phi_vector(self, x: np.ndarray) -> np.ndarray:
        phi = self.phi_full.copy()
        phi[self.free_idx] = self.mu[self.free_idx] \
            + self.sigma[self.free_idx] * x[: self.n_free]
        return phi

    def mlp_flat(self, x: np.ndarray) -> np.ndarray:
        return x[self.n_free:]

    def mlp_params(self, x: np.ndarray) -> MlpParams | None:
        if not self.hm:
            return None
        return nnet.unflatten(self.mlp_flat(x), self.mlp_sizes, self.mlp_scale)

    def grad_to_x(self, grad_phi: np.ndarray, grad_mlp: np.ndarray | None) -> np.ndarray:
        g_theta = grad_phi[self.free_idx] * self.sigma[self.free_idx]
        if grad_mlp is None:
            return g_theta
        return np.concatenate([g_theta, grad_mlp])


def _draw_initial_params(fit: FitConfig, priors: PriorSpec, restart: int) -> np.ndarray:
    """Initial physical parameters ~ Normal(mu, sigma^2), redrawn (up to 100
    attempts each) until strictly positive; fixed parameters take their
    configured constants."""
    rng = np.random.default_rng([fit.seed, restart, SEED_TAG_PHYS_INIT])
    mu, sigma = priors.for_mode(fit.hm_mode)
    phi = np.empty(len(mu))
    for i in range(len(mu)):
        for _ in range(100):
            value = rng.normal(mu[i], sigma[i])
            if value > 0.0:
                break
        else:
            raise TrainingError(
                f"could not draw a positive initial value for {fit.param_names[i]}"
            )
        phi[i] = value
    for name, value in fit.fixed_params.items():
        phi[fit.param_names.index(name)] = float(value)
    return phi


def _minibatch_eval(state: _TrainState, x, batch, arrays, mm_area, reg, lam,
                    n_train, consts):
    """Mean-squared minibatch loss plus (1/n_train)-scaled regularization, and
    its gradient in the flat coordinates. Returns (loss, grad, n_failed)."""
    p1, p2, t1, eta_g, eta_o, u, y = arrays
    phi = state.phi_vector(x)
    mlp = state.mlp_params(x)
    if mlp is not None:
        area, cache = nnet.batch_forward(u[batch], mlp, keep_cache=True)
    else:
        area = mm_area[batch]
    q, dq_dphi, dq_darea, ok = physics.batch_oil_rate_gradients(
        p1[batch], p2[batch], t1[batch], eta_g[batch], eta_o[batch], area,
        phi, state.hm, consts)
    n_b = len(batch)
    resid = np.where(ok, q - y[batch], 0.0)
    n_failed = int((~ok).sum())
    loss = (float(resid @ resid) + EVAL_FAILURE_PENALTY * n_failed) / n_b
    dl_dq = (2.0 / n_b) * resid
    grad_phi = dq_dphi.T @ dl_dq
    grad_mlp = None
    if mlp is not None:
        grad_mlp, _ = nnet.batch_backward(mlp, cache, dl_dq * dq_darea)
    grad = state.grad_to_x(grad_phi, grad_mlp)

    if reg.enabled:
        mu, sigma = state.mu, state.sigma
        pi = (reg.sigma_eps / sigma) ** 2
        dev = phi - mu
        loss += float(dev @ (pi * dev)) / n_train
        g_reg_phi = 2.0 * pi * dev / n_train
        g_reg = state.grad_to_x(g_reg_phi, None)
        grad[: state.n_free] += g_reg
        if mlp is not None and lam > 0.0:
            w = state.mlp_flat(x)
            loss += lam * float(w @ w) / n_train
            grad[state.n_free:] += (2.0 * lam / n_train) * w
    return loss, grad, n_failed


def train(dataset_train: Dataset, dataset_test: Dataset, priors: PriorSpec,
          reg: RegularizationConfig, fit: FitConfig,
          consts: FluidConstants = physics.DEFAULT_CONSTANTS,
          area_spec: AreaSpec = physics.DEFAULT_AREA) -> FitResult:
    """Multi-restart mini-batch training of the mechanistic or hybrid model.

    Each restart draws physical initial values from the priors (truncated to
    positive), initializes the network (hybrid mode) with He initialization,
    runs shuffled mini-batch epochs, and records the final parameters, the
    training-loss trace, and test-set metrics. Fixed parameters are excluded
    from the updates. Raises :class:`TrainingError` if every restart diverges.
    """
    if len(dataset_train) == 0:
        raise TrainingError("training dataset is empty")
    if len(dataset_test) == 0:
        raise TrainingError("test dataset is empty")

    arrays = (dataset_train.p1, dataset_train.p2, dataset_train.t1,
              dataset_train.eta_g, dataset_train.eta_o, dataset_train.u,
              dataset_train.y)
    mm_area = None if fit.hm_mode else area_spec.area(dataset_train.u)
    n_train = len(dataset_train)
    lam = reg.effective_lam

    records = []
    for r in range(fit.restarts):
        records.append(_run_restart(r, fit, priors, reg, lam, arrays, mm_area,
                                    n_train, dataset_test, consts, area_spec))

    result = FitResult(
        mode=fit.mode, records=tuple(records), n_train=n_train,
        n_test=len(dataset_test), fit=fit, reg=reg, priors=priors,
        area_spec=area_spec, constants=consts,
    )
    if not result.ok_records:
        raise TrainingError(
            "all restarts diverged",
            diagnostics=[f"restart {r.index}: {r.failure_reason}" for r in records],
        )
    return result


def _run_restart(r, fit, priors, reg, lam, arrays, mm_area, n_train,
                 dataset_test, consts, area_spec) -> RestartRecord:
    phi0 = _draw_initial_params(fit, priors, r)
    mlp0 = None
    if fit.hm_mode:
        mlp0 = nnet.he_init([fit.seed, r, SEED_TAG_MLP_INIT], fit.mlp_sizes,
                            fit.mlp_area_scale)
    state = _TrainState(fit, priors, phi0, mlp0)
    x = state.x
    opt_state = AdamState.zeros(len(x)) if fit.optimizer == "adam" else None
    shuffle_rng = np.random.default_rng([fit.seed, r, SEED_TAG_SHUFFLE])

    trace = np.empty(fit.epochs)
    n_eval_failures = 0
    failing_epochs = 0
    diverged_reason = ""
    for epoch in range(fit.epochs):
        perm = shuffle_rng.permutation(n_train)
        epoch_loss = 0.0
        epoch_failures = 0
        n_batches = 0
        for start in range(0, n_train, fit.batch_size):
            batch = perm[start:start + fit.batch_size]
            loss, grad, n_failed = _minibatch_eval(
                state, x, batch, arrays, mm_area, reg, lam, n_train, consts)
            epoch_loss += loss
            epoch_failures += n_failed
            n_batches += 1
            if not (math.isfinite(loss) and np.all(np.isfinite(grad))):
                diverged_reason = f"non-finite loss or gradient at epoch {epoch}"
                break
            if fit.optimizer == "adam":
                x, opt_state = adam_step(x, grad, opt_state, fit.learning_rate)
            else:
                x = sgd_step(x, grad, fit.learning_rate)
        if diverged_reason:
            trace = trace[:epoch]
            break
        trace[epoch] = epoch_loss / n_batches
        n_eval_failures += epoch_failures
        failing_epochs = failing_epochs + 1 if epoch_failures > 0.5 * n_train else 0
        if failing_epochs >= MAX_FAILING_EPOCHS:
            diverged_reason = (
                f"more than half of the rows failed to evaluate for "
                f"{MAX_FAILING_EPOCHS} consecutive epochs (through epoch {epoch})"
            )
            trace = trace[:epoch + 1]
            break

    if diverged_reason:
        return RestartRecord(index=r, params=None, mlp=None, loss_trace=trace.copy(),
                             test_mae=math.nan, test_mape=math.nan, diverged=True,
                             failure_reason=diverged_reason,
                             n_eval_failures=n_eval_failures)

    phi_vec = state.phi_vector(x)
    mlp = state.mlp_params(x)
    try:
        params = PhysicalParams.from_vector(phi_vec, hm_mode=fit.hm_mode)
    except Exception as exc:
        return RestartRecord(index=r, params=None, mlp=None, loss_trace=trace.copy(),
                             test_mae=math.nan, test_mape=math.nan, diverged=True,
                             failure_reason=f"final parameters left the physical domain: {exc}",
                             n_eval_failures=n_eval_failures)

    pred, ok = predict_dataset(dataset_test, params, mlp, consts, area_spec)
    if not np.any(ok):
        return RestartRecord(index=r, params=params, mlp=mlp, loss_trace=trace.copy(),
                             test_mae=math.nan, test_mape=math.nan, diverged=True,
                             failure_reason="model not evaluable on the test set",
                             n_eval_failures=n_eval_failures)
    m = metrics(dataset_test.y[ok], pred[ok])
    return RestartRecord(index=r, params=params, mlp=mlp, loss_trace=trace.copy(),
                         test_mae=m.mae, test_mape=m.mape,
                         n_eval_failures=n_eval_failures)


# ---------------------------------------------------------------------------
# Hyperparameter search (log-uniform random search)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SearchSpace:
    """Log-uniform sampling ranges for the learning rate and weight decay."""

    lr_range: tuple = (1.0e-4, 1.0e-1)
    lam_range: tuple = (1.0e-8, 1.0e-2)

    def __post_init__(self):
        for name in ("lr_range", "lam_range"):
            lo, hi = getattr(self, name)
            if not (0.0 < lo <= hi):
                raise ConfigError(f"{name} must be positive and ordered, got ({lo}, {hi})")


@dataclass(frozen=True)
class TrialRecord:
    index: int
    learning_rate: float
    lam: float
    val_mae: float
    error: str = ""


@dataclass(frozen=True)
class SearchResult:
    best_learning_rate: float
    best_lam: float
    best_val_mae: float
    trials: tuple


def hyperparameter_search(dataset_train: Dataset, dataset_val: Dataset,
                          priors: PriorSpec, reg: RegularizationConfig,
                          fit: FitConfig, space: SearchSpace = SearchSpace(),
                          budget: int = 20, seed: int = 0,
                          trial_restarts: int = 3,
                          consts: FluidConstants = physics.DEFAULT_CONSTANTS,
                          area_spec: AreaSpec = physics.DEFAULT_AREA) -> SearchResult:
    """Random search over (learning rate, lambda) by validation MAE.

    Samples log-uniformly, trains each trial with a reduced number of
    restarts, and returns the incumbent plus the full trial log.
    """
    if budget < 1:
        raise ConfigError(f"budget must be at least 1, got {budget}")
    trials = []
    best = None
    for t in range(budget):
        rng = np.random.default_rng([seed, t, SEED_TAG_SEARCH])
        lr = float(np.exp(rng.uniform(*np.log(space.lr_range))))
        lam = float(np.exp(rng.uniform(*np.log(space.lam_range))))
        trial_fit = replace(fit, learning_rate=lr, seed=seed + 1000 + t,
                            restarts=min(fit.restarts, trial_restarts))
        trial_reg = replace(reg, lam=lam)
        try:
            result = train(dataset_train, dataset_val, priors, trial_reg,
                           trial_fit, consts, area_spec)
            val_mae = result.summary()["test_mae"]["median"]
            record = TrialRecord(t, lr, lam, val_mae)
            if best is None or val_mae < best.val_mae:
                best = record
        except TrainingError as exc:
            record = TrialRecord(t, lr, lam, math.nan, error=str(exc))
        trials.append(record)
    if best is None:
        raise TrainingError(
            "every search trial failed",
            diagnostics=[f"trial {t.index}: {t.error}" for t in trials],
        )
    return SearchResult(best.learning_rate, best.lam, best.val_mae, tuple(trials))


# ---------------------------------------------------------------------------
# FitResult serialization
# ---------------------------------------------------------------------------

def save_fit_result(result: FitResult, path) -> None:
    """Write a fit result as JSON; hybrid-model network parameters go to
    sidecar .npz files next to it (bit-exact round-trip)."""
    path = Path(path)
    doc = {
        "format_version": RESULT_FORMAT_VERSION,
        "mode": result.mode,
        "n_train": result.n_train,
        "n_test": result.n_test,
        "fit": {
            "optimizer": result.fit.optimizer,
            "learning_rate": result.fit.learning_rate,
            "batch_size": result.fit.batch_size,
            "epochs": result.fit.epochs,
            "restarts": result.fit.restarts,
            "seed": result.fit.seed,
            "fixed_params": result.fit.fixed_params,
            "mode": result.fit.mode,
            "mlp_sizes": list(result.fit.mlp_sizes),
            "mlp_area_scale": result.fit.mlp_area_scale,
        },
        "regularization": {
            "sigma_eps": result.reg.sigma_eps,
            "lambda": result.reg.lam,
            "enabled": result.reg.enabled,
        },
        "priors": result.priors.as_dict(),
        "area": {"a_max": result.area_spec.a_max, "shape": result.area_spec.shape},
        "constants": {
            "r_gas": result.constants.r_gas,
            "z1": result.constants.z1,
            "rho_o_st": result.constants.rho_o_st,
        },
        "summary": result.summary(),
        "restarts": [],
    }
    for rec in result.records:
        entry = {
            "index": rec.index,
            "diverged": rec.diverged,
            "failure_reason": rec.failure_reason,
            "n_eval_failures": rec.n_eval_failures,
            "test_mae": rec.test_mae,
            "test_mape": rec.test_mape,
            "loss_trace": [float(v) for v in rec.loss_trace],
            "params": None if rec.params is None else
                      dict(zip(rec.params.names, rec.params.to_vector().tolist())),
        }
        if rec.mlp is not None:
            mlp_name = f"{path.stem}_restart{rec.index}_mlp.npz"
            nnet.save_params(path.parent / mlp_name, rec.mlp)
            entry["mlp_file"] = mlp_name
        doc["restarts"].append(entry)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)


def load_fit_result(path) -> FitResult:
    """Read a fit result written by :func:`save_fit_result`."""
    path = Path(path)
    with open(path) as fh:
        doc = json.load(fh)
    version = doc.get("format_version")
    if version != RESULT_FORMAT_VERSION:
        raise ValueError(
            f"unsupported fit-result version {version!r}, expected {RESULT_FORMAT_VERSION}"
        )
    fit = FitConfig(
        optimizer=doc["fit"]["optimizer"],
        learning_rate=doc["fit"]["learning_rate"],
        batch_size=doc["fit"]["batch_size"],
        epochs=doc["fit"]["epochs"],
        restarts=doc["fit"]["restarts"],
        seed=doc["fit"]["seed"],
        fixed_params=doc["fit"]["fixed_params"],
        mode=doc["fit"]["mode"],
        mlp_sizes=tuple(doc["fit"]["mlp_sizes"]),
        mlp_area_scale=doc["fit"]["mlp_area_scale"],
    )
    reg = RegularizationConfig(
        sigma_eps=doc["regularization"]["sigma_eps"],
        lam=doc["regularization"]["lambda"],
        enabled=doc["regularization"]["enabled"],
    )
    priors = PriorSpec.from_dict(doc["priors"])
    area = AreaSpec(a_max=doc["area"]["a_max"], shape=doc["area"]["shape"])
    consts = FluidConstants(**doc["constants"])
    hm = doc["mode"] == "hm"
    records = []
    for entry in doc["restarts"]:
        params = None
        if entry["params"] is not None:
            params = PhysicalParams(hm_mode=hm, **entry["params"])
        mlp = None
        if entry.get("mlp_file"):
            mlp = nnet.load_params(path.parent / entry["mlp_file"])
        records.append(RestartRecord(
            index=entry["index"], params=params, mlp=mlp,
            loss_trace=np.asarray(entry["loss_trace"], dtype=float),
            test_mae=entry["test_mae"], test_mape=entry["test_mape"],
            diverged=entry["diverged"], failure_reason=entry["failure_reason"],
            n_eval_failures=entry["n_eval_failures"],
        ))
    return FitResult(
        mode=doc["mode"], records=tuple(records), n_train=doc["n_train"],
        n_test=doc["n_test"], fit=fit, reg=reg, priors=priors,
        area_spec=area, constants=consts,
    )
