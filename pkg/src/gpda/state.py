"""Containers for data, hyperparameters and the variational state."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
from scipy.special import digamma

from .banded import BandedCholeskyFactor, SymTridiagonal, cholesky_banded, sparse_inverse_subset
from .ising import IsingHyperprior, IsingParams
from .sde import GridSpec, MomentField

__all__ = [
    "EMPTY",
    "CLASSES",
    "FunctionalDataset",
    "Hyperparams",
    "InvGamma",
    "GaussianField",
    "LatentBatch",
    "ModelState",
]

# index of the shared (non-discriminative) component in every per-class list
EMPTY = 2
CLASSES = (0, 1, EMPTY)


@dataclass
class FunctionalDataset:
    """n x T observation matrix on an equally spaced grid, with optional 0/1 labels."""

    X: np.ndarray
    y: np.ndarray | None
    grid: GridSpec

    def __post_init__(self):
        self.X = np.ascontiguousarray(self.X, dtype=np.float64)
        if self.X.ndim != 2:
            raise ValueError("X must be a 2-D array")
        if self.X.shape[1] != self.grid.T:
            raise ValueError(f"X has {self.X.shape[1]} columns, grid has T={self.grid.T}")
        if not np.all(np.isfinite(self.X)):
            raise ValueError("X contains missing or non-finite values")
        if self.y is not None:
            y = np.asarray(self.y)
            if y.shape != (self.X.shape[0],):
                raise ValueError("y must have one label per row of X")
            if not np.all((y == 0) | (y == 1)):
                raise ValueError("labels must be 0 or 1")
            self.y = y.astype(np.int64)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def T(self) -> int:
        return self.grid.T

    def class_counts(self):
        if self.y is None:
            raise ValueError("dataset is unlabeled")
        n1 = int(self.y.sum())
        return self.n - n1, n1

    def check_trainable(self):
        n0, n1 = self.class_counts()
        if n0 < 1 or n1 < 1:
            raise ValueError("training data must contain both classes")

    def subset(self, rows) -> "FunctionalDataset":
        y = None if self.y is None else self.y[rows]
        return FunctionalDataset(self.X[rows], y, self.grid)


@dataclass
class Hyperparams:
    """Prior hyperparameters. ``None`` entries are resolved from the grid."""

    A_tau_tilde: float = 2.0
    B_tau_tilde: float = 1.0
    A_eps: float = 2.0
    B_eps: float = 1.0
    A_tau: float = 2.0
    B_tau: float = 1.0
    A_tau2: float = 2.0
    B_tau2: float = 1.0
    A_eta: float = 2.0
    B_eta: float = 1.0
    mu_lambda_tilde: float | None = None
    sigma_lambda_tilde: float = 1.0
    mu_lambda: float | None = None
    sigma_lambda: float = 1.0
    mu_nu_tilde: float | None = None
    mu_nu: float = 0.0
    sigma_zeta_sq: float = 1.0
    alpha_mean: float = 0.0
    alpha_sd: float | None = 10.0
    log_beta_mean: float = 0.0
    log_beta_sd: float | None = 1.5

    def __post_init__(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if (f.name.startswith(("A_", "B_", "sigma_")) or f.name.endswith("_sd")) and v is not None and not v > 0:
                raise ValueError(f"hyperparameter {f.name} must be positive, got {v}")

    def resolved(self, grid: GridSpec) -> "Hyperparams":
        # length-scales of the level-2 processes default to a tenth of the domain,
        # mean-function log length-scales to ten grid cells
        span = np.log(max(0.1 * grid.T * grid.delta, 1.5 * grid.delta))
        return dataclasses.replace(
            self,
            mu_lambda_tilde=span if self.mu_lambda_tilde is None else self.mu_lambda_tilde,
            mu_lambda=span if self.mu_lambda is None else self.mu_lambda,
            mu_nu_tilde=np.log(10.0 * grid.delta) if self.mu_nu_tilde is None else self.mu_nu_tilde,
        )

    def ising_hyperprior(self) -> IsingHyperprior:
        return IsingHyperprior(self.alpha_mean, self.alpha_sd, self.log_beta_mean, self.log_beta_sd)

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclass
class InvGamma:
    """Inverse-gamma factor; ``a`` and ``b`` may be scalars or arrays."""

    a: np.ndarray | float
    b: np.ndarray | float

    @property
    def mean_inv(self):
        return self.a / self.b

    @property
    def mean_log(self):
        return np.log(self.b) - digamma(self.a)


@dataclass
class GaussianField:
    """N(mean, (L L^T)^{-1}) over a length-T field with a bidiagonal precision factor."""

    mean: np.ndarray
    factor: BandedCholeskyFactor
    inv_diag: np.ndarray = field(init=False)
    inv_off: np.ndarray = field(init=False)

    def __post_init__(self):
        self.mean = np.ascontiguousarray(self.mean, dtype=np.float64)
        inv = sparse_inverse_subset(self.factor)
        self.inv_diag = inv.inv_diag
        self.inv_off = inv.inv_off

    @classmethod
    def from_precision(cls, mean, Q: SymTridiagonal) -> "GaussianField":
        return cls(mean, cholesky_banded(Q))

    @property
    def T(self) -> int:
        return self.mean.shape[0]

    @property
    def precision(self) -> SymTridiagonal:
        return self.factor.reconstruct()

    @property
    def moments(self) -> MomentField:
        return MomentField(self.mean, self.inv_diag)

    def log_det_precision(self) -> float:
        return 2.0 * float(np.sum(np.log(self.factor.ldiag)))

    def second_moment(self, center=0.0):
        """Tridiagonal part of E[(v - c)(v - c)^T]."""
        d = self.mean - center
        return d * d + self.inv_diag, d[:-1] * d[1:] + self.inv_off


@dataclass
class LatentBatch:
    """q(z_i) for all observations, row-batched."""

    mean: np.ndarray
    ldiag: np.ndarray
    lsub: np.ndarray
    inv_diag: np.ndarray
    inv_off: np.ndarray

    @property
    def n(self) -> int:
        return self.mean.shape[0]

    def log_det_precision(self) -> np.ndarray:
        return 2.0 * np.sum(np.log(self.ldiag), axis=1)

    def second_moment(self):
        m = self.mean
        return m * m + self.inv_diag, m[:, :-1] * m[:, 1:] + self.inv_off

    def field(self, i) -> GaussianField:
        return GaussianField(self.mean[i].copy(), BandedCholeskyFactor(self.ldiag[i], self.lsub[i]))

    def rows(self, idx) -> "LatentBatch":
        return LatentBatch(*(np.ascontiguousarray(arr[idx]) for arr in
                             (self.mean, self.ldiag, self.lsub, self.inv_diag, self.inv_off)))


@dataclass
class ModelState:
    """Every variational factor and MAP estimate of one fitted model."""

    grid: GridSpec
    hyper: Hyperparams
    class_counts: tuple
    q_mu: list
    q_nu: list
    q_tau_tilde: list
    q_sigma: InvGamma
    q_z: LatentBatch
    q_tau: InvGamma
    q_R: GaussianField
    w: np.ndarray
    zeta: np.ndarray
    lam: float
    tau2: float
    eta_tilde: float
    lambda_tilde: float
    ising: IsingParams
    elbo_trace: list = field(default_factory=list)
    converged: bool = False
    n_sweeps: int = 0
    notes: list = field(default_factory=list)

    @property
    def T(self) -> int:
        return self.grid.T

    def selected(self, threshold: float = 0.5) -> np.ndarray:
        return (self.w >= threshold).astype(np.int64)
