"""Core SDE abstractions: model definition, time discretisation,
Euler-Maruyama simulation and transition densities.

Conventions used throughout the library:

* States are ``(..., d)`` arrays; any leading axes are batch axes
  (units, sub-intervals, Monte Carlo replicates).
* A model's ``drift(x, theta, b)`` / ``diffusion(x, theta, b)`` must
  broadcast over the leading axes of ``x`` and ``b`` and return
  ``(..., d)`` / ``(..., d, d)`` respectively.
* All densities are computed and accumulated in log space.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import DomainViolation, NonPsdMatrix, SingularCovariance, StatePathInvalid

LOG_2PI = float(np.log(2.0 * np.pi))

# Relative eigenvalue slack below which a symmetric matrix is declared
# not positive semi-definite.
_PSD_TOL = 1e-10


@dataclass
class SdeModel:
    """A d-dimensional Ito diffusion with unit-specific parameters.

    Args:
        dim: state dimension d.
        drift: ``(x, theta, b) -> (..., d)`` drift vector (state/time).
        diffusion: ``(x, theta, b) -> (..., d, d)`` symmetric PSD
            instantaneous covariance rate (state^2/time).
        drift_jacobian: optional ``(x, theta, b) -> (..., d, d)`` with
            entry ``[i, j] = d drift_i / d x_j``; required by the LNA.
        is_valid_state: optional predicate ``(x) -> (...,) bool`` marking
            states inside the model's domain (e.g. positive counts).
            Samplers treat proposals that exit the domain as
            zero-density rather than erroring.
    """

    dim: int
    drift: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    diffusion: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    drift_jacobian: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray] | None = None
    is_valid_state: Callable[[np.ndarray], np.ndarray] | None = None

    def valid(self, x: np.ndarray) -> np.ndarray:
        """Domain predicate applied along the last axis; True when unset."""
        if self.is_valid_state is None:
            return np.ones(np.shape(x)[:-1], dtype=bool)
        return np.asarray(self.is_valid_state(np.asarray(x)))


class TimeGrid:
    """Observation times plus the fine imputation grid between them.

    Interval j spans ``[t_j, t_{j+1}]`` and carries ``m_j`` Euler steps
    of exact width ``(t_{j+1} - t_j) / m_j``. Anchor (observation-time)
    points are shared, not duplicated, between adjacent intervals.
    """

    def __init__(self, obs_times, m_per_interval):
        obs_times = np.asarray(obs_times, dtype=float)
        if obs_times.ndim != 1 or obs_times.size < 2:
            raise ValueError("obs_times must be a 1-d array of at least two times")
        if not np.all(np.diff(obs_times) > 0):
            raise ValueError("obs_times must be strictly increasing")
        m = np.asarray(m_per_interval, dtype=int)
        if m.ndim == 0:
            m = np.full(obs_times.size - 1, int(m))
        if m.size != obs_times.size - 1:
            raise ValueError("need one m per observation interval")
        if np.any(m < 1):
            raise ValueError("m must be >= 1 in every interval")

        self.obs_times = obs_times
        self.m_per_interval = m
        self.anchor_indices = np.concatenate([[0], np.cumsum(m)])
        fine = [np.array([obs_times[0]])]
        for j in range(self.n_intervals):
            t0, t1 = obs_times[j], obs_times[j + 1]
            k = np.arange(1, m[j] + 1)
            fine.append(t0 + k * (t1 - t0) / m[j])
        self.fine_times = np.concatenate(fine)
        # exact anchors (linspace arithmetic can drift in the last ulp)
        self.fine_times[self.anchor_indices] = obs_times

    @property
    def n_intervals(self) -> int:
        return self.obs_times.size - 1

    @property
    def n_fine(self) -> int:
        return int(self.anchor_indices[-1]) + 1

    def dt(self, j: int) -> float:
        return (self.obs_times[j + 1] - self.obs_times[j]) / self.m_per_interval[j]

    def interval_slice(self, j: int) -> slice:
        """Fine-grid indices of interval j, both anchors included."""
        return slice(int(self.anchor_indices[j]), int(self.anchor_indices[j + 1]) + 1)

    @classmethod
    def uniform(cls, obs_times, m: int) -> "TimeGrid":
        return cls(obs_times, m)

    @classmethod
    def balanced(cls, obs_times, m_ref: int) -> "TimeGrid":
        """Per-interval m chosen so step widths are nearly equal.

        The reference interval is the one of median width; it gets
        ``m_ref`` steps and every other interval gets the step count
        that best matches the resulting target width.
        """
        obs_times = np.asarray(obs_times, dtype=float)
        widths = np.diff(obs_times)
        target = np.median(widths) / m_ref
        m = np.maximum(1, np.rint(widths / target).astype(int))
        return cls(obs_times, m)


@dataclass
class AugmentedPath:
    """One unit's latent trajectory on the fine grid."""

    unit_id: str
    values: np.ndarray  # (n_fine, d)

    def check(self, grid: TimeGrid) -> None:
        if self.values.shape[0] != grid.n_fine:
            raise ValueError("path length does not match the fine grid")


@dataclass
class ObsModel:
    """Linear-Gaussian observation of the latent state.

    ``noise_variance`` is either a constant (d_o, d_o) matrix or a
    function of the latent state returning one (used when the error
    variance scales with the state).
    """

    F: np.ndarray  # (d, d_o)
    noise_variance: np.ndarray | Callable[[np.ndarray], np.ndarray]

    def variance(self, x: np.ndarray) -> np.ndarray:
        if callable(self.noise_variance):
            return np.asarray(self.noise_variance(x))
        return np.asarray(self.noise_variance)


def sqrt_psd(M: np.ndarray) -> np.ndarray:
    """Square root L of a PSD matrix with ``L @ L.T = M``.

    Lower-triangular Cholesky when M is strictly positive definite;
    symmetric eigendecomposition square root otherwise. Accepts batched
    input ``(..., d, d)``.

    Raises:
        NonPsdMatrix: if an eigenvalue falls below ``-1e-10 * ||M||``.
    """
    M = np.asarray(M, dtype=float)
    try:
        return np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        pass
    w, U = np.linalg.eigh(0.5 * (M + np.swapaxes(M, -1, -2)))
    scale = np.maximum(np.abs(w).max(axis=-1, keepdims=True), 1.0)
    if np.any(w < -_PSD_TOL * scale):
        raise NonPsdMatrix("matrix has an eigenvalue below the PSD tolerance")
    w = np.clip(w, 0.0, None)
    return U * np.sqrt(w)[..., None, :] @ np.swapaxes(U, -1, -2)


def mvn_logpdf(x: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    """Batched multivariate normal log density.

    Shapes: x, mean ``(..., d)``; cov ``(..., d, d)``; returns ``(...)``.

    Raises:
        SingularCovariance: if any covariance is not positive definite.
    """
    x = np.asarray(x, dtype=float)
    diff = x - mean
    d = x.shape[-1]
    sign, logdet = np.linalg.slogdet(cov)
    if np.any(sign <= 0):
        raise SingularCovariance("covariance matrix is not positive definite")
    try:
        sol = np.linalg.solve(cov, diff[..., None])[..., 0]
    except np.linalg.LinAlgError as e:
        raise SingularCovariance(str(e)) from e
    quad = np.einsum("...i,...i->...", diff, sol)
    return -0.5 * (d * LOG_2PI + logdet + quad)


def euler_step(
    model: SdeModel,
    x: np.ndarray,
    theta: np.ndarray,
    b: np.ndarray,
    dt: float,
    z: np.ndarray,
) -> np.ndarray:
    """One Euler-Maruyama step ``x + a*dt + sqrt(beta) z sqrt(dt)``."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    x = np.asarray(x, dtype=float)
    if not np.all(model.valid(x)):
        raise DomainViolation("state outside the model domain")
    a = model.drift(x, theta, b)
    L = sqrt_psd(model.diffusion(x, theta, b))
    return x + a * dt + np.einsum("...ij,...j->...i", L, z) * np.sqrt(dt)


def euler_transition_logpdf(
    model: SdeModel,
    x_next: np.ndarray,
    x: np.ndarray,
    theta: np.ndarray,
    b: np.ndarray,
    dt: float,
) -> np.ndarray:
    """Log of ``N(x_next; x + a*dt, beta*dt)`` under the Euler scheme."""
    x = np.asarray(x, dtype=float)
    mean = x + model.drift(x, theta, b) * dt
    cov = model.diffusion(x, theta, b) * dt
    return mvn_logpdf(np.asarray(x_next, dtype=float), mean, cov)


def euler_path_loglik(
    model: SdeModel,
    values: np.ndarray,
    times: np.ndarray,
    theta: np.ndarray,
    b: np.ndarray,
) -> np.ndarray:
    """Euler log likelihood of complete discretised paths.

    ``values`` has shape ``(..., len(times), d)``, ``b`` broadcasts over
    the same leading axes. Returns the sum of all step transition log
    densities, shape ``(...)``. Paths containing invalid states score
    ``-inf`` rather than raising, matching MH auto-reject semantics.
    """
    values = np.asarray(values, dtype=float)
    dts = np.diff(np.asarray(times, dtype=float))
    prev = values[..., :-1, :]
    nxt = values[..., 1:, :]
    step_ok = model.valid(prev)
    ok = np.all(step_ok, axis=-1) & np.all(model.valid(values), axis=-1)
    if not np.all(step_ok):
        # placeholder keeps the batched linear algebra finite; the
        # affected paths are masked to -inf below
        prev = np.where(step_ok[..., None], prev, 1.0)
    b_step = np.asarray(b, dtype=float)[..., None, :]
    mean = prev + model.drift(prev, theta, b_step) * dts[:, None]
    cov = model.diffusion(prev, theta, b_step) * dts[:, None, None]
    sign, logdet = np.linalg.slogdet(cov)
    bad_cov = sign <= 0
    if np.any(bad_cov):
        ok = ok & ~np.any(bad_cov, axis=-1)
        eye = np.eye(values.shape[-1])
        cov = np.where(bad_cov[..., None, None], eye, cov)
        sign, logdet = np.linalg.slogdet(cov)
    diff = nxt - mean
    sol = np.linalg.solve(cov, diff[..., None])[..., 0]
    quad = np.einsum("...i,...i->...", diff, sol)
    lp = -0.5 * (values.shape[-1] * LOG_2PI + logdet + quad)
    total = lp.sum(axis=-1)
    return np.where(ok, total, -np.inf)


def simulate_path(
    model: SdeModel,
    x0: np.ndarray,
    theta: np.ndarray,
    b: np.ndarray,
    grid: TimeGrid,
    rng: np.random.Generator,
    unit_id: str = "0",
) -> AugmentedPath:
    """Forward Euler-Maruyama simulation over the whole fine grid.

    Deterministic given the generator state. Raises StatePathInvalid,
    reporting the failing time, if the path exits the model domain.
    """
    x0 = np.asarray(x0, dtype=float)
    if not np.all(model.valid(x0)):
        raise DomainViolation("initial state outside the model domain")
    values = np.empty((grid.n_fine, model.dim))
    values[0] = x0
    dts = np.diff(grid.fine_times)
    x = x0
    for k, dt in enumerate(dts):
        z = rng.standard_normal(model.dim)
        x = euler_step(model, x, theta, b, float(dt), z)
        if not np.all(model.valid(x)):
            t_fail = float(grid.fine_times[k + 1])
            raise StatePathInvalid(
                f"path exited the model domain at t={t_fail:g}", time=t_fail
            )
        values[k + 1] = x
    return AugmentedPath(unit_id=unit_id, values=values)
