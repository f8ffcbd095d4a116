"""Reparameterisation between latent paths and innovations.

Within each inter-observation interval the interior states are mapped
to standardised innovations: the k-th innovation increment is the
current state's deviation from the bridge-interpolation mean, whitened
by the bridge step covariance

    beta*(x_{k-1}) dt,   beta* = ((t_end - tau_k) / (t_end - tau_{k-1})) beta.

Innovations start at zero at every interval's left anchor and exist
only at interior points (the right anchor is conditioned on, and the
final step's whitening factor vanishes). Holding the innovations and
anchors fixed while changing parameters gives a deterministic path
update that breaks the degeneracy between the latent path's quadratic
variation and the diffusion parameters.

Full conditionals for the common parameters and the unit effects are
evaluated in innovation space: Euler path log likelihood of the
reconstructed path plus the log Jacobian determinant of the
innovation-to-path map, which is ``+1/2 log det(beta* dt)`` per interior
point (the determinant of the whitening factors).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import SingularCovariance, StatePathInvalid
from .sde import SdeModel, TimeGrid, euler_path_loglik


@dataclass
class InnovationPath:
    """One unit's innovations, stored per interval at interior points."""

    unit_id: str
    per_interval: list[np.ndarray]  # interval j: (m_j - 1, d)


def _interval_groups(grid: TimeGrid) -> dict[int, np.ndarray]:
    """Interval indices grouped by common sub-step count m."""
    groups: dict[int, list[int]] = {}
    for j, m in enumerate(grid.m_per_interval):
        groups.setdefault(int(m), []).append(j)
    return {m: np.asarray(idx) for m, idx in groups.items()}


def _gather(values: np.ndarray, grid: TimeGrid, intervals: np.ndarray, m: int) -> np.ndarray:
    """Stack interval slices: (..., n_fine, d) -> (..., G, m+1, d)."""
    idx = grid.anchor_indices[intervals][:, None] + np.arange(m + 1)[None, :]
    return values[..., idx, :]


def _chol(cov: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as e:
        raise SingularCovariance("beta* is not positive definite at an interior point") from e


def _interval_dts(grid: TimeGrid, intervals: np.ndarray, m: int) -> np.ndarray:
    widths = np.diff(grid.obs_times)[intervals]
    return widths / m


def x_to_z_all(
    model: SdeModel,
    grid: TimeGrid,
    values: np.ndarray,
    theta: np.ndarray,
    b: np.ndarray,
) -> list[np.ndarray]:
    """Innovations of full fine-grid paths.

    ``values``: (..., n_fine, d); ``b`` broadcasts over the leading
    axes. Returns one (..., m_j - 1, d) array per interval (empty when
    m_j = 1). Deterministic and exactly inverted by ``z_to_x_all``.
    """
    values = np.asarray(values, dtype=float)
    out: list[np.ndarray | None] = [None] * grid.n_intervals
    batch = values.shape[:-2]
    b_g = np.asarray(b, dtype=float)[..., None, :]
    for m, intervals in _interval_groups(grid).items():
        xs = _gather(values, grid, intervals, m)  # (..., G, m+1, d)
        dts = _interval_dts(grid, intervals, m)  # (G,)
        anchor = xs[..., m, :]
        z = np.zeros(batch + (len(intervals), model.dim))
        zs = np.empty(batch + (len(intervals), m - 1, model.dim))
        for k in range(1, m):
            x_prev = xs[..., k - 1, :]
            ratio = (m - k) / (m - k + 1)
            d_minus = (m - k + 1) * dts  # t_end - tau_{k-1}
            mean_inc = (anchor - x_prev) * (dts / d_minus)[:, None]
            bstar_dt = ratio * model.diffusion(x_prev, theta, b_g) * dts[:, None, None]
            L = _chol(bstar_dt)
            resid = xs[..., k, :] - x_prev - mean_inc
            inc = np.linalg.solve(L, resid[..., None])[..., 0]
            z = z + inc
            zs[..., k - 1, :] = z
        for g, j in enumerate(intervals):
            out[j] = zs[..., g, :, :]
    return [np.asarray(o) for o in out]


def z_to_x_all(
    model: SdeModel,
    grid: TimeGrid,
    z_list: list[np.ndarray],
    anchors: np.ndarray,
    theta: np.ndarray,
    b: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Reconstruct fine-grid paths from innovations and fixed anchors.

    ``anchors``: (..., n+1, d) states at observation times; these are
    never altered, for any parameter value. Returns ``(values, valid)``
    where ``valid`` flags paths whose reconstruction stayed inside the
    model domain (callers auto-reject parameter proposals otherwise).
    """
    anchors = np.asarray(anchors, dtype=float)
    batch = anchors.shape[:-2]
    values = np.empty(batch + (grid.n_fine, model.dim))
    values[..., grid.anchor_indices, :] = anchors
    valid = np.all(model.valid(anchors), axis=-1)  # reduce the n+1 anchor axis
    b_g = np.asarray(b, dtype=float)[..., None, :]
    for m, intervals in _interval_groups(grid).items():
        if m == 1:
            continue
        dts = _interval_dts(grid, intervals, m)
        x0 = anchors[..., intervals, :]
        anchor_end = anchors[..., intervals + 1, :]
        zs = np.stack([z_list[j] for j in intervals], axis=-3)  # (..., G, m-1, d)
        xs = np.empty(batch + (len(intervals), m + 1, model.dim))
        xs[..., 0, :] = x0
        x_prev = x0
        z_prev = np.zeros(batch + (len(intervals), model.dim))
        alive = np.ones(batch + (len(intervals),), dtype=bool)
        for k in range(1, m):
            safe_prev = np.where(alive[..., None], x_prev, x0)
            ratio = (m - k) / (m - k + 1)
            d_minus = (m - k + 1) * dts
            mean = safe_prev + (anchor_end - safe_prev) * (dts / d_minus)[:, None]
            bstar_dt = ratio * model.diffusion(safe_prev, theta, b_g) * dts[:, None, None]
            L = _chol(bstar_dt)
            inc = zs[..., k - 1, :] - z_prev
            x_k = mean + np.einsum("...ij,...j->...i", L, inc)
            alive = alive & np.all(model.valid(x_k), axis=-1)
            xs[..., k, :] = x_k
            x_prev = x_k
            z_prev = zs[..., k - 1, :]
        xs[..., m, :] = anchor_end
        idx = grid.anchor_indices[intervals][:, None] + np.arange(1, m)[None, :]
        values[..., idx, :] = xs[..., 1:m, :]
        interval_ok = np.all(alive, axis=-1)
        valid = valid & interval_ok
    return values, valid


def log_jacobian_all(
    model: SdeModel,
    grid: TimeGrid,
    values: np.ndarray,
    theta: np.ndarray,
    b: np.ndarray,
) -> np.ndarray:
    """Log Jacobian determinant of the innovation-to-path map.

    Interior points only: ``sum_j sum_{k=1}^{m_j - 1}
    (1/2) log det(beta*(x_{tau_{j,k-1}}) dt_j)``. Batched over the
    leading axes of ``values``.
    """
    values = np.asarray(values, dtype=float)
    batch = values.shape[:-2]
    total = np.zeros(batch)
    b_g = np.asarray(b, dtype=float)[..., None, None, :]
    for m, intervals in _interval_groups(grid).items():
        if m == 1:
            continue
        xs = _gather(values, grid, intervals, m)
        dts = _interval_dts(grid, intervals, m)
        x_prev = xs[..., 0 : m - 1, :]  # states entering interior steps
        k = np.arange(1, m)
        ratio = (m - k) / (m - k + 1)
        bstar_dt = (
            model.diffusion(x_prev, theta, b_g)
            * (ratio * dts[:, None])[..., None, None]
        )
        sign, logdet = np.linalg.slogdet(bstar_dt)
        if np.any(sign <= 0):
            raise SingularCovariance("beta* is not positive definite at an interior point")
        total = total + 0.5 * logdet.sum(axis=(-1, -2))
    return total


# ---------------------------------------------------------------------------
# single-unit wrappers matching the sampler's full-conditional notation
# ---------------------------------------------------------------------------


def x_to_z(
    model: SdeModel,
    grid: TimeGrid,
    values: np.ndarray,
    theta: np.ndarray,
    b: np.ndarray,
    unit_id: str = "0",
) -> InnovationPath:
    """Innovations of one unit's path (anchors are read off the path)."""
    return InnovationPath(
        unit_id=unit_id,
        per_interval=x_to_z_all(model, grid, np.asarray(values, dtype=float), theta, b),
    )


def z_to_x(
    model: SdeModel,
    grid: TimeGrid,
    z: InnovationPath,
    anchors: np.ndarray,
    theta: np.ndarray,
    b: np.ndarray,
) -> np.ndarray:
    """Path reconstruction for one unit; anchors stay bit-identical."""
    values, valid = z_to_x_all(model, grid, z.per_interval, anchors, theta, b)
    if not np.all(valid):
        raise StatePathInvalid("reconstructed path exited the model domain")
    return values


def log_jacobian(
    model: SdeModel,
    grid: TimeGrid,
    values: np.ndarray,
    theta: np.ndarray,
    b: np.ndarray,
) -> float:
    """Scalar log Jacobian of one unit's innovation map (0 when m=1)."""
    return float(log_jacobian_all(model, grid, np.asarray(values, dtype=float), theta, b))


def theta_logfc(
    model: SdeModel,
    grid: TimeGrid,
    theta: np.ndarray,
    b: np.ndarray,
    z_units: list[list[np.ndarray]],
    anchors: np.ndarray,
    log_prior,
) -> float:
    """Full-conditional log density of the common parameters.

    ``z_units`` holds each unit's per-interval innovations, ``anchors``
    is (N, n+1, d), ``b`` is (N, q). Returns ``-inf`` when the prior
    support or the state domain is violated.
    """
    lp = float(log_prior(theta))
    if not np.isfinite(lp):
        return -np.inf
    n_units = anchors.shape[0]
    total = lp
    for i in range(n_units):
        values, valid = z_to_x_all(model, grid, z_units[i], anchors[i], theta, b[i])
        if not np.all(valid):
            return -np.inf
        ll = float(euler_path_loglik(model, values, grid.fine_times, theta, b[i]))
        if not np.isfinite(ll):
            return -np.inf
        total += ll + float(log_jacobian_all(model, grid, values, theta, b[i]))
    return total


def b_logfc(
    model: SdeModel,
    grid: TimeGrid,
    b_i: np.ndarray,
    theta: np.ndarray,
    psi: np.ndarray,
    z_i: list[np.ndarray],
    anchors_i: np.ndarray,
    log_prior_b,
) -> float:
    """Full-conditional log density of one unit's effects."""
    lp = float(log_prior_b(b_i, psi))
    if not np.isfinite(lp):
        return -np.inf
    values, valid = z_to_x_all(model, grid, z_i, anchors_i, theta, b_i)
    if not np.all(valid):
        return -np.inf
    ll = float(euler_path_loglik(model, values, grid.fine_times, theta, b_i))
    if not np.isfinite(ll):
        return -np.inf
    return lp + ll + float(log_jacobian_all(model, grid, values, theta, b_i))
