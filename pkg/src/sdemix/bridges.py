"""Conditioned-path proposal generators.

Two constructs are provided for sampling a discretised diffusion path
over one inter-observation interval, conditional on the start state and
either an exact end state or a noisy linear-Gaussian observation of it:

* the modified diffusion bridge (MDB), which guides the path linearly
  toward the end datum and ignores the drift when the end state is
  observed exactly; and
* the residual bridge, which first solves the deterministic drift ODE
  from the start state and applies the MDB recursion to the residual
  ``R_t = X_t - eta_t``, so the proposal tracks nonlinear dynamics.

Both return exact proposal log densities for Metropolis-Hastings
correction. Operations accept batched problems: ``x_start``, ``b`` and
the end datum may carry a leading batch axis.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import SingularCovariance, StatePathInvalid
from .ode import rk4_path
from .sde import SdeModel, euler_path_loglik, mvn_logpdf, sqrt_psd

MDB = "mdb"
RESIDUAL = "residual"


@dataclass(frozen=True)
class Observation:
    """Noisy end condition ``y ~ N(F^T x_end, sigma_eff)``.

    ``sigma_eff`` must be a constant matrix over the interval; models
    with state-dependent observation noise resolve it once per interval
    (the MH correction absorbs the approximation).
    """

    y: np.ndarray  # (d_o,) or (B, d_o)
    F: np.ndarray  # (d, d_o)
    sigma_eff: np.ndarray  # (d_o, d_o) or (B, d_o, d_o)


@dataclass(frozen=True)
class ExactState:
    """End condition: the bridge terminates exactly at ``x_end``."""

    x_end: np.ndarray  # (d,) or (B, d)


@dataclass
class BridgeProblem:
    """One interval's conditioning data consumed by the bridge samplers."""

    model: SdeModel
    theta: np.ndarray
    b: np.ndarray  # (q,) or (B, q)
    t_start: float
    t_end: float
    x_start: np.ndarray  # (d,) or (B, d)
    end: Observation | ExactState
    sub_steps: int

    def __post_init__(self):
        if self.t_end <= self.t_start:
            raise ValueError("t_end must exceed t_start")
        if self.sub_steps < 1:
            raise ValueError("sub_steps must be >= 1")

    @property
    def taus(self) -> np.ndarray:
        return np.linspace(self.t_start, self.t_end, self.sub_steps + 1)

    @property
    def dt(self) -> float:
        return (self.t_end - self.t_start) / self.sub_steps

    @property
    def batched(self) -> bool:
        return np.asarray(self.x_start).ndim > 1

    def free_steps(self) -> int:
        """Number of sampled steps: the end state is assigned, not
        sampled, under an ExactState condition."""
        m = self.sub_steps
        return m if isinstance(self.end, Observation) else m - 1


class Gaussian(NamedTuple):
    mean: np.ndarray
    cov: np.ndarray


@dataclass
class EtaPath:
    """Deterministic drift-ODE skeleton on the sub-grid."""

    values: np.ndarray  # (m+1, d) or (B, m+1, d)


@dataclass
class BridgeDraw:
    """A sampled bridge with its proposal log density.

    ``valid`` marks batch elements whose states stayed inside the model
    domain; invalid elements hold NaN states and ``-inf`` log_q and are
    meant to be auto-rejected by the caller.
    """

    states: np.ndarray  # (m+1, d) or (B, m+1, d)
    log_q: np.ndarray | float
    valid: np.ndarray | bool = True


def solve_eta(
    model: SdeModel,
    theta: np.ndarray,
    b: np.ndarray,
    x_start: np.ndarray,
    times: np.ndarray,
) -> EtaPath:
    """Fourth-order Runge-Kutta solution of ``d eta/dt = alpha(eta)``.

    One RK4 step per sub-interval, evaluated at each grid time. Raises
    StatePathInvalid if the skeleton exits the model domain (unbatched
    input only; batched callers inspect validity themselves).
    """
    x_start = np.asarray(x_start, dtype=float)
    vals = rk4_path(lambda x: model.drift(x, theta, b), x_start, np.asarray(times))
    if x_start.ndim == 1 and not np.all(model.valid(vals)):
        bad = np.flatnonzero(~model.valid(vals))[0]
        t_fail = float(np.asarray(times)[bad])
        raise StatePathInvalid(f"drift skeleton exited the domain at t={t_fail:g}", time=t_fail)
    return EtaPath(values=vals)


def _delta_minus(problem: BridgeProblem, k: int) -> tuple[float, float]:
    """(remaining horizon before step k, after step k)."""
    dt = problem.dt
    d_before = problem.t_end - (problem.t_start + (k - 1) * dt)
    return d_before, d_before - dt


def _conditioned_moments(
    problem: BridgeProblem,
    k: int,
    base: np.ndarray,
    drift_term: np.ndarray,
    end_datum: np.ndarray,
    beta: np.ndarray,
) -> Gaussian:
    """Condition the one-step/end-datum Gaussian joint on the datum.

    ``base`` is the current value (state or residual), ``drift_term``
    the drift contribution per unit time, ``end_datum`` the quantity the
    joint is conditioned on. Shared by both constructs; the caller
    chooses the parameterisation.
    """
    dt = problem.dt
    d_minus, _ = _delta_minus(problem, k)
    end = problem.end
    if isinstance(end, ExactState):
        w = dt / d_minus
        mean = base + w * (end_datum - base)
        ratio = (d_minus - dt) / d_minus
        return Gaussian(mean=mean, cov=ratio * beta * dt)
    F = np.asarray(end.F, dtype=float)
    betaF = beta @ F
    G = np.swapaxes(F, -1, -2) @ betaF * d_minus + end.sigma_eff
    try:
        K = np.swapaxes(np.linalg.solve(G, np.swapaxes(betaF, -1, -2)), -1, -2) * dt
    except np.linalg.LinAlgError as e:
        raise SingularCovariance(str(e)) from e
    pred_y = np.einsum(
        "ij,...i->...j", F, base + drift_term * d_minus
    )
    mean = base + drift_term * dt + np.einsum("...ij,...j->...i", K, end_datum - pred_y)
    cov = beta * dt - K @ np.swapaxes(betaF, -1, -2) * dt
    return Gaussian(mean=mean, cov=0.5 * (cov + np.swapaxes(cov, -1, -2)))


def mdb_step_dist(problem: BridgeProblem, k: int, x_current: np.ndarray) -> Gaussian:
    """Modified-diffusion-bridge distribution of the k-th state.

    Under an ExactState end condition this reduces to linear
    interpolation toward the end state with covariance shrunk by the
    remaining-horizon ratio, independent of the drift; at k = m the
    distribution is the degenerate point mass at the end state.
    """
    x = np.asarray(x_current, dtype=float)
    alpha = problem.model.drift(x, problem.theta, problem.b)
    beta = problem.model.diffusion(x, problem.theta, problem.b)
    datum = problem.end.x_end if isinstance(problem.end, ExactState) else problem.end.y
    return _conditioned_moments(problem, k, x, alpha, np.asarray(datum, dtype=float), beta)


def residual_step_dist(
    problem: BridgeProblem, k: int, r_current: np.ndarray, eta: EtaPath
) -> Gaussian:
    """Residual-bridge distribution of the k-th residual.

    The drift enters through the difference between the drift at the
    current state ``x = eta + r`` and at the skeleton; the diffusion is
    evaluated at the current state. The end datum is re-expressed
    relative to the skeleton's endpoint.
    """
    r = np.asarray(r_current, dtype=float)
    eta_prev = eta.values[..., k - 1, :]
    eta_end = eta.values[..., -1, :]
    x = eta_prev + r
    alpha_x = problem.model.drift(x, problem.theta, problem.b)
    alpha_eta = problem.model.drift(eta_prev, problem.theta, problem.b)
    beta = problem.model.diffusion(x, problem.theta, problem.b)
    end = problem.end
    if isinstance(end, ExactState):
        datum = np.asarray(end.x_end, dtype=float) - eta_end
    else:
        datum = np.asarray(end.y, dtype=float) - np.einsum(
            "ij,...i->...j", np.asarray(end.F, dtype=float), eta_end
        )
    return _conditioned_moments(problem, k, r, alpha_x - alpha_eta, datum, beta)


def _x_space_step(
    problem: BridgeProblem,
    construct: str,
    k: int,
    x_prev: np.ndarray,
    eta: EtaPath | None,
) -> Gaussian:
    """Step distribution of the k-th *state* under either construct."""
    if construct == MDB:
        return mdb_step_dist(problem, k, x_prev)
    if construct == RESIDUAL:
        assert eta is not None
        r_prev = x_prev - eta.values[..., k - 1, :]
        g = residual_step_dist(problem, k, r_prev, eta)
        return Gaussian(mean=eta.values[..., k, :] + g.mean, cov=g.cov)
    raise ValueError(f"unknown bridge construct: {construct!r}")


def _eta_for(problem: BridgeProblem, construct: str) -> EtaPath | None:
    if construct != RESIDUAL:
        return None
    vals = rk4_path(
        lambda s: problem.model.drift(s, problem.theta, problem.b),
        np.asarray(problem.x_start, dtype=float),
        problem.taus,
    )
    return EtaPath(values=vals)


def sample_bridge(
    problem: BridgeProblem,
    construct: str,
    rng: np.random.Generator | None = None,
    normals: np.ndarray | None = None,
) -> BridgeDraw:
    """Sample a bridge and record its proposal log density.

    ``log_q`` sums the step log densities over the free steps (all m
    steps when conditioning on a noisy observation, the first m-1 when
    the end state is exact; the final state is then assigned, never
    sampled from a zero-covariance Gaussian).

    ``normals`` may supply the standard-normal innovations explicitly
    (shape ``batch + (free_steps, d)``); callers with per-unit RNG
    streams use this to keep batched sampling reproducible.
    """
    x0 = np.asarray(problem.x_start, dtype=float)
    batch = x0.shape[:-1]
    d = problem.model.dim
    m = problem.sub_steps
    free = problem.free_steps()
    if normals is None:
        if rng is None:
            raise ValueError("either rng or normals must be given")
        normals = rng.standard_normal(batch + (free, d))
    eta = _eta_for(problem, construct)
    if eta is not None:
        eta_ok = np.all(problem.model.valid(eta.values), axis=-1)
        alive = np.all(eta_ok, axis=-1)
    else:
        alive = np.ones(batch, dtype=bool)

    states = np.empty(batch + (m + 1, d))
    states[..., 0, :] = x0
    log_q = np.zeros(batch)
    x = x0
    for k in range(1, free + 1):
        safe_x = x if np.all(alive) else np.where(alive[..., None], x, x0)
        g = _x_space_step(problem, construct, k, safe_x, eta)
        try:
            L = sqrt_psd(g.cov)
        except Exception:
            alive = np.zeros(batch, dtype=bool)
            break
        z = normals[..., k - 1, :]
        x_new = g.mean + np.einsum("...ij,...j->...i", L, z)
        sign, logdet = np.linalg.slogdet(g.cov)
        with np.errstate(invalid="ignore"):
            diff = x_new - g.mean
            sol = np.linalg.solve(
                np.where((sign > 0)[..., None, None], g.cov, np.eye(d)), diff[..., None]
            )[..., 0]
            quad = np.einsum("...i,...i->...", diff, sol)
            step_lp = -0.5 * (d * np.log(2 * np.pi) + logdet + quad)
        alive = alive & (sign > 0) & np.all(problem.model.valid(x_new), axis=-1)
        log_q = log_q + np.where(alive, step_lp, 0.0)
        x = np.where(alive[..., None], x_new, x0) if batch else (x_new if alive else x0)
        states[..., k, :] = x_new
    if isinstance(problem.end, ExactState):
        states[..., m, :] = problem.end.x_end

    if batch:
        states[~alive] = np.nan
        log_q = np.where(alive, log_q, -np.inf)
        return BridgeDraw(states=states, log_q=log_q, valid=alive)
    if not alive:
        raise StatePathInvalid("bridge proposal exited the model domain")
    return BridgeDraw(states=states, log_q=float(log_q), valid=True)


def bridge_logpdf(problem: BridgeProblem, construct: str, states: np.ndarray) -> np.ndarray | float:
    """Proposal log density of given bridge states under a construct.

    ``states`` must start at the problem's start state (and end at the
    exact end state when applicable); only the free steps contribute.
    """
    states = np.asarray(states, dtype=float)
    eta = _eta_for(problem, construct)
    free = problem.free_steps()
    batch = states.shape[:-2]
    total = np.zeros(batch)
    for k in range(1, free + 1):
        g = _x_space_step(problem, construct, k, states[..., k - 1, :], eta)
        total = total + mvn_logpdf(states[..., k, :], g.mean, g.cov)
    return total if batch else float(total)


def mh_independence_acceptance_experiment(
    problem: BridgeProblem,
    construct: str,
    iterations: int,
    rng: np.random.Generator,
    target_obs_logpdf=None,
    batch_size: int = 4096,
) -> float:
    """Acceptance rate of an independence MH chain on the conditioned path.

    The target is the Euler discretisation of the conditioned process:
    the product of Euler transition densities over the interval times,
    for a noisy end condition, the observation density at the endpoint
    (``target_obs_logpdf(x_end) -> log density``, defaulting to the
    Gaussian ``N(y; F^T x, sigma_eff)``).
    """
    if iterations < 1:
        raise ValueError("iterations must be positive")
    if problem.batched:
        raise ValueError("the experiment runs on a single (unbatched) problem")

    taus = problem.taus
    x0 = np.asarray(problem.x_start, dtype=float)

    def log_weights(n: int) -> np.ndarray:
        """tgt - q for n fresh proposals (batched)."""
        rep = BridgeProblem(
            model=problem.model,
            theta=problem.theta,
            b=np.broadcast_to(problem.b, (n,) + np.shape(problem.b)),
            t_start=problem.t_start,
            t_end=problem.t_end,
            x_start=np.broadcast_to(x0, (n,) + x0.shape),
            end=problem.end,
            sub_steps=problem.sub_steps,
        )
        draw = sample_bridge(rep, construct, rng=rng)
        with np.errstate(invalid="ignore"):
            tgt = euler_path_loglik(
                problem.model, np.nan_to_num(draw.states, nan=np.inf), taus, problem.theta, rep.b
            )
            if isinstance(problem.end, Observation):
                xe = draw.states[..., -1, :]
                safe_xe = np.where(draw.valid[..., None], xe, x0)
                if target_obs_logpdf is not None:
                    tgt = tgt + target_obs_logpdf(safe_xe)
                else:
                    F = np.asarray(problem.end.F, dtype=float)
                    tgt = tgt + mvn_logpdf(
                        problem.end.y, np.einsum("ij,...i->...j", F, safe_xe), problem.end.sigma_eff
                    )
        lw = tgt - draw.log_q
        return np.where(draw.valid, lw, -np.inf)

    # initialise the chain from its own proposal before counting
    current_lw = -np.inf
    for _ in range(100):
        lw0 = log_weights(min(batch_size, 256))
        finite = lw0[np.isfinite(lw0)]
        if finite.size:
            current_lw = finite[0]
            break

    accepted = 0
    done = 0
    while done < iterations:
        n = min(batch_size, iterations - done)
        lw = log_weights(n)
        us = rng.uniform(size=n)
        for i in range(n):
            if np.log(us[i]) < lw[i] - current_lw:
                current_lw = lw[i]
                accepted += 1
        done += n
    return accepted / iterations
