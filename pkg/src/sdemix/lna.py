"""Linear noise approximation: moment ODEs, forward filter, backward sampler.

The LNA replaces the intractable transition density over an interval
with a Gaussian built from the drift ODE skeleton eta_t, the residual
covariance V_t and the fundamental matrix P_t:

    d eta/dt = alpha(eta)      d m/dt = H m
    d V/dt   = H V + beta(eta) + V H^T      d P/dt = H P,  P(t_j) = I

with H the drift Jacobian at eta. Because the filter restarts eta at
the current posterior mean each interval, the residual mean m stays
zero and its ODE never needs integrating during filtering; it is still
implemented (and tested against that fact).

With linear-Gaussian observations the latent process integrates out
analytically: the forward filter accumulates the exact marginal
likelihood under the LNA, and a backward sweep draws the latent states
at observation times using Cov(X_{t_{j+1}}, X_{t_j}) = P_{t_{j+1}} C_{t_j}.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import MissingJacobian, SingularCovariance
from .ode import rkf45
from .sde import SdeModel, mvn_logpdf, sqrt_psd


@dataclass
class LnaState:
    """Solution bundle of the LNA ODE system at one time point."""

    eta: np.ndarray  # (d,)
    m_res: np.ndarray  # (d,)
    V: np.ndarray  # (d, d)
    P: np.ndarray  # (d, d)

    @classmethod
    def initial(cls, eta: np.ndarray, V: np.ndarray | None = None) -> "LnaState":
        eta = np.asarray(eta, dtype=float)
        d = eta.size
        return cls(
            eta=eta,
            m_res=np.zeros(d),
            V=np.zeros((d, d)) if V is None else np.asarray(V, dtype=float),
            P=np.eye(d),
        )


@dataclass
class SolverConfig:
    rtol: float = 1e-8
    atol: float = 1e-8


@dataclass
class FilterResult:
    """Stored forward-filter quantities for one unit.

    ``a``/``C`` are posterior moments at every observation time;
    ``eta``/``V``/``P`` are the propagated (one-step-ahead) quantities
    for intervals 1..n, as needed by the backward sampler.
    """

    log_ml: float
    a: np.ndarray  # (n+1, d)
    C: np.ndarray  # (n+1, d, d)
    eta: np.ndarray  # (n, d)
    V: np.ndarray  # (n, d, d)
    P: np.ndarray  # (n, d, d)


def lna_rhs(model: SdeModel, theta: np.ndarray, b: np.ndarray, state: LnaState) -> LnaState:
    """Time derivative of the LNA bundle (eta, m, V, P)."""
    if model.drift_jacobian is None:
        raise MissingJacobian("the LNA requires the model's drift Jacobian")
    H = model.drift_jacobian(state.eta, theta, b)
    return LnaState(
        eta=model.drift(state.eta, theta, b),
        m_res=H @ state.m_res,
        V=H @ state.V + model.diffusion(state.eta, theta, b) + state.V @ H.T,
        P=H @ state.P,
    )


def _pack(state: LnaState) -> np.ndarray:
    d = state.eta.size
    return np.concatenate([state.eta, state.m_res, state.V.ravel(), state.P.ravel()])


def _unpack(y: np.ndarray, d: int) -> LnaState:
    return LnaState(
        eta=y[:d],
        m_res=y[d : 2 * d],
        V=y[2 * d : 2 * d + d * d].reshape(d, d),
        P=y[2 * d + d * d :].reshape(d, d),
    )


def integrate_lna(
    model: SdeModel,
    theta: np.ndarray,
    b: np.ndarray,
    init: LnaState,
    t0: float,
    t1: float,
    solver: SolverConfig | None = None,
) -> LnaState:
    """Adaptive RKF45 integration of the LNA bundle from t0 to t1.

    V is symmetrised on exit. Raises OdeStepFailure when the step size
    underflows (callers reject the offending parameter proposal).
    """
    solver = solver or SolverConfig()
    if model.drift_jacobian is None:
        raise MissingJacobian("the LNA requires the model's drift Jacobian")
    d = model.dim

    def rhs(t, y):
        s = _unpack(y, d)
        ds = lna_rhs(model, theta, b, s)
        return _pack(ds)

    out = _unpack(rkf45(rhs, _pack(init), t0, t1, rtol=solver.rtol, atol=solver.atol), d)
    out.V = 0.5 * (out.V + out.V.T)
    return out


AnalyticLna = Callable[
    [np.ndarray, np.ndarray, np.ndarray, np.ndarray, float],
    tuple[np.ndarray, np.ndarray, np.ndarray],
]
# analytic(theta, b, eta0, V0, dt) -> (eta, V, P) for models whose LNA
# ODE system has a closed-form solution.


def forward_filter(
    model: SdeModel,
    theta: np.ndarray,
    b: np.ndarray,
    F: np.ndarray,
    sigma_of: Callable[[np.ndarray], np.ndarray],
    times: np.ndarray,
    ys: np.ndarray,
    prior_a: np.ndarray,
    prior_C: np.ndarray,
    solver: SolverConfig | None = None,
    analytic: AnalyticLna | None = None,
) -> FilterResult:
    """Forward filter for one unit's marginal likelihood under the LNA.

    ``sigma_of(eta_ref) -> (d_o, d_o)`` resolves the observation noise
    variance; for state-dependent noise it receives the one-step-ahead
    skeleton at the observation time (the prior mean at t_0). A row of
    NaNs in ``ys`` marks a missing observation: the posterior is then
    the propagated prior and the marginal likelihood is unchanged.

    Each interval restarts the LNA at the current posterior:
    eta = a_{t_j}, V = C_{t_j}, P = I.
    """
    times = np.asarray(times, dtype=float)
    ys = np.atleast_2d(np.asarray(ys, dtype=float))
    n = times.size - 1
    d = model.dim
    a = np.asarray(prior_a, dtype=float)
    C = np.asarray(prior_C, dtype=float)

    a_hist = np.empty((n + 1, d))
    C_hist = np.empty((n + 1, d, d))
    eta_hist = np.empty((n, d))
    V_hist = np.empty((n, d, d))
    P_hist = np.empty((n, d, d))

    log_ml = 0.0

    def bayes_update(mean, cov, y, sigma_ref):
        nonlocal log_ml
        Sig = np.atleast_2d(sigma_of(sigma_ref))
        S = F.T @ cov @ F + Sig
        sign, _ = np.linalg.slogdet(S)
        if sign <= 0:
            raise SingularCovariance("innovation covariance is singular")
        log_ml += float(mvn_logpdf(y, F.T @ mean, S))
        K = np.linalg.solve(S, (cov @ F).T).T
        a_new = mean + K @ (y - F.T @ mean)
        C_new = cov - K @ F.T @ cov
        return a_new, 0.5 * (C_new + C_new.T)

    if np.any(np.isnan(ys[0])):
        a0, C0 = a, C
    else:
        a0, C0 = bayes_update(a, C, ys[0], a)
    a_hist[0], C_hist[0] = a0, C0

    for j in range(n):
        if analytic is not None:
            eta1, V1, P1 = analytic(theta, b, a_hist[j], C_hist[j], times[j + 1] - times[j])
        else:
            prop = integrate_lna(
                model,
                theta,
                b,
                LnaState.initial(a_hist[j], V=C_hist[j]),
                times[j],
                times[j + 1],
                solver,
            )
            eta1, V1, P1 = prop.eta, prop.V, prop.P
        eta_hist[j], V_hist[j], P_hist[j] = eta1, V1, P1
        if np.any(np.isnan(ys[j + 1])):
            a_hist[j + 1], C_hist[j + 1] = eta1, V1
        else:
            a_hist[j + 1], C_hist[j + 1] = bayes_update(eta1, V1, ys[j + 1], eta1)

    return FilterResult(log_ml=log_ml, a=a_hist, C=C_hist, eta=eta_hist, V=V_hist, P=P_hist)


def backward_sample(filt: FilterResult, rng: np.random.Generator) -> np.ndarray:
    """One joint draw of the latent states at all observation times.

    Draws x_{t_n} from the final filtering posterior, then sweeps
    backward through x_{t_j} | x_{t_{j+1}}, y_{0:j} using the stored
    propagated moments and fundamental matrices.
    """
    n = filt.eta.shape[0]
    d = filt.a.shape[1]
    out = np.empty((n + 1, d))
    out[n] = filt.a[n] + sqrt_psd(filt.C[n]) @ rng.standard_normal(d)
    for j in range(n - 1, -1, -1):
        V1 = filt.V[j]
        sign, _ = np.linalg.slogdet(V1)
        if sign <= 0:
            raise SingularCovariance("propagated covariance is singular in the backward sweep")
        CPt = filt.C[j] @ filt.P[j].T
        G = np.linalg.solve(V1, CPt.T).T  # C P^T V^{-1}
        mean = filt.a[j] + G @ (out[j + 1] - filt.eta[j])
        cov = filt.C[j] - G @ filt.P[j] @ filt.C[j]
        cov = 0.5 * (cov + cov.T)
        out[j] = mean + sqrt_psd(cov) @ rng.standard_normal(d)
    return out
