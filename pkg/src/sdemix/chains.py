"""Shared MCMC state, configuration and output containers."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

IMPUTATION = "imputation"
LNA_METHOD = "lna"


@dataclass
class ParamState:
    """Full parameter state of either sampler.

    ``b`` holds the per-unit effects actually consumed by the SDE
    functions; for fixed-effects models it is derived from ``theta``
    and refreshed whenever ``theta`` changes.
    """

    theta: np.ndarray  # (p,)
    b: np.ndarray  # (N, q)
    psi: np.ndarray  # (r,)
    sigma_obs: float | None = None

    def copy(self) -> "ParamState":
        return ParamState(
            theta=self.theta.copy(),
            b=self.b.copy(),
            psi=self.psi.copy(),
            sigma_obs=self.sigma_obs,
        )


@dataclass
class ChainConfig:
    iterations: int
    burn_in: int = 0
    thin: int = 1
    seed: int = 0
    method: str = IMPUTATION
    m: int | list[int] = 10
    balanced_m: bool = False
    proposal_scales: dict = field(default_factory=dict)
    bridge_construct: str = "residual"
    store_anchors: bool | None = None  # default: only when observations are noisy
    workers: int = 1
    ode_rtol: float = 1e-8
    ode_atol: float = 1e-8
    use_analytic_lna: bool = True
    init_overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.iterations < 0:
            raise ConfigError("iterations must be nonnegative")
        if self.thin < 1:
            raise ConfigError("thin must be >= 1")
        if self.iterations == 0:
            if self.burn_in != 0:
                raise ConfigError("burn_in must be 0 when iterations is 0")
        elif not 0 <= self.burn_in < self.iterations:
            raise ConfigError("burn_in must lie in [0, iterations)")
        if self.method not in (IMPUTATION, LNA_METHOD):
            raise ConfigError(f"unknown method {self.method!r}")
        if self.bridge_construct not in ("residual", "mdb"):
            raise ConfigError(f"unknown bridge construct {self.bridge_construct!r}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    def kept_iterations(self) -> np.ndarray:
        """1-based sweep indices stored in the output."""
        s = np.arange(self.burn_in + self.thin, self.iterations + 1, self.thin)
        return s

    def n_kept(self) -> int:
        return self.kept_iterations().size


@dataclass
class ChainOutput:
    """Thinned post-burn-in draws plus acceptance diagnostics."""

    names: list[str]
    draws: np.ndarray  # (rows, p)
    acceptance: dict[str, float]
    initial: ParamState
    anchor_draws: np.ndarray | None = None  # (rows, N, n+1, d)
    unit_ids: list[str] | None = None

    def column(self, name: str) -> np.ndarray:
        return self.draws[:, self.names.index(name)]


class AcceptanceTracker:
    """Counts proposals and acceptances per named update block."""

    def __init__(self):
        self.proposed: dict[str, int] = {}
        self.accepted: dict[str, int] = {}

    def record(self, name: str, accepted, proposed=None):
        acc = int(np.sum(accepted))
        prop = int(np.size(accepted)) if proposed is None else int(proposed)
        self.proposed[name] = self.proposed.get(name, 0) + prop
        self.accepted[name] = self.accepted.get(name, 0) + acc

    def rates(self) -> dict[str, float]:
        return {
            k: (self.accepted[k] / self.proposed[k]) if self.proposed[k] else float("nan")
            for k in sorted(self.proposed)
        }


@dataclass
class ParamBlock:
    """One Metropolis-within-Gibbs update block over theta components.

    ``log_scale`` marks components proposed multiplicatively (the
    proposal-asymmetry correction is applied by the sampler);
    ``unit_mask`` restricts likelihood evaluation to the units whose
    dynamics the block's components actually enter.
    """

    name: str
    indices: np.ndarray
    log_scale: np.ndarray
    unit_mask: np.ndarray
    default_scale: float = 0.1
