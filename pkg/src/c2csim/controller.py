"""Sign-based feedback control of the hybrid split ratio.

Each step compares smoothed C2C utilization against smoothed HBM
utilization. When C2C is the busier resource the split moves toward the
weight-stationary (asymmetric) path, and vice versa. Steps are larger while
the smoothed latency is over budget.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

ALPHA_STEPS = 16


@dataclass(frozen=True)
class ControllerParams:
    tau: float = 0.1
    eta_fast: float = 0.1
    eta_slow: float = 0.02
    ema_beta: float = 0.3

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if not 0 < self.eta_slow <= self.eta_fast:
            raise ValueError("need 0 < eta_slow <= eta_fast")
        if not 0 < self.ema_beta < 1:
            raise ValueError("ema_beta must lie in (0, 1)")


@dataclass(frozen=True)
class ControlObservation:
    latency: float
    u_hbm: float
    u_c2c: float
    timestamp: float

    def __post_init__(self):
        if not (0 <= self.u_hbm <= 1 and 0 <= self.u_c2c <= 1):
            raise ValueError("utilizations must lie in [0, 1]")


@dataclass(frozen=True)
class ControllerState:
    alpha: float
    l_budget: float
    tau: float = 0.1
    eta_fast: float = 0.1
    eta_slow: float = 0.02
    ema_beta: float = 0.3
    ema_latency: float = 0.0
    ema_u_hbm: float = 0.0
    ema_u_c2c: float = 0.0
    observations: int = 0
    last_timestamp: float = float("-inf")
    delta: float = 0.0

    def __post_init__(self):
        if not 0 <= self.alpha <= 1:
            raise ValueError("alpha must lie in [0, 1]")
        if not (self.tau > 0 and 0 < self.eta_slow <= self.eta_fast and 0 < self.ema_beta < 1):
            raise ValueError("need tau > 0, 0 < eta_slow <= eta_fast and ema_beta in (0, 1)")

    @classmethod
    def initial(cls, l_budget: float, params: ControllerParams = ControllerParams(), alpha: float = 0.0):
        return cls(alpha=alpha, l_budget=l_budget, tau=params.tau, eta_fast=params.eta_fast,
                   eta_slow=params.eta_slow, ema_beta=params.ema_beta)


def update(state: ControllerState, obs: ControlObservation) -> ControllerState:
    if obs.timestamp < state.last_timestamp:
        raise ValueError("observation timestamps must be non-decreasing")
    if state.observations == 0:
        lat, hbm, c2c = obs.latency, obs.u_hbm, obs.u_c2c
    else:
        b = state.ema_beta
        lat = b * obs.latency + (1 - b) * state.ema_latency
        hbm = b * obs.u_hbm + (1 - b) * state.ema_u_hbm
        c2c = b * obs.u_c2c + (1 - b) * state.ema_u_c2c
    delta = c2c - hbm
    alpha = state.alpha
    if abs(delta) >= state.tau:
        eta = state.eta_fast if lat > state.l_budget else state.eta_slow
        alpha = min(1.0, max(0.0, alpha - eta * (1.0 if delta > 0 else -1.0)))
    return replace(state, alpha=alpha, ema_latency=lat, ema_u_hbm=hbm, ema_u_c2c=c2c,
                   observations=state.observations + 1, last_timestamp=obs.timestamp, delta=delta)


def quantize(alpha: float, steps: int = ALPHA_STEPS) -> float:
    """Nearest precompiled split ratio."""
    return round(alpha * steps) / steps


def assign_budgets(slo: float, op_latencies) -> list[float]:
    """Split ``slo`` across operators in proportion to their profiled latency."""
    lats = list(op_latencies)
    if not lats:
        raise ValueError("no operators to budget")
    if any(x <= 0 for x in lats):
        raise ValueError("profiled latencies must be positive")
    total = sum(lats)
    return [slo * x / total for x in lats]


def apply_boundary_rule(state: ControllerState, pending: list[ControlObservation],
                        in_flight: bool) -> tuple[ControllerState, list[ControlObservation]]:
    """Consume buffered observations in order, but only outside a kernel."""
    if in_flight:
        return state, pending
    for obs in pending:
        state = update(state, obs)
    return state, []


class BoundaryController:
    """Controller state plus its buffer of observations awaiting a boundary."""

    def __init__(self, state: ControllerState):
        self.state = state
        self.pending: list[ControlObservation] = []

    def observe(self, obs: ControlObservation, in_flight: bool) -> bool:
        """Buffer ``obs`` and apply if outside a kernel; True if alpha changed."""
        before = self.state.alpha
        self.pending.append(obs)
        self.state, self.pending = apply_boundary_rule(self.state, self.pending, in_flight)
        return self.state.alpha != before

    def boundary(self) -> bool:
        before = self.state.alpha
        self.state, self.pending = apply_boundary_rule(self.state, self.pending, False)
        return self.state.alpha != before

    @property
    def alpha(self) -> float:
        return quantize(self.state.alpha)
