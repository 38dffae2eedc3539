"""Zeroth-order gradient estimation and the adaptive-momentum update.

Works on flat parameter vectors and any scalar objective; nothing in here
knows about patches or oracles.

The gradient estimate averages q two-point finite differences along random
directions: draw a standard Gaussian, normalize it onto the unit sphere,
probe the objective at ``P + mu*u``, and weight the difference by ``d/mu``.
With unit directions the dimension factor makes the estimate unbiased for
the smoothed objective (up to O(mu) on smooth functions); the base value
is evaluated once and shared by all q probes, so one estimate costs
exactly q+1 objective evaluations.

The update keeps an exponential moving average of the gradient (m), of its
square (v), and a running elementwise max of v (v_hat) that makes the
effective step sizes non-increasing; the step divides by sqrt(v_hat) and
projects back onto the box.  beta1 = beta2 = 0 reduces the first step to a
sign step; beta1 = 0, beta2 = 1 with v seeded at ones reduces it to a
plain gradient step.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import NumericError
from .rng import Rng

EPS = 1e-8


@dataclass
class ZoHyperParams:
    beta1: float = 0.9
    beta2: float = 0.999
    mu: float = 0.01
    alpha: float = 0.05
    q: int = 10
    alpha_decay: bool = False  # alpha_t = alpha / sqrt(t) when set

    def __post_init__(self):
        if not (0.0 <= self.beta1 <= 1.0 and 0.0 <= self.beta2 <= 1.0):
            raise ValueError(f"beta1/beta2 must lie in [0,1], got {self.beta1}, {self.beta2}")
        if self.mu <= 0:
            raise ValueError(f"mu must be positive, got {self.mu}")
        if self.alpha <= 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if self.q < 1:
            raise ValueError(f"q must be >= 1, got {self.q}")

    def to_dict(self) -> dict:
        return {
            "beta1": self.beta1, "beta2": self.beta2, "mu": self.mu,
            "alpha": self.alpha, "q": self.q, "alpha_decay": self.alpha_decay,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ZoHyperParams":
        return cls(**{k: d[k] for k in
                      ("beta1", "beta2", "mu", "alpha", "q", "alpha_decay") if k in d})


@dataclass
class BoxConstraint:
    lo: float | np.ndarray = 0.0
    hi: float | np.ndarray = 1.0

    def __post_init__(self):
        if np.any(np.asarray(self.lo) > np.asarray(self.hi)):
            raise ValueError("box lower bound exceeds upper bound")


@dataclass
class OptimizerState:
    params: np.ndarray
    m: np.ndarray
    v: np.ndarray
    v_hat: np.ndarray
    t: int = 0


def init_state(p0: np.ndarray, v0: np.ndarray | None = None) -> OptimizerState:
    """Zeroed moments at step 0; ``v0`` overrides the second moment's start."""
    p0 = np.asarray(p0, dtype=np.float64)
    v = np.zeros_like(p0) if v0 is None else np.asarray(v0, dtype=np.float64).copy()
    if v.shape != p0.shape or (v < 0).any():
        raise ValueError("v0 must match the parameter shape and be nonnegative")
    return OptimizerState(
        params=p0.copy(), m=np.zeros_like(p0), v=v, v_hat=v.copy(), t=0
    )


def project_weighted_box(p: np.ndarray, v_hat: np.ndarray, box: BoxConstraint) -> np.ndarray:
    """Project onto the box under the sqrt(v_hat)-weighted squared distance.

    The weighted distance separates per coordinate and each weight is a
    positive constant factor there, so the minimizer is the plain clamp;
    ``v_hat`` is accepted to keep the projection's contract explicit.
    """
    if np.any(np.asarray(v_hat) < 0):
        raise ValueError("projection weights must be nonnegative")
    return np.clip(p, box.lo, box.hi)


def _unit_direction(rng: Rng, dim: int) -> np.ndarray:
    while True:
        g = rng.gen.standard_normal(dim)
        norm = np.linalg.norm(g)
        if norm > 0:
            return g / norm


def _estimate(objective, p: np.ndarray, mu: float, q: int, rng: Rng):
    """Shared core: returns (objective(p), averaged gradient estimate)."""
    p = np.asarray(p, dtype=np.float64)
    d = p.size
    base = float(objective(p))
    if not math.isfinite(base):
        raise NumericError(f"objective non-finite at base point (value {base})", probe=-1)
    grad = np.zeros_like(p)
    for i in range(q):
        u = _unit_direction(rng, d)
        val = float(objective(p + mu * u))
        if not math.isfinite(val):
            raise NumericError(f"objective non-finite at probe {i} (value {val})", probe=i)
        grad += (d / mu) * (val - base) * u
    return base, grad / q


def zo_gradient_estimate(objective, p: np.ndarray, mu: float, q: int, rng: Rng) -> np.ndarray:
    """Query-only gradient estimate from q+1 objective evaluations."""
    _, grad = _estimate(objective, p, mu, q, rng)
    return grad


def adamm_step(state: OptimizerState, g: np.ndarray, hp: ZoHyperParams,
               box: BoxConstraint) -> OptimizerState:
    """One moment update plus projected step; returns a new state."""
    g = np.asarray(g, dtype=np.float64)
    m = hp.beta1 * state.m + (1.0 - hp.beta1) * g
    v = hp.beta2 * state.v + (1.0 - hp.beta2) * g * g
    v_hat = np.maximum(state.v_hat, v)
    t = state.t + 1
    alpha_t = hp.alpha / math.sqrt(t) if hp.alpha_decay else hp.alpha
    raw = state.params - alpha_t * m / np.sqrt(v_hat + EPS)
    params = project_weighted_box(raw, v_hat, box)
    return OptimizerState(params=params, m=m, v=v, v_hat=v_hat, t=t)


@dataclass
class HistoryRow:
    step: int
    queries: int  # cumulative objective evaluations
    objective: float  # value at the step's starting point
    best_objective: float


def run_zo_adamm(objective, p0: np.ndarray, hp: ZoHyperParams, box: BoxConstraint,
                 budget: int, rng: Rng, v0: np.ndarray | None = None,
                 on_step_start=None, on_step=None):
    """Estimate-and-step until the evaluation budget runs out.

    ``budget`` counts objective evaluations; each step consumes exactly
    q+1.  ``on_step_start(state)`` runs before each estimate (callers use
    it to refresh a stochastic objective); ``on_step(state, row)`` runs
    after each update and stops the loop by returning True.

    Returns (final state, history).  A budget below q+1 returns the start
    point untouched with empty history.
    """
    state = init_state(p0, v0)
    history: list[HistoryRow] = []
    queries = 0
    best = math.inf
    while queries + hp.q + 1 <= budget:
        if on_step_start is not None:
            on_step_start(state)
        try:
            base, g = _estimate(objective, state.params, hp.mu, hp.q, rng)
        except NumericError as err:
            err.step = state.t + 1
            raise
        state = adamm_step(state, g, hp, box)
        queries += hp.q + 1
        best = min(best, base)
        row = HistoryRow(step=state.t, queries=queries, objective=base,
                         best_objective=best)
        history.append(row)
        if on_step is not None and on_step(state, row):
            break
    return state, history


def write_history_csv(history, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "queries", "objective", "best_objective"])
        for row in history:
            writer.writerow([row.step, row.queries, repr(row.objective),
                             repr(row.best_objective)])


def read_history_csv(path) -> list[HistoryRow]:
    out = []
    with open(path, "r", newline="", encoding="utf-8") as f:
        for rec in csv.DictReader(f):
            out.append(HistoryRow(step=int(rec["step"]), queries=int(rec["queries"]),
                                  objective=float(rec["objective"]),
                                  best_objective=float(rec["best_objective"])))
    return out
