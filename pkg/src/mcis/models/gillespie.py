"""Exact stochastic simulation of reaction networks.

Mass-action kinetics with the direct (Gillespie) method: waiting times
are exponential with rate equal to the total propensity, and the firing
reaction is chosen with probability proportional to its propensity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ParameterError

__all__ = ["Stoichiometry", "GillespiePath", "gillespie_simulate"]


@dataclass(frozen=True, eq=False)
class Stoichiometry:
    """Reaction structure of a network.

    Parameters
    ----------
    reactants : (n_reactions, n_species) int array
        Number of molecules of each species consumed by each reaction;
        determines the mass-action propensity order.
    changes : (n_reactions, n_species) int array
        Net change of each species when the reaction fires.
    """

    reactants: np.ndarray
    changes: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "reactants", np.asarray(self.reactants, dtype=np.int64))
        object.__setattr__(self, "changes", np.asarray(self.changes, dtype=np.int64))
        if self.reactants.shape != self.changes.shape:
            raise ParameterError("reactants and changes must have matching shapes")
        if np.any(self.reactants < 0):
            raise ParameterError("reactant counts must be nonnegative")


@dataclass(frozen=True, eq=False)
class GillespiePath:
    """Piecewise-constant trajectory: state ``states[i]`` holds on
    ``[times[i], times[i+1])``; the final row holds through ``t_end``."""

    times: np.ndarray
    states: np.ndarray

    @property
    def end_state(self) -> np.ndarray:
        return self.states[-1]

    def state_at(self, t: float) -> np.ndarray:
        """State at time ``t`` (right-continuous)."""
        idx = int(np.searchsorted(self.times, t, side="right")) - 1
        return self.states[max(idx, 0)]


def _propensities(rates, reactants, state):
    """Mass-action propensities via falling factorials of the counts."""
    props = np.array(rates, dtype=float)
    for j in range(reactants.shape[0]):
        for s in range(reactants.shape[1]):
            order = reactants[j, s]
            count = state[s]
            for k in range(order):
                props[j] *= max(count - k, 0)
    return props


def gillespie_simulate(
    rates,
    stoichiometry: Stoichiometry,
    init,
    t_end: float,
    rng: np.random.Generator,
    max_events: int | None = None,
) -> GillespiePath:
    """Simulate the network exactly on ``[0, t_end]``.

    Returns the full event path; if all propensities vanish the state
    simply freezes until ``t_end`` (absorbing, not an error).
    """
    rates = np.asarray(rates, float)
    if np.any(rates < 0):
        raise ParameterError("reaction rates must be nonnegative")
    state = np.asarray(init, dtype=np.int64).copy()
    if np.any(state < 0):
        raise ParameterError("initial counts must be nonnegative")
    times = [0.0]
    states = [state.copy()]
    t = 0.0
    events = 0
    while True:
        props = _propensities(rates, stoichiometry.reactants, state)
        total = props.sum()
        if total <= 0.0:
            break
        t = t + rng.exponential(1.0 / total)
        if t > t_end:
            break
        reaction = int(np.searchsorted(np.cumsum(props), rng.random() * total, side="right"))
        reaction = min(reaction, len(rates) - 1)
        state = state + stoichiometry.changes[reaction]
        times.append(t)
        states.append(state.copy())
        events += 1
        if max_events is not None and events >= max_events:
            break
    return GillespiePath(times=np.asarray(times), states=np.asarray(states))
