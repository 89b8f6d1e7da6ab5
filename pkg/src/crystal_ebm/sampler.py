"""Langevin / Metropolis-adjusted Langevin sampling over coordinates and lattice.

Chains are advanced in lockstep so each step evaluates every chain's energy
and gradient in one batched pass. Each chain owns its random stream, so a
chain's trajectory does not depend on which other chains share the batch.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .crystal import EPS_DET, PeriodicUnit, is_valid
from .errors import (
    ConfigError,
    DegenerateLattice,
    EmptySpecies,
    InitFailed,
    NonFiniteEnergy,
    NonFiniteGradient,
    ReductionFailed,
)
from .gradients import batch_energy_with_grads
from .graph import cutoff_from_volume, enumerable
from .model import ModelConfig, ModelParams
from .niggli import niggli_reduce

log = logging.getLogger(__name__)

# E|det G| for a 3x3 matrix of i.i.d. standard normals: |det G| is distributed
# as a product of independent chi variables with 1, 2 and 3 degrees of freedom
MEAN_ABS_DET = math.prod(
    math.sqrt(2.0) * math.gamma((k + 1) / 2) / math.gamma(k / 2) for k in (1, 2, 3)
)
MAX_INIT_ATTEMPTS = 100


@dataclass(frozen=True)
class AnnealSchedule:
    """Geometric interpolation of inverse temperature and step size."""

    steps: int = 1000
    beta_start: float = 1.0
    beta_end: float = 1000.0
    alpha_start: float = 0.5
    alpha_end: float = 0.0005
    mode: str = "exponential"

    def __post_init__(self):
        if int(self.steps) != self.steps or self.steps < 1:
            raise ConfigError(f"steps must be a positive integer, got {self.steps}")
        for name in ("beta_start", "beta_end", "alpha_start", "alpha_end"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0):
                raise ConfigError(f"{name} must be positive, got {value}")
        if self.mode != "exponential":
            raise ConfigError(f"unknown annealing mode {self.mode!r}")

    @classmethod
    def constant(cls, steps: int, beta: float, alpha: float) -> "AnnealSchedule":
        return cls(steps, beta, beta, alpha, alpha)


def _geometric(start, end, t, steps):
    if t == steps - 1:
        return end
    if t == 0:
        return start
    return start * (end / start) ** (t / (steps - 1))


def anneal(t, sched: AnnealSchedule):
    """``(beta, alpha)`` at step ``t``; the endpoints are returned exactly."""
    if not 0 <= t <= sched.steps - 1:
        raise ValueError(f"step {t} outside [0, {sched.steps - 1}]")
    return (
        _geometric(sched.beta_start, sched.beta_end, t, sched.steps),
        _geometric(sched.alpha_start, sched.alpha_end, t, sched.steps),
    )


@dataclass
class ChainState:
    """Current point of one chain plus its cached energy and gradients."""

    species: np.ndarray
    coords: np.ndarray
    lattice: np.ndarray
    energy: float = float("nan")
    step: int = 0
    rng: np.random.Generator = field(default_factory=np.random.default_rng)
    grad_coords: Optional[np.ndarray] = None
    grad_lattice: Optional[np.ndarray] = None
    accepted: int = 0

    @property
    def n(self) -> int:
        return int(self.species.size)

    def unit(self) -> PeriodicUnit:
        return PeriodicUnit(self.species, self.coords, self.lattice)

    @property
    def has_grads(self) -> bool:
        return self.grad_coords is not None and np.isfinite(self.energy)


def chain_rng(seed, index: int = 0) -> np.random.Generator:
    """Independent stream for chain ``index`` of a run seeded with ``seed``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def init_scale(n: int, rho_ref: float) -> float:
    """Lattice scale giving ``E|det L| = n / rho_ref`` for ``L = s G``."""
    return (n / (rho_ref * MEAN_ABS_DET)) ** (1.0 / 3.0)


def init_state(species, cfg: ModelConfig, seed=None, params: Optional[ModelParams] = None,
               rng: Optional[np.random.Generator] = None) -> ChainState:
    """Random starting point: Gaussian lattice, uniform fractional coordinates.

    The draw is returned as its Niggli cell with atoms wrapped into it, which
    describes the same crystal. Draws that are degenerate, have coincident
    atoms or are too flat to enumerate are redrawn.

    Args:
        species: atomic numbers.
        cfg: model settings; ``rho_ref`` sets the lattice scale.
        seed: seeds a fresh generator unless ``rng`` is given.
        params: if given, the energy and gradients are evaluated.

    Raises:
        InitFailed: no acceptable draw within ``MAX_INIT_ATTEMPTS``.
    """
    species = np.asarray(species, dtype=np.int64)
    if species.size == 0:
        raise EmptySpecies("cannot initialise a chain without atoms")
    if rng is None:
        rng = np.random.default_rng(seed)
    n = species.size
    s = init_scale(n, cfg.rho_ref)
    for _ in range(MAX_INIT_ATTEMPTS):
        lattice = s * rng.standard_normal((3, 3))
        frac = rng.random((3, n))
        det = abs(np.linalg.det(lattice))
        if det <= EPS_DET:
            continue
        state = ChainState(species, lattice @ frac, lattice, rng=rng)
        try:
            # same crystal, described by its reduced cell
            reduce_state(state)
        except (DegenerateLattice, ReductionFailed):
            continue
        cutoff = cutoff_from_volume(n, det, cfg.cutoff_multiplier)
        if enumerable(n, state.lattice, cutoff) and is_valid(state.unit()):
            break
    else:
        raise InitFailed(f"no valid initial state in {MAX_INIT_ATTEMPTS} draws")
    if params is not None:
        evaluate_states([state], params, cfg)
    return state


def evaluate_states(states: Sequence[ChainState], params: ModelParams, cfg: ModelConfig):
    """Fill in energy and gradients of every state in place."""
    units = [s.unit() for s in states]
    batch, e, gc, gl, _ = batch_energy_with_grads(units, params, cfg, wanted=("coords", "lattice"))
    for k, s in enumerate(states):
        if not np.isfinite(e[k]):
            raise NonFiniteEnergy(f"energy {e[k]} at step {s.step}")
        s.energy, s.grad_coords, s.grad_lattice = float(e[k]), gc[k], gl[k]


def mh_accept(delta_energy: float, log_proposal_ratio: float, beta: float, rng) -> bool:
    """Metropolis-Hastings decision with probability
    ``min(1, exp(log_proposal_ratio - beta * delta_energy))``.

    Exactly one uniform is drawn per call so the stream stays aligned.
    """
    if not beta > 0:
        raise ValueError(f"beta must be positive, got {beta}")
    u = rng.random()
    log_a = log_proposal_ratio - beta * delta_energy
    if not np.isfinite(log_a):
        return bool(log_a > 0)  # +inf accepts; -inf and nan reject
    return bool(u < math.exp(min(0.0, log_a)))


def langevin_proposal(x, grad, alpha, beta, noise):
    """``x - alpha beta grad + sqrt(2 alpha) noise``."""
    return x - alpha * beta * grad + math.sqrt(2.0 * alpha) * noise


def log_proposal_ratio(x, y, grad_x, grad_y, alpha, beta) -> float:
    """``log q(x | y) - log q(y | x)`` for the Gaussian Langevin kernel with
    mean ``x - alpha beta grad`` and variance ``2 alpha``."""
    forward = y - x + alpha * beta * grad_x
    reverse = x - y + alpha * beta * grad_y
    return float((np.sum(forward * forward) - np.sum(reverse * reverse)) / (4.0 * alpha))


def mala_chain(x0, energy_and_grad: Callable, steps: int, alpha: float, beta: float, rng):
    """Metropolis-adjusted Langevin chain on a flat vector at fixed ``(beta, alpha)``.

    Uses the same proposal, proposal ratio and acceptance rule as the crystal
    chains, for energies given as ``energy_and_grad(x) -> (H, dH/dx)``.

    Returns:
        ``(samples, accept_rate)`` with ``samples`` of shape ``(steps, dim)``.
    """
    x = np.array(x0, dtype=np.float64).ravel()
    e, g = energy_and_grad(x)
    out = np.empty((steps, x.size))
    accepted = 0
    for t in range(steps):
        y = langevin_proposal(x, g, alpha, beta, rng.standard_normal(x.size))
        ey, gy = energy_and_grad(y)
        if mh_accept(ey - e, log_proposal_ratio(x, y, g, gy, alpha, beta), beta, rng):
            x, e, g = y, ey, gy
            accepted += 1
        out[t] = x
    return out, accepted / steps


def lmc_step(state: ChainState, grads, alpha: float, beta: float, rng=None):
    """Unadjusted Langevin move of every coordinate and lattice scalar.

    Args:
        grads: ``(grad_coords, grad_lattice)``.

    Returns:
        proposed ``(coords, lattice)``.
    """
    gc, gl = grads
    if not (np.all(np.isfinite(gc)) and np.all(np.isfinite(gl))):
        raise NonFiniteGradient("cannot take a Langevin step from a non-finite gradient")
    rng = state.rng if rng is None else rng
    n = state.n
    noise = rng.standard_normal(3 * n + 9)
    coords = langevin_proposal(state.coords, gc, alpha, beta, noise[:3 * n].reshape(3, n))
    lattice = langevin_proposal(state.lattice, gl, alpha, beta, noise[3 * n:].reshape(3, 3))
    return coords, lattice


def reduce_state(state: ChainState):
    """Replace the state by its Niggli cell with atoms wrapped into it.

    The energy is unchanged by the re-description. The cached gradients are
    mapped to the new variables: wrapping ``X -> X + L N`` leaves ``dH/dX``
    alone and shifts ``dH/dL`` by ``-dH/dX N^T``; the basis change
    ``L -> L M`` maps ``dH/dL`` to ``dH/dL M^-T``.
    """
    reduced, m = niggli_reduce(state.lattice)
    frac = np.linalg.solve(reduced, state.coords)
    shift = -np.floor(frac)
    frac = frac + shift
    frac[frac >= 1.0] = 0.0
    coords = reduced @ frac
    if state.grad_lattice is not None:
        # displacement in the old basis is L (M shift)
        n_old = m @ shift
        gl = state.grad_lattice - state.grad_coords @ n_old.T
        state.grad_lattice = gl @ np.linalg.inv(m).T
    state.coords, state.lattice = coords, reduced


def mala_steps(states: Sequence[ChainState], params: ModelParams, cfg: ModelConfig,
               alpha: float, beta: float):
    """Advance every chain by one Metropolis-adjusted Langevin step, in place.

    Proposals that are degenerate (tiny volume, coincident atoms, non-finite
    energy) or whose cell cannot be reduced are rejected. After the decision
    each state is Niggli-reduced and wrapped.

    Returns:
        boolean array of acceptances.
    """
    missing = [s for s in states if not s.has_grads]
    if missing:
        evaluate_states(missing, params, cfg)
    proposals = []
    for s in states:
        coords, lattice = lmc_step(s, (s.grad_coords, s.grad_lattice), alpha, beta)
        proposals.append(PeriodicUnit(s.species, coords, lattice))
    batch, e, gc, gl, _ = batch_energy_with_grads(
        proposals, params, cfg, wanted=("coords", "lattice"), strict=False
    )
    slot = np.full(len(states), -1)
    slot[batch.members] = np.arange(batch.members.size)
    accepted = np.zeros(len(states), dtype=bool)
    for k, s in enumerate(states):
        g = slot[k]
        if g < 0 or not np.isfinite(e[g]):
            s.rng.random()  # keep the stream aligned with an ordinary decision
        else:
            y = proposals[k]
            x_flat = np.concatenate([s.coords.ravel(), s.lattice.ravel()])
            y_flat = np.concatenate([y.coords.ravel(), y.lattice.ravel()])
            gx = np.concatenate([s.grad_coords.ravel(), s.grad_lattice.ravel()])
            gy = np.concatenate([gc[g].ravel(), gl[g].ravel()])
            ratio = log_proposal_ratio(x_flat, y_flat, gx, gy, alpha, beta)
            if mh_accept(float(e[g]) - s.energy, ratio, beta, s.rng):
                old = (s.coords, s.lattice, s.energy, s.grad_coords, s.grad_lattice)
                s.coords, s.lattice = y.coords, y.lattice
                s.energy, s.grad_coords, s.grad_lattice = float(e[g]), gc[g], gl[g]
                try:
                    reduce_state(s)
                    accepted[k] = True
                except (DegenerateLattice, ReductionFailed):
                    s.coords, s.lattice, s.energy, s.grad_coords, s.grad_lattice = old
        if accepted[k]:
            s.accepted += 1
        s.step += 1
    return accepted


def mala_step(state: ChainState, params: ModelParams, cfg: ModelConfig,
              alpha: float, beta: float, rng=None) -> ChainState:
    """Single-chain form of ``mala_steps``; returns the updated state."""
    if rng is not None:
        state.rng = rng
    mala_steps([state], params, cfg, alpha, beta)
    return state


@dataclass
class SampleResult:
    """Final units (``None`` for failed chains) and per-step diagnostics.

    Attributes:
        energies: ``(steps, chains)`` energy after each step.
        accept_rate: fraction of accepted proposals per chain.
    """

    units: list
    energies: np.ndarray
    accept_rate: np.ndarray
    errors: dict = field(default_factory=dict)


def sample_many(species_list: Sequence, params: ModelParams, cfg: ModelConfig,
                sched: AnnealSchedule, seed=0, indices: Optional[Sequence[int]] = None,
                callback: Optional[Callable] = None) -> SampleResult:
    """Run one annealed chain per species vector, all in lockstep.

    Chain ``k`` draws from ``chain_rng(seed, indices[k])`` (default ``k``), so
    its output does not depend on the other chains in the batch. A chain
    whose energy turns non-finite is stopped and reported in ``errors``.
    """
    if indices is None:
        indices = range(len(species_list))
    states = [init_state(sp, cfg, rng=chain_rng(seed, i)) for sp, i in zip(species_list, indices)]
    alive = list(range(len(states)))
    errors = {}
    trace = np.full((sched.steps, len(states)), np.nan)
    active_states = states
    for t in range(sched.steps):
        beta, alpha = anneal(t, sched)
        try:
            mala_steps(active_states, params, cfg, alpha, beta)
        except NonFiniteEnergy:
            alive, active_states = _drop_failed(states, alive, params, cfg, errors, t)
            if active_states:
                mala_steps(active_states, params, cfg, alpha, beta)
        for k in alive:
            trace[t, k] = states[k].energy
        if callback is not None:
            callback(t, states)
        if not active_states:
            break
    units = [None] * len(states)
    for k in alive:
        units[k] = states[k].unit()
    rate = np.array([s.accepted / max(s.step, 1) for s in states])
    return SampleResult(units, trace, rate, errors)


def _drop_failed(states, alive, params, cfg, errors, t):
    keep = []
    for k in alive:
        try:
            if not states[k].has_grads:
                evaluate_states([states[k]], params, cfg)
            keep.append(k)
        except NonFiniteEnergy as exc:
            errors[k] = f"step {t}: {exc}"
            log.warning("chain %d stopped at step %d: %s", k, t, exc)
    return keep, [states[k] for k in keep]


def sample(species, params: ModelParams, cfg: ModelConfig, sched: AnnealSchedule = AnnealSchedule(),
           seed=0, index: int = 0) -> PeriodicUnit:
    """One annealed chain; the result is wrapped and Niggli-reduced."""
    result = sample_many([species], params, cfg, sched, seed, indices=[index])
    if result.units[0] is None:
        raise NonFiniteEnergy(result.errors.get(0, "chain failed"))
    return result.units[0]
