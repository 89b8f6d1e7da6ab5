"""Structure matching, crystal-structure-prediction metrics and the
displacement-energy scan.

The matcher compares two periodic units up to re-description and volume:

1. reduce both cells; compositions must agree up to a common factor;
   if atom counts differ by an integer factor, every sublattice of that
   index of the smaller unit is tried;
2. rescale the second unit to the first's volume per atom;
3. search integer bases of the second lattice whose lengths and angles
   agree with the first's reduced basis within ``ltol`` and ``angle_tol``;
4. for every same-species anchor pair, align the anchors and solve the
   same-species assignment under the minimum-image distance; every matched
   distance must be at most ``stol * (V/n)^(1/3)``.

The reported rms is the smallest root-mean-square matched distance over all
lattice correspondences and anchors, divided by ``(V/n)^(1/3)``.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.stats import spearmanr

from .crystal import PeriodicUnit, apply_basis_change, reduce_composition
from .errors import ConfigError, CrystalEBMError, NonFiniteEnergy
from .model import Batch, ModelConfig, ModelParams, forward
from .niggli import niggli_reduce
from .sampler import AnnealSchedule, sample_many

log = logging.getLogger(__name__)

_FORBIDDEN = 1e30
_SHIFTS = np.array(list(itertools.product((-1, 0, 1), repeat=3)), dtype=np.float64)


@dataclass(frozen=True)
class MatchTolerances:
    """``stol`` is a fraction of ``(V/n)^(1/3)``, ``ltol`` a fraction of the
    mean of the two compared lengths, ``angle_tol`` is in degrees."""

    stol: float = 0.5
    ltol: float = 0.3
    angle_tol: float = 10.0
    max_supercell: int = 8

    def __post_init__(self):
        for name in ("stol", "ltol", "angle_tol"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if int(self.max_supercell) != self.max_supercell or self.max_supercell < 1:
            raise ConfigError("max_supercell must be a positive integer")


@dataclass(frozen=True)
class MatchReport:
    matched: bool
    rms: Optional[float] = None

    def __post_init__(self):
        if self.matched != (self.rms is not None):
            raise ValueError("rms must be given exactly when matched")


NO_MATCH = MatchReport(False)


def _reduced(p: PeriodicUnit):
    lattice, _ = niggli_reduce(p.lattice)
    frac = np.linalg.solve(lattice, p.coords)
    return lattice, frac - np.floor(frac)


def _angles(a, b):
    cos = np.sum(a * b, axis=-1) / (np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1))
    return np.degrees(np.arccos(np.clip(cos, -1.0, 1.0)))


def _short_vectors(lattice, radius):
    """Integer ``k != 0`` with ``|L k| <= radius``, as ``(ks, vectors)``."""
    reach = np.ceil(radius * np.linalg.norm(np.linalg.inv(lattice), axis=1)).astype(int)
    ranges = [np.arange(-r, r + 1) for r in reach]
    ks = np.stack(np.meshgrid(*ranges, indexing="ij"), axis=-1).reshape(-1, 3)
    ks = ks[np.any(ks != 0, axis=1)]
    vecs = ks @ lattice.T
    keep = np.linalg.norm(vecs, axis=1) <= radius
    return ks[keep], vecs[keep]


def lattice_mappings(l1, l2, ltol: float, angle_tol: float):
    """Unimodular integer ``K`` such that the basis ``l2 @ K`` agrees with the
    basis ``l1`` in every length (within ``ltol``) and angle (within
    ``angle_tol`` degrees)."""
    len1 = np.linalg.norm(l1, axis=0)
    ang1 = (_angles(l1[:, 1], l1[:, 2]), _angles(l1[:, 0], l1[:, 2]), _angles(l1[:, 0], l1[:, 1]))
    ks, vecs = _short_vectors(l2, len1.max() * (1 + ltol / 2) / (1 - ltol / 2))
    lens = np.linalg.norm(vecs, axis=1)
    cands = [np.flatnonzero(np.abs(lens - l) <= ltol * (lens + l) / 2) for l in len1]
    if any(c.size == 0 for c in cands):
        return []
    ia, ib = np.meshgrid(cands[0], cands[1], indexing="ij")
    ia, ib = ia.ravel(), ib.ravel()
    ok = np.abs(_angles(vecs[ia], vecs[ib]) - ang1[2]) <= angle_tol
    ia, ib = ia[ok], ib[ok]
    out = []
    for c in cands[2]:
        good = (np.abs(_angles(vecs[ib], vecs[c]) - ang1[0]) <= angle_tol) & (
            np.abs(_angles(vecs[ia], vecs[c]) - ang1[1]) <= angle_tol
        )
        for a, b in zip(ia[good], ib[good]):
            k = np.stack([ks[a], ks[b], ks[c]], axis=1)
            if abs(round(np.linalg.det(k))) == 1:
                out.append(k)
    return out


def _pair_displacements(f1, f2, chol, t):
    """Minimum-image Cartesian distances ``d[i, j]`` between site ``i`` of
    the first unit and site ``j`` of the second after shifting it by ``t``."""
    diff = f2[:, None, :] + t[:, None, None] - f1[:, :, None]  # (3, n1, n2)
    diff -= np.round(diff)
    c = chol @ diff.reshape(3, -1)
    s = chol @ _SHIFTS.T  # (3, 27)
    # |c + s|^2 expanded, minimised over the neighbouring images
    sq = np.sum(c * c, axis=0) + np.min(2.0 * (s.T @ c) + np.sum(s * s, axis=0)[:, None], axis=0)
    return np.sqrt(np.maximum(sq, 0.0)).reshape(diff.shape[1:])


def assign_optimal(cost):
    rows, cols = linear_sum_assignment(cost)
    return cols, float(cost[rows, cols].sum())


def assign_exhaustive(cost, groups):
    """Reference solver: try every same-species permutation.

    Args:
        groups: ``(rows, cols)`` index tuples, one per species.
    """
    n = cost.shape[0]
    table = np.empty((1, n), dtype=np.int64)
    for rows, cols in groups:
        perms = np.array(list(itertools.permutations(cols)), dtype=np.int64)
        grown = np.repeat(table, len(perms), axis=0)
        grown[:, list(rows)] = np.tile(perms, (len(table), 1))
        table = grown
    totals = cost[np.arange(n), table].sum(axis=1)
    k = int(np.argmin(totals))
    return table[k], float(totals[k])


def _site_rms(f1, z1, f2, z2, chol, thresh, exhaustive=False):
    """Smallest feasible mean squared distance over all anchor pairs, or None."""
    n = z1.size
    same = z1[:, None] == z2[None, :]
    groups = [(tuple(np.flatnonzero(z1 == z)), tuple(np.flatnonzero(z2 == z)))
              for z in np.unique(z1)]
    best = None
    for a in range(n):
        for b in np.flatnonzero(z2 == z1[a]):
            d = _pair_displacements(f1, f2, chol, f1[:, a] - f2[:, b])
            cost = np.where(same & (d <= thresh), d * d, _FORBIDDEN)
            if exhaustive:
                cols, total = assign_exhaustive(cost, groups)
            else:
                cols, total = assign_optimal(cost)
            if total >= _FORBIDDEN:
                continue
            msd = total / n
            if best is None or msd < best:
                best = msd
    return best


def _match_equal(p1, p2, tol, exhaustive):
    l1, f1 = _reduced(p1)
    l2, f2 = _reduced(p2)
    v1, v2 = abs(np.linalg.det(l1)), abs(np.linalg.det(l2))
    l2 = l2 * (v1 / v2) ** (1.0 / 3.0)
    scale = (v1 / p1.n) ** (1.0 / 3.0)
    thresh = tol.stol * scale
    best = None
    for k in lattice_mappings(l1, l2, tol.ltol, tol.angle_tol):
        lk = l2 @ k
        fk = np.linalg.solve(k.astype(np.float64), f2)
        fk -= np.floor(fk)
        gram = 0.5 * (l1.T @ l1 + lk.T @ lk)
        chol = np.linalg.cholesky(gram).T
        msd = _site_rms(f1, p1.species, fk, p2.species, chol, thresh, exhaustive)
        if msd is not None and (best is None or msd < best):
            best = msd
    if best is None:
        return NO_MATCH
    return MatchReport(True, float(math.sqrt(best) / scale))


def sublattices(index: int):
    """Hermite normal forms with determinant ``index``: one representative of
    every sublattice of that index."""
    out = []
    for a in range(1, index + 1):
        if index % a:
            continue
        for c in range(1, index // a + 1):
            if (index // a) % c:
                continue
            f = index // (a * c)
            for b, d, e in itertools.product(range(c), range(f), range(f)):
                out.append(np.array([[a, 0, 0], [b, c, 0], [d, e, f]]))
    return out


def match_structures(p1: PeriodicUnit, p2: PeriodicUnit, tol: MatchTolerances = MatchTolerances(),
                     exhaustive: bool = False) -> MatchReport:
    """Whether two units describe the same crystal up to volume scaling.

    ``exhaustive=True`` replaces the assignment solver by enumeration of all
    same-species permutations (a reference for testing).
    """
    if reduce_composition(p1.species) != reduce_composition(p2.species):
        return NO_MATCH
    small, big = (p1, p2) if p1.n <= p2.n else (p2, p1)
    if big.n % small.n:
        return NO_MATCH
    ratio = big.n // small.n
    if ratio == 1:
        return _match_equal(p1, p2, tol, exhaustive)
    if ratio > tol.max_supercell:
        return NO_MATCH
    best = NO_MATCH
    for h in sublattices(ratio):
        grown = apply_basis_change(small, h)
        pair = (grown, big) if small is p1 else (big, grown)
        report = _match_equal(*pair, tol, exhaustive)
        if report.matched and (not best.matched or report.rms < best.rms):
            best = report
    return best


# -- CSP evaluation --------------------------------------------------------

@dataclass
class CrystalOutcome:
    id: str
    matched: bool
    rms: Optional[float]
    failures: int = 0


@dataclass
class CSPResult:
    match_rate: float  # percent
    rmse: Optional[float]
    outcomes: list = field(default_factory=list)


def default_sampler(params, cfg, sched):
    def run(species_list, seed):
        return sample_many(species_list, params, cfg, sched, seed=seed).units
    return run


def evaluate_csp(test_set: Sequence, params: ModelParams, cfg: ModelConfig,
                 samples_per_crystal: int = 20, seed=0, sched: AnnealSchedule = AnnealSchedule(),
                 tol: MatchTolerances = MatchTolerances(),
                 sampler: Optional[Callable] = None) -> CSPResult:
    """Match rate and rmse of sampled structures against the test crystals.

    Args:
        test_set: ``(id, PeriodicUnit)`` pairs or bare units.
        sampler: ``sampler(species_list, seed) -> list of units or None``;
            defaults to annealed chains under ``params``, all run in lockstep.

    Returns:
        ``CSPResult``: a crystal counts as matched if any of its samples
        matches; rmse averages the best rms of the matched crystals.
    """
    items = [t if isinstance(t, tuple) else (f"crystal{k}", t) for k, t in enumerate(test_set)]
    if sampler is None:
        sampler = default_sampler(params, cfg, sched)
    species_list = [p.species for _, p in items for _ in range(samples_per_crystal)]
    try:
        samples = list(sampler(species_list, seed))
    except CrystalEBMError as exc:
        log.warning("sampling failed: %s", exc)
        samples = [None] * len(species_list)
    outcomes = []
    for c, (ident, truth) in enumerate(items):
        best, failures = None, 0
        for s in samples[c * samples_per_crystal:(c + 1) * samples_per_crystal]:
            if s is None:
                failures += 1
                continue
            report = match_structures(s, truth, tol)
            if report.matched and (best is None or report.rms < best):
                best = report.rms
        if failures:
            log.warning("%s: %d samples failed", ident, failures)
        outcomes.append(CrystalOutcome(ident, best is not None, best, failures))
    matched = [o.rms for o in outcomes if o.matched]
    rate = 100.0 * len(matched) / len(outcomes) if outcomes else 0.0
    rmse = float(np.mean(matched)) if matched else None
    return CSPResult(rate, rmse, outcomes)


# -- displacement scan -----------------------------------------------------

def displacement_energy_scan(p: PeriodicUnit, params: ModelParams, cfg: ModelConfig,
                             sigma: float = 0.1, trials: int = 1000, seed=0,
                             atom: Optional[int] = None, chunk: int = 100):
    """Energies after isotropic Gaussian noise on one atom.

    The atom is drawn from the seeded stream unless given. Every trial
    perturbs the unperturbed base unit.

    Returns:
        ``(displacements, energies, atom)``; failed trials are left out.
    """
    rng = np.random.default_rng(seed)
    if atom is None:
        atom = int(rng.integers(p.n))
    noise = sigma * rng.standard_normal((trials, 3))
    units = []
    for eps in noise:
        coords = p.coords.copy()
        coords[:, atom] += eps
        units.append(p.replace(coords=coords))
    disp, energy = [], []
    for start in range(0, trials, chunk):
        part = units[start:start + chunk]
        batch = Batch(part, cfg, strict=False)
        e = forward(batch, params, cfg)
        for g, u in enumerate(batch.members):
            if not np.isfinite(e[g]):
                log.warning("trial %d: %s", start + u, NonFiniteEnergy(f"energy {e[g]}"))
                continue
            disp.append(float(np.linalg.norm(noise[start + u])))
            energy.append(float(e[g]))
    return np.array(disp), np.array(energy), atom


def spearman(x, y) -> float:
    return float(spearmanr(x, y).statistic)
