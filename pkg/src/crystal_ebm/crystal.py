"""Periodic units, compositions and lattice re-descriptions.

Lattices are stored column-major: ``lattice[:, a]`` is the a-th basis vector,
so an image of atom ``i`` is ``coords[:, i] + lattice @ k`` for integer ``k``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import reduce
from typing import Iterable, Mapping, Sequence

import numpy as np

from .elements import MAX_Z
from .errors import (
    DegenerateLattice,
    EmptySpecies,
    InvalidMultiplier,
    SingularTransform,
)

EPS_DET = 1e-8
EPS_COINCIDE = 1e-6


@dataclass(frozen=True, eq=False)
class PeriodicUnit:
    """One period of a crystal.

    Attributes:
        species: atomic numbers, shape ``(n,)``.
        coords: Cartesian coordinates in Angstrom, shape ``(3, n)``.
        lattice: basis vectors as columns in Angstrom, shape ``(3, 3)``.
    """

    species: np.ndarray
    coords: np.ndarray
    lattice: np.ndarray

    def __post_init__(self):
        species = np.asarray(self.species, dtype=np.int64).reshape(-1)
        coords = np.array(self.coords, dtype=np.float64)
        lattice = np.array(self.lattice, dtype=np.float64)
        if coords.ndim != 2 or coords.shape[0] != 3:
            raise ValueError(f"coords must be 3 x n, got {coords.shape}")
        if coords.shape[1] != species.size:
            raise ValueError(
                f"{species.size} species but {coords.shape[1]} coordinate columns"
            )
        if lattice.shape != (3, 3):
            raise ValueError(f"lattice must be 3 x 3, got {lattice.shape}")
        for arr in (species, coords, lattice):
            arr.setflags(write=False)
        object.__setattr__(self, "species", species)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "lattice", lattice)

    @property
    def n(self) -> int:
        return int(self.species.size)

    @property
    def volume(self) -> float:
        return abs(float(np.linalg.det(self.lattice)))

    def frac_coords(self) -> np.ndarray:
        """Fractional coordinates, shape ``(3, n)``."""
        _check_lattice(self.lattice)
        return np.linalg.solve(self.lattice, self.coords)

    @classmethod
    def from_fractional(cls, species, frac, lattice) -> "PeriodicUnit":
        """Build a unit from fractional coordinates given as ``(3, n)``."""
        lattice = np.asarray(lattice, dtype=np.float64)
        return cls(species, lattice @ np.asarray(frac, dtype=np.float64), lattice)

    def replace(self, *, species=None, coords=None, lattice=None) -> "PeriodicUnit":
        return PeriodicUnit(
            self.species if species is None else species,
            self.coords if coords is None else coords,
            self.lattice if lattice is None else lattice,
        )

    def __repr__(self):
        return f"PeriodicUnit(n={self.n}, species={self.species.tolist()}, volume={self.volume:.4g})"


@dataclass(frozen=True)
class Composition(Mapping):
    """Species counts in simplest integer ratio, keyed by atomic number."""

    counts: tuple = field(default=())

    def __post_init__(self):
        items = tuple(sorted((int(z), int(c)) for z, c in dict(self.counts).items()))
        if not items:
            raise EmptySpecies("composition is empty")
        if any(c <= 0 for _, c in items):
            raise ValueError(f"counts must be positive: {items}")
        if reduce(math.gcd, (c for _, c in items)) != 1:
            raise ValueError(f"counts are not in simplest ratio: {items}")
        object.__setattr__(self, "counts", items)

    def __getitem__(self, z):
        for key, c in self.counts:
            if key == z:
                return c
        raise KeyError(z)

    def __iter__(self):
        return (z for z, _ in self.counts)

    def __len__(self):
        return len(self.counts)

    @property
    def num_atoms(self) -> int:
        return sum(c for _, c in self.counts)


@dataclass(frozen=True)
class Violation:
    kind: str  # "degenerate" | "coincident" | "species" | "nonfinite"
    message: str


def _check_lattice(lattice: np.ndarray) -> float:
    det = float(np.linalg.det(lattice))
    if not np.isfinite(det) or abs(det) <= EPS_DET:
        raise DegenerateLattice(f"|det L| = {abs(det):.3g} <= {EPS_DET}")
    return det


def atomic_density(p: PeriodicUnit) -> float:
    """Atoms per cubic Angstrom, ``n / |det L|``."""
    return p.n / abs(_check_lattice(p.lattice))


def reduce_composition(species: Iterable[int]) -> Composition:
    values, counts = np.unique(np.asarray(list(species), dtype=np.int64), return_counts=True)
    if values.size == 0:
        raise EmptySpecies("species vector is empty")
    g = reduce(math.gcd, counts.tolist())
    return Composition(tuple(zip(values.tolist(), (counts // g).tolist())))


def expand_composition(c: Composition, j: int) -> np.ndarray:
    """Species vector with every count multiplied by ``j``, ascending Z."""
    if int(j) != j or j < 1:
        raise InvalidMultiplier(f"multiplier must be a positive integer, got {j}")
    return np.concatenate(
        [np.full(count * int(j), z, dtype=np.int64) for z, count in c.counts]
    )


def wrap_to_cell(p: PeriodicUnit) -> PeriodicUnit:
    """Move every atom into the cell so fractional coordinates lie in [0, 1)."""
    frac = p.frac_coords()
    wrapped = frac - np.floor(frac)
    # floor can leave exactly 1.0 after rounding of tiny negatives
    wrapped[wrapped >= 1.0] = 0.0
    return p.replace(coords=p.lattice @ wrapped)


def coset_representatives(m: np.ndarray) -> np.ndarray:
    """Integer vectors t (columns) with ``M^-1 t`` in [0, 1)^3.

    These index the ``|det M|`` translations of the old lattice that are
    distinct modulo the sublattice spanned by the columns of ``M``.
    """
    m = np.asarray(m, dtype=np.int64)
    det = int(round(np.linalg.det(m)))
    if det == 0:
        raise SingularTransform("basis change matrix is singular")
    # adjugate: M^-1 = adj / det, computed exactly in integers
    adj = np.array(
        [[m[(c + 1) % 3, (r + 1) % 3] * m[(c + 2) % 3, (r + 2) % 3]
          - m[(c + 1) % 3, (r + 2) % 3] * m[(c + 2) % 3, (r + 1) % 3]
          for c in range(3)] for r in range(3)],
        dtype=np.int64,
    )
    corners = m @ np.array(list(itertools.product((0, 1), repeat=3))).T
    lo, hi = corners.min(axis=1), corners.max(axis=1)
    grid = np.stack(
        np.meshgrid(*(np.arange(lo[a], hi[a] + 1) for a in range(3)), indexing="ij"),
        axis=0,
    ).reshape(3, -1)
    scaled = adj @ grid * np.sign(det)
    keep = np.all((scaled >= 0) & (scaled < abs(det)), axis=0)
    reps = grid[:, keep]
    assert reps.shape[1] == abs(det), (reps.shape, det)
    return reps


def apply_basis_change(p: PeriodicUnit, m) -> PeriodicUnit:
    """Re-describe ``p`` with lattice ``L @ M``.

    For ``|det M| = j > 1`` the result is a supercell holding ``n * j`` atoms.
    Atoms are wrapped into the new cell.
    """
    m = np.asarray(m)
    if not np.allclose(m, np.round(m)):
        raise SingularTransform("basis change must be an integer matrix")
    m = np.round(m).astype(np.int64)
    reps = coset_representatives(m)
    new_lattice = p.lattice @ m
    frac = p.frac_coords()
    # atom-major ordering keeps copies of an atom adjacent
    shifted = (frac[:, :, None] + reps[:, None, :]).reshape(3, -1)
    new_frac = np.linalg.solve(m.astype(np.float64), shifted)
    new_frac -= np.floor(new_frac)
    new_frac[new_frac >= 1.0] = 0.0
    species = np.repeat(p.species, reps.shape[1])
    return PeriodicUnit(species, new_lattice @ new_frac, new_lattice)


def permute_atoms(p: PeriodicUnit, perm: Sequence[int]) -> PeriodicUnit:
    perm = np.asarray(perm)
    return p.replace(species=p.species[perm], coords=p.coords[:, perm])


def reciprocal_norms(lattice: np.ndarray) -> np.ndarray:
    """Norms of the rows of ``L^-1``; ``1 / norm`` is the spacing between
    opposite cell faces."""
    return np.linalg.norm(np.linalg.inv(lattice), axis=1)


def ptos_truncated(p: PeriodicUnit, radius: float):
    """All atom images ``x_i + L k`` within ``radius`` of the origin.

    Returns:
        ``(species, positions)`` with positions of shape ``(m, 3)``, sorted
        lexicographically by species then position.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    _check_lattice(p.lattice)
    frac = p.frac_coords()
    reach = radius * reciprocal_norms(p.lattice)
    lo = np.floor(-reach[:, None] - frac.max(axis=1, keepdims=True)).astype(int).ravel()
    hi = np.ceil(reach[:, None] - frac.min(axis=1, keepdims=True)).astype(int).ravel()
    ks = np.stack(
        np.meshgrid(*(np.arange(lo[a], hi[a] + 1) for a in range(3)), indexing="ij"),
        axis=0,
    ).reshape(3, -1)
    images = p.coords[:, :, None] + (p.lattice @ ks)[:, None, :]  # 3 x n x K
    dist = np.linalg.norm(images, axis=0)
    atom_idx, img_idx = np.nonzero(dist <= radius)
    species = p.species[atom_idx]
    positions = images[:, atom_idx, img_idx].T
    order = np.lexsort((positions[:, 2], positions[:, 1], positions[:, 0], species))
    return species[order], positions[order]


def atom_sets_equal(a, b, tol: float = 1e-9) -> bool:
    """Compare two ``(species, positions)`` sets up to ``tol`` Angstrom."""
    from scipy.spatial import cKDTree

    (sa, pa), (sb, pb) = a, b
    if sa.size != sb.size:
        return False
    if sa.size == 0:
        return True
    for z in np.unique(np.concatenate([sa, sb])):
        xa, xb = pa[sa == z], pb[sb == z]
        if len(xa) != len(xb):
            return False
        dist, idx = cKDTree(xb).query(xa, distance_upper_bound=tol)
        if not np.all(np.isfinite(dist)) or np.unique(idx).size != idx.size:
            return False
    return True


def validate(p: PeriodicUnit, eps_det: float = EPS_DET,
             eps_coincide: float = EPS_COINCIDE) -> list[Violation]:
    """Check the periodic-unit invariants; an empty list means valid."""
    from .niggli import niggli_reduce

    violations = []
    if not (np.all(np.isfinite(p.coords)) and np.all(np.isfinite(p.lattice))):
        return [Violation("nonfinite", "coordinates or lattice contain NaN/Inf")]
    if p.n == 0:
        violations.append(Violation("species", "no atoms"))
    bad = (p.species < 1) | (p.species > MAX_Z)
    if np.any(bad):
        violations.append(
            Violation("species", f"atomic numbers out of range: {p.species[bad].tolist()}")
        )
    det = float(np.linalg.det(p.lattice))
    if abs(det) <= eps_det:
        violations.append(Violation("degenerate", f"|det L| = {abs(det):.3g}"))
        return violations
    if p.n == 0:
        return violations

    reduced, m = niggli_reduce(p.lattice)
    frac = np.linalg.solve(reduced, p.coords)
    diff = frac[:, None, :] - frac[:, :, None]  # [:, i, j] = f_j - f_i
    diff -= np.round(diff)
    block = np.array(list(itertools.product((-1, 0, 1), repeat=3))).T
    disp = reduced @ (diff.reshape(3, -1)[:, :, None] + block[:, None, :]).reshape(3, -1)
    dist = np.linalg.norm(disp, axis=0).reshape(p.n, p.n, -1)
    zero = np.flatnonzero(np.all(block == 0, axis=0))[0]
    idx = np.arange(p.n)
    dist[idx, idx, zero] = np.inf
    close = np.argwhere(dist <= eps_coincide)
    for i, j, _ in close:
        if i <= j:
            violations.append(
                Violation("coincident", f"atoms {i} and {j} coincide under periodicity")
            )
    return violations


def is_valid(p: PeriodicUnit) -> bool:
    return not validate(p)
