"""Periodic multigraph construction with a density-scaled cutoff."""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from .crystal import PeriodicUnit, atomic_density, reciprocal_norms
from .errors import ConfigError, DegenerateLattice

# candidate images per unit above this are treated as a pathological cell
MAX_CANDIDATES = 4_000_000


@dataclass(frozen=True)
class GraphConfig:
    """Cutoff and smearing settings.

    ``smear_coeff`` multiplies the spacing between Gaussian centres to give
    the standard deviation: ``sigma = smear_coeff * smear_max / (edge_dim - 1)``.
    """

    cutoff_multiplier: float = 3.0
    smear_max: float = 20.0
    smear_coeff: float = 3.0
    edge_dim: int = 32

    def __post_init__(self):
        if not self.cutoff_multiplier > 0:
            raise ConfigError(f"cutoff_multiplier must be > 0, got {self.cutoff_multiplier}")
        if not self.smear_max > 0:
            raise ConfigError(f"smear_max must be > 0, got {self.smear_max}")
        if not self.smear_coeff > 0:
            raise ConfigError(f"smear_coeff must be > 0, got {self.smear_coeff}")
        if int(self.edge_dim) != self.edge_dim or self.edge_dim < 2:
            raise ConfigError(f"edge_dim must be an integer >= 2, got {self.edge_dim}")

    @property
    def centers(self) -> np.ndarray:
        return np.linspace(0.0, self.smear_max, self.edge_dim)

    @property
    def sigma(self) -> float:
        return self.smear_coeff * self.smear_max / (self.edge_dim - 1)


@dataclass(frozen=True, eq=False)
class CrystalGraph:
    """Directed edge list of the periodic multigraph; every edge ``(i, j, k)``
    has its reverse ``(j, i, -k)``.

    Attributes:
        species: node atomic numbers, ``(n,)``.
        src, dst: edge endpoints ``i`` and ``j``, ``(E,)``.
        images: integer image vectors ``k``, ``(E, 3)``.
        distances: ``|x_j + L k - x_i|``, ``(E,)``.
        features: smeared distances, ``(E, edge_dim)``.
        cutoff: cutoff distance ``D``.
    """

    species: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    images: np.ndarray
    distances: np.ndarray
    features: np.ndarray
    cutoff: float

    @property
    def num_nodes(self) -> int:
        return int(self.species.size)

    @property
    def num_edges(self) -> int:
        return int(self.src.size)

    def edge_multiset(self):
        """Sorted ``(i, j, k, d)`` tuples, for comparisons."""
        return sorted(
            (int(i), int(j), tuple(int(v) for v in k), float(d))
            for i, j, k, d in zip(self.src, self.dst, self.images, self.distances)
        )


def cutoff_distance(p: PeriodicUnit, cfg: GraphConfig) -> float:
    """``multiplier * (1 / rho) ** (1/3)``: a fixed multiple of the mean
    interatomic spacing."""
    atomic_density(p)  # raises on a degenerate lattice
    return cutoff_from_volume(p.n, p.volume, cfg.cutoff_multiplier)


def cutoff_from_volume(n: int, volume: float, multiplier: float) -> float:
    return multiplier * (volume / n) ** (1.0 / 3.0)


@functools.lru_cache(maxsize=256)
def _image_block(reach) -> np.ndarray:
    grids = np.meshgrid(*(np.arange(-r, r + 1) for r in reach), indexing="ij")
    block = np.stack(grids, axis=-1).reshape(-1, 3).astype(np.float64)
    block.setflags(write=False)
    return block


def _reach(lattice, cutoff):
    return np.ceil(cutoff * reciprocal_norms(lattice) + 0.5).astype(np.int64)


def enumerable(n: int, lattice: np.ndarray, cutoff: float) -> bool:
    """Whether ``enumerate_edges`` accepts this cell (not too flat)."""
    return bool(np.prod(2 * _reach(lattice, cutoff) + 1) * n * n <= MAX_CANDIDATES)


def enumerate_edges(coords: np.ndarray, lattice: np.ndarray, cutoff: float):
    """All ``(i, j, k)`` with ``|x_j + L k - x_i| < cutoff``, excluding ``i == j, k == 0``.

    Returns ``(src, dst, images, vectors, distances)`` sorted by ``(i, j, k)``,
    where ``vectors[e] = x_j + L k - x_i``.
    """
    n = coords.shape[1]
    frac = np.linalg.solve(lattice, coords)
    shift = np.floor(frac)
    fw = frac - shift
    diff = fw.T[None, :, :] - fw.T[:, None, :]  # [i, j] = fw_j - fw_i
    nearest = np.round(diff)
    diff -= nearest
    # |u_a| <= D * |row_a(L^-1)| for any displacement L u shorter than D, and
    # the recentred fractional differences lie in [-0.5, 0.5]
    reach = _reach(lattice, cutoff)
    if np.prod(2 * reach + 1) * n * n > MAX_CANDIDATES:
        raise DegenerateLattice("cell too flat for cutoff enumeration")
    ks = _image_block(tuple(reach.tolist()))
    cart_diff = (diff @ lattice.T).reshape(-1, 3)
    cart_k = ks @ lattice.T
    # |a + b|^2 expanded so the pair x image block is a single matrix product;
    # it is only a prefilter, exact distances are recomputed below
    d2 = (
        np.einsum("pc,pc->p", cart_diff, cart_diff)[:, None]
        + 2.0 * (cart_diff @ cart_k.T)
        + np.einsum("kc,kc->k", cart_k, cart_k)[None, :]
    )
    pair, kk = np.nonzero(d2 < (cutoff * (1 + 1e-6)) ** 2)
    i, j = np.divmod(pair, n)
    images = (
        ks[kk].astype(np.int64)
        - nearest.reshape(-1, 3)[pair].astype(np.int64)
        - shift[:, j].T.astype(np.int64)
        + shift[:, i].T.astype(np.int64)
    )
    # exact Cartesian displacement from the unwrapped coordinates
    vectors = (coords[:, j] - coords[:, i]).T + images.astype(np.float64) @ lattice.T
    dist = np.sqrt(np.einsum("ec,ec->e", vectors, vectors))
    keep = dist < cutoff
    keep &= (i != j) | np.any(images != 0, axis=1)
    i, j, images, vectors, dist = i[keep], j[keep], images[keep], vectors[keep], dist[keep]
    span = 2 * (np.abs(images).max(initial=0) + 1) + 1
    off = images + span // 2
    key = ((i * n + j) * span + off[:, 0]) * span + off[:, 1]
    key = key * span + off[:, 2]
    order = np.argsort(key, kind="stable")
    return i[order], j[order], images[order], vectors[order], dist[order]


def neighborhood(p: PeriodicUnit, i: int, d: float):
    """Neighbours of node ``i`` as a list of ``(j, k, distance)``."""
    if not 0 <= i < p.n:
        raise IndexError(f"node {i} out of range for n={p.n}")
    src, dst, images, _, dist = enumerate_edges(p.coords, p.lattice, d)
    sel = src == i
    return [
        (int(j), tuple(int(v) for v in k), float(r))
        for j, k, r in zip(dst[sel], images[sel], dist[sel])
    ]


def smear(distance, cfg: GraphConfig) -> np.ndarray:
    """Gaussian expansion of distances on ``edge_dim`` evenly spaced centres
    from 0 to ``smear_max``. Accepts a scalar or an array of distances."""
    d = np.asarray(distance, dtype=np.float64)
    return np.exp(-((d[..., None] - cfg.centers) ** 2) / (2.0 * cfg.sigma**2))


def build_graph(p: PeriodicUnit, cfg: GraphConfig) -> CrystalGraph:
    cutoff = cutoff_distance(p, cfg)
    src, dst, images, _, dist = enumerate_edges(p.coords, p.lattice, cutoff)
    return CrystalGraph(
        species=p.species,
        src=src,
        dst=dst,
        images=images,
        distances=dist,
        features=smear(dist, cfg),
        cutoff=cutoff,
    )
