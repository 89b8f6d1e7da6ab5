"""Niggli reduction of a lattice basis (Krivy-Gruber, with epsilon comparisons).

Every step is applied as an integer basis change on the lattice itself and the
metric is recomputed from the transformed basis, so the accumulated matrix is
exact and ``reduced == lattice @ M`` holds to rounding.
"""

from __future__ import annotations

import numpy as np

from .errors import DegenerateLattice, ReductionFailed

DEFAULT_TOL = 1e-5
DEFAULT_MAX_ITER = 100

_SWAP_AB = np.array([[0, -1, 0], [-1, 0, 0], [0, 0, -1]])
_SWAP_BC = np.array([[-1, 0, 0], [0, 0, -1], [0, -1, 0]])


def _metric(lattice):
    g = lattice.T @ lattice
    return g[0, 0], g[1, 1], g[2, 2], 2 * g[1, 2], 2 * g[0, 2], 2 * g[0, 1]


def _sign(x, eps):
    return 1 if x > eps else (-1 if x < -eps else 0)


def _size_reduce(lattice):
    """Cheap pairwise Lagrange reduction so the Krivy-Gruber loop starts close
    to reduced; long skinny inputs would otherwise need many unit steps."""
    lattice = lattice.copy()
    m = np.eye(3, dtype=np.int64)
    for _ in range(50):
        changed = False
        for a in range(3):
            for b in range(3):
                if a == b:
                    continue
                va, vb = lattice[:, a], lattice[:, b]
                r = int(np.round(va @ vb / (va @ va)))
                if r != 0 and (vb - r * va) @ (vb - r * va) < vb @ vb * (1 - 1e-12):
                    lattice[:, b] = vb - r * va
                    m[:, b] -= r * m[:, a]
                    changed = True
        if not changed:
            break
    return lattice, m


def niggli_reduce(lattice, tol: float = DEFAULT_TOL,
                  max_iter: int = DEFAULT_MAX_ITER):
    """Reduce a column-major lattice basis to its Niggli cell.

    Args:
        lattice: 3x3 matrix whose columns are basis vectors.
        tol: comparison tolerance relative to ``|det L|^(2/3)``.
        max_iter: cap on Krivy-Gruber passes.

    Returns:
        ``(reduced, M)`` with ``reduced = lattice @ M`` and ``det M = +1``.

    Raises:
        DegenerateLattice: if ``|det L|`` is (numerically) zero.
        ReductionFailed: if the loop does not settle within ``max_iter``.
    """
    lattice = np.asarray(lattice, dtype=np.float64)
    vol = abs(np.linalg.det(lattice))
    if not np.isfinite(vol) or vol <= 1e-8:
        raise DegenerateLattice(f"|det L| = {vol:.3g}")
    eps = tol * vol ** (2.0 / 3.0)

    cur, total = _size_reduce(lattice)

    def apply(t):
        nonlocal cur, total
        cur = cur @ t
        total = total @ t

    for _ in range(max_iter):
        A, B, C, xi, eta, zeta = _metric(cur)
        # step 1
        if A > B + eps or (abs(A - B) <= eps and abs(xi) > abs(eta) + eps):
            apply(_SWAP_AB)
            A, B, C, xi, eta, zeta = _metric(cur)
        # step 2
        if B > C + eps or (abs(B - C) <= eps and abs(eta) > abs(zeta) + eps):
            apply(_SWAP_BC)
            continue
        # steps 3 and 4: make xi, eta, zeta all positive or all non-positive
        l, m_, n_ = _sign(xi, eps), _sign(eta, eps), _sign(zeta, eps)
        if l * m_ * n_ == 1:
            apply(np.diag([l, m_, n_]))
        else:
            flips = [1, 1, 1]
            free = None
            for axis, s in enumerate((l, m_, n_)):
                if s == 1:
                    flips[axis] = -1
                elif s == 0:
                    free = axis
            if flips[0] * flips[1] * flips[2] < 0:
                if free is None:
                    raise ReductionFailed("inconsistent sign pattern in step 4")
                flips[free] = -1
            apply(np.diag(flips))
        A, B, C, xi, eta, zeta = _metric(cur)
        # step 5
        if (abs(xi) > B + eps
                or (abs(B - xi) <= eps and 2 * eta < zeta - eps)
                or (abs(B + xi) <= eps and zeta < -eps)):
            t = np.eye(3, dtype=np.int64)
            t[1, 2] = -np.sign(xi)
            apply(t)
            continue
        # step 6
        if (abs(eta) > A + eps
                or (abs(A - eta) <= eps and 2 * xi < zeta - eps)
                or (abs(A + eta) <= eps and zeta < -eps)):
            t = np.eye(3, dtype=np.int64)
            t[0, 2] = -np.sign(eta)
            apply(t)
            continue
        # step 7
        if (abs(zeta) > A + eps
                or (abs(A - zeta) <= eps and 2 * xi < eta - eps)
                or (abs(A + zeta) <= eps and eta < -eps)):
            t = np.eye(3, dtype=np.int64)
            t[0, 1] = -np.sign(zeta)
            apply(t)
            continue
        # step 8
        s = xi + eta + zeta + A + B
        if s < -eps or (abs(s) <= eps and 2 * (A + eta) + zeta > eps):
            t = np.eye(3, dtype=np.int64)
            t[0, 2] = 1
            t[1, 2] = 1
            apply(t)
            continue
        return lattice @ total, total
    raise ReductionFailed(f"Niggli reduction did not converge in {max_iter} passes")


def is_niggli_reduced(lattice, tol: float = DEFAULT_TOL) -> bool:
    """Check the Niggli (Krivy-Gruber) reduced-cell conditions."""
    lattice = np.asarray(lattice, dtype=np.float64)
    eps = tol * abs(np.linalg.det(lattice)) ** (2.0 / 3.0)
    A, B, C, xi, eta, zeta = _metric(lattice)
    if A > B + eps or B > C + eps:
        return False
    if abs(A - B) <= eps and abs(xi) > abs(eta) + eps:
        return False
    if abs(B - C) <= eps and abs(eta) > abs(zeta) + eps:
        return False
    signs = (_sign(xi, eps), _sign(eta, eps), _sign(zeta, eps))
    positive = all(s == 1 for s in signs)
    nonpositive = all(s <= 0 for s in signs)
    if not (positive or nonpositive):
        return False
    if abs(xi) > B + eps or abs(eta) > A + eps or abs(zeta) > A + eps:
        return False
    if positive:
        if abs(xi - B) <= eps and zeta > 2 * eta + eps:
            return False
        if abs(eta - A) <= eps and zeta > 2 * xi + eps:
            return False
        if abs(zeta - A) <= eps and eta > 2 * xi + eps:
            return False
    else:
        if abs(xi + B) <= eps and abs(zeta) > eps:
            return False
        if abs(eta + A) <= eps and abs(zeta) > eps:
            return False
        if abs(zeta + A) <= eps and abs(eta) > eps:
            return False
        if abs(xi + eta + zeta + A + B) <= eps and 2 * (A + eta) + zeta > eps:
            return False
        if xi + eta + zeta + A + B < -eps:
            return False
    return True
