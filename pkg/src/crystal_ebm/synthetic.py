"""Synthetic rock-salt-family corpus for smoke tests and the toy benchmark."""

from __future__ import annotations

import numpy as np
from scipy.spatial.transform import Rotation

from .crystal import PeriodicUnit, wrap_to_cell

# (cation, anion, cubic lattice constant in Angstrom)
ROCK_SALTS = (
    (11, 17, 5.64),  # NaCl
    (19, 17, 6.29),  # KCl
    (11, 9, 4.63),   # NaF
    (3, 9, 4.03),    # LiF
    (19, 35, 6.60),  # KBr
    (37, 53, 7.33),  # RbI
    (12, 8, 4.21),   # MgO
    (20, 8, 4.81),   # CaO
    (3, 17, 5.13),   # LiCl
    (11, 35, 5.97),  # NaBr
)

_FCC_PRIMITIVE = 0.5 * np.array([[0.0, 1.0, 1.0], [1.0, 0.0, 1.0], [1.0, 1.0, 0.0]])


def rock_salt(cation: int, anion: int, a: float, conventional: bool = False) -> PeriodicUnit:
    """Ideal rock salt: the 2-atom primitive cell, or the 8-atom cube."""
    if conventional:
        lattice = a * np.eye(3)
        fcc = np.array([[0, 0, 0], [0, 0.5, 0.5], [0.5, 0, 0.5], [0.5, 0.5, 0]])
        frac = np.concatenate([fcc, fcc + [0.5, 0, 0]]) % 1.0
        species = [cation] * 4 + [anion] * 4
        return PeriodicUnit.from_fractional(species, frac.T, lattice)
    lattice = a * _FCC_PRIMITIVE
    frac = np.array([[0.0, 0.0, 0.0], [0.5, 0.5, 0.5]]).T
    return PeriodicUnit.from_fractional([cation, anion], frac, lattice)


def jitter(p: PeriodicUnit, rng, coord_sigma: float = 0.05, strain_sigma: float = 0.01,
           orient: bool = True) -> PeriodicUnit:
    """Random strain and per-atom noise, then a random rotation and shift."""
    strain = np.eye(3) + strain_sigma * rng.standard_normal((3, 3))
    lattice = strain @ p.lattice
    coords = strain @ p.coords + coord_sigma * rng.standard_normal(p.coords.shape)
    if orient:
        q = Rotation.random(random_state=rng).as_matrix()
        lattice = q @ lattice
        coords = q @ coords + (lattice @ rng.random(3))[:, None]
    return wrap_to_cell(PeriodicUnit(p.species, coords, lattice))


def toy_corpus(seed: int = 0, n_train: int = 40, n_test: int = 10,
               conventional_fraction: float = 0.25, coord_sigma: float = 0.05):
    """Jittered rock salts with varied species pairs and lattice constants.

    Test crystals are primitive 2-atom cells; a fraction of the training
    crystals are 8-atom conventional cubes.

    Returns:
        ``(train, test)`` lists of ``(id, PeriodicUnit)``.
    """
    rng = np.random.default_rng(seed)

    def make(k, conventional):
        cation, anion, a = ROCK_SALTS[rng.integers(len(ROCK_SALTS))]
        a = a * (1.0 + 0.03 * rng.standard_normal())
        base = rock_salt(cation, anion, a, conventional)
        kind = "conv" if conventional else "prim"
        return f"rs{k:03d}-{kind}", jitter(base, rng, coord_sigma=coord_sigma)

    train = [make(k, bool(rng.random() < conventional_fraction)) for k in range(n_train)]
    test = [make(n_train + k, False) for k in range(n_test)]
    return train, test


# Toy benchmark settings: small network, one short chain per datum, and a
# mild energy regulariser that keeps the contrastive loss from diverging.
TOY_MODEL = dict(node_dim=16, edge_dim=32, conv_layers=2, mlp_layers=2)
TOY_TRAIN = dict(epochs=1000, batch_size=4, j_cap=2, energy_reg=0.03, train_chain_steps=100)
TOY_STEPS = 800
