"""Executable property suites: re-description invariance, continuity,
gradient correctness, sampler statistics and matcher consistency.

Each ``run_*`` function returns a report whose ``passed`` flag summarises the
checks and whose ``lines()`` render one line per check. They are used by the
``check`` command and by the test-suite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .crystal import (
    PeriodicUnit,
    apply_basis_change,
    atom_sets_equal,
    permute_atoms,
    ptos_truncated,
    reduce_composition,
)
from .evaluator import MatchTolerances, match_structures
from .gradients import batch_energy_with_grads, energy_with_grads, finite_diff_check
from .graph import enumerate_edges
from .model import Batch, ModelConfig, ModelParams, cutoff_from_volume, forward
from .sampler import AnnealSchedule, anneal, mala_chain, mh_accept, sample_many

KINDS = ("translation", "rotation", "permutation", "unimodular", "supercell")
TOLERANCES = {
    "identity": 1e-9,
    "translation": 1e-9,
    "rotation": 1e-9,
    "permutation": 1e-9,
    "unimodular": 1e-8,
    "supercell": 1e-8,
}


@dataclass
class CheckResult:
    name: str
    value: float
    limit: str
    passed: bool

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: {self.value:.3g} ({self.limit})"


@dataclass
class SuiteReport:
    suite: str
    checks: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def add(self, name, value, passed, limit=""):
        self.checks.append(CheckResult(name, float(value), limit, bool(passed)))

    def lines(self) -> list[str]:
        return [f"[{self.suite}] {c.line()}" for c in self.checks]

    def summary(self) -> dict:
        return {"suite": self.suite, "passed": self.passed,
                "checks": {c.name: {"value": c.value, "passed": c.passed} for c in self.checks}}


# -- random inputs ---------------------------------------------------------

SPECIES_POOL = (1, 3, 6, 8, 11, 12, 14, 17, 20, 26, 29, 38, 53, 56, 82)


def random_unit(rng, n: Optional[int] = None, n_max: int = 8, max_species: int = 3,
                density: float = 0.05, max_per_species: Optional[int] = None) -> PeriodicUnit:
    """Well-separated random unit: distorted cell at about ``density``."""
    if n is None:
        n = int(rng.integers(1, n_max + 1))
    k_min = 1 if max_per_species is None else -(-n // max_per_species)
    if k_min > max_species:
        raise ValueError(f"{n} atoms need more than {max_species} species")
    k = int(rng.integers(k_min, min(max_species, n) + 1))
    pool = rng.choice(SPECIES_POOL, size=k, replace=False)
    while True:
        species = np.sort(rng.choice(pool, size=n))
        counts = np.unique(species, return_counts=True)[1]
        if max_per_species is None or counts.max() <= max_per_species:
            break
    shape = np.eye(3) + 0.3 * rng.standard_normal((3, 3))
    lattice = shape * (n / density / abs(np.linalg.det(shape))) ** (1.0 / 3.0)
    spacing = (n / density) ** (1.0 / 3.0) / n ** (1.0 / 3.0)
    for _ in range(1000):
        p = PeriodicUnit.from_fractional(species, rng.random((3, n)), lattice)
        if n == 1:
            return p
        d = enumerate_edges(p.coords, p.lattice, 0.4 * spacing)[4]
        if d.size == 0:
            return p
    return p


def random_rotation(rng, proper: Optional[bool] = None) -> np.ndarray:
    """Haar-random orthogonal matrix; improper with probability 1/2 unless set."""
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    if proper is False or (proper is None and rng.random() < 0.5):
        q = -q
    return q


def random_unimodular(rng, max_shears: int = 5) -> np.ndarray:
    m = np.eye(3, dtype=np.int64)
    for _ in range(int(rng.integers(1, max_shears + 1))):
        i, j = rng.choice(3, size=2, replace=False)
        e = np.eye(3, dtype=np.int64)
        e[i, j] = rng.choice((-1, 1))
        m = m @ e
    if rng.random() < 0.5:
        m = m @ np.diag([-1, 1, 1])
    return m


_SUPERCELLS = {2: ((2, 1, 1),), 4: ((2, 2, 1), (4, 1, 1)), 8: ((2, 2, 2), (4, 2, 1), (8, 1, 1))}


def random_supercell(rng) -> np.ndarray:
    det = int(rng.choice((2, 4, 8)))
    diag = list(_SUPERCELLS[det][rng.integers(len(_SUPERCELLS[det]))])
    rng.shuffle(diag)
    return np.diag(diag).astype(np.int64)


# -- re-descriptions -------------------------------------------------------

@dataclass
class RedescriptionCase:
    """A unit and a re-description of it.

    ``isometry`` maps base positions to transformed positions (``x -> Q x + b``).
    """

    kind: str
    base: PeriodicUnit
    transformed: PeriodicUnit
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    shift: np.ndarray = field(default_factory=lambda: np.zeros(3))
    matrix: Optional[np.ndarray] = None

    def verify(self, tol: float = 1e-9) -> bool:
        """Both descriptions give the same set of atom images (checked in a
        sphere, both ways, after undoing the isometry)."""
        radius = 2.0 * (abs(np.linalg.det(self.base.lattice)) / self.base.n) ** (1 / 3) + 1.0
        margin = np.linalg.norm(self.shift) + 1e-6
        zb, xb = ptos_truncated(self.base, radius)
        zt, xt = ptos_truncated(self.transformed, radius)
        back = (xt - self.shift) @ self.rotation  # Q^T (y - b)
        forward_ = xb @ self.rotation.T + self.shift
        big_b = ptos_truncated(self.base, radius + margin)
        big_t = ptos_truncated(self.transformed, radius + margin)
        return _contained((zt, back), big_b, tol) and _contained((zb, forward_), big_t, tol)


def _contained(a, b, tol):
    from scipy.spatial import cKDTree

    (za, xa), (zb, xb) = a, b
    for z in np.unique(za):
        pts = xb[zb == z]
        if pts.size == 0:
            return False
        dist, _ = cKDTree(pts).query(xa[za == z], distance_upper_bound=tol)
        if not np.all(np.isfinite(dist)):
            return False
    return True


def make_case(p: PeriodicUnit, kind: str, rng) -> RedescriptionCase:
    if kind == "identity":
        return RedescriptionCase(kind, p, p)
    if kind == "translation":
        b = p.lattice @ rng.random(3)
        moved = p.replace(coords=p.coords + b[:, None])
        return RedescriptionCase(kind, p, moved, shift=b)
    if kind == "rotation":
        q = random_rotation(rng)
        return RedescriptionCase(kind, p, p.replace(coords=q @ p.coords, lattice=q @ p.lattice),
                                 rotation=q)
    if kind == "permutation":
        return RedescriptionCase(kind, p, permute_atoms(p, rng.permutation(p.n)))
    if kind == "unimodular":
        m = random_unimodular(rng)
        return RedescriptionCase(kind, p, apply_basis_change(p, m), matrix=m)
    if kind == "supercell":
        m = random_supercell(rng)
        return RedescriptionCase(kind, p, apply_basis_change(p, m), matrix=m)
    raise ValueError(f"unknown re-description kind {kind!r}")


def gen_redescriptions(p: PeriodicUnit, kinds: Sequence[str] = KINDS, count: int = 1,
                       seed=0) -> list[RedescriptionCase]:
    """Identity first, then ``count`` seeded cases of every kind; each
    case is verified before it is returned."""
    rng = np.random.default_rng(seed)
    cases = [make_case(p, "identity", rng)]
    for kind in kinds:
        for _ in range(count):
            cases.append(make_case(p, kind, rng))
    for c in cases:
        if not c.verify():
            raise AssertionError(f"{c.kind} case does not describe the same crystal")
    return cases


def _rel(a, b):
    return abs(a - b) / max(abs(b), np.finfo(float).tiny)


def run_invariance_suite(params: ModelParams, cfg: ModelConfig,
                         cases: Sequence[RedescriptionCase], check_training: bool = True,
                         beta: float = 1.0) -> SuiteReport:
    """Energy (and Boltzmann weight) invariance per re-description kind.

    With ``check_training`` the positive-phase parameter gradient is compared
    as well, to ``1e-7`` relative norm.
    """
    report = SuiteReport("invariance")
    worst = {}
    worst_weight = 0.0
    worst_grad = 0.0
    units = [u for c in cases for u in (c.base, c.transformed)]
    e = forward(Batch(units, cfg), params, cfg)
    for k, c in enumerate(cases):
        eb, et = e[2 * k], e[2 * k + 1]
        worst[c.kind] = max(worst.get(c.kind, 0.0), _rel(et, eb))
        # exp(-beta H) ratio between the two descriptions
        worst_weight = max(worst_weight, abs(math.expm1(-beta * (et - eb))))
    if check_training:
        for c in cases:
            if c.kind == "identity":
                continue
            gb = energy_with_grads(c.base, params, cfg, {"params"})[1].grad_params
            gt = energy_with_grads(c.transformed, params, cfg, {"params"})[1].grad_params
            num = math.sqrt(sum(float(np.sum((gt[n] - gb[n]) ** 2)) for n in gb))
            den = math.sqrt(sum(float(np.sum(gb[n] ** 2)) for n in gb))
            worst_grad = max(worst_grad, num / max(den, 1e-300))
    for kind, dev in worst.items():
        tol = TOLERANCES[kind]
        report.add(f"energy {kind}", dev, dev <= tol, f"<= {tol:g} relative")
    report.add("boltzmann weight ratio", worst_weight, worst_weight <= 1e-8, "<= 1e-8")
    if check_training:
        report.add("positive-phase gradient", worst_grad, worst_grad <= 1e-7, "<= 1e-7 relative norm")
    return report


# -- continuity ------------------------------------------------------------

def _energy_fn(params, cfg, use_envelope=True):
    def f(units):
        return forward(Batch(units, cfg), params, cfg, use_envelope=use_envelope)
    return f


def cutoff_crossing_pair(p: PeriodicUnit, cfg: ModelConfig, delta: float):
    """Two copies of ``p`` in which one atom sits just inside and just outside
    the cutoff sphere of another atom's image."""
    cutoff = cutoff_from_volume(p.n, abs(np.linalg.det(p.lattice)), cfg.cutoff_multiplier)
    src, dst, images, vec, dist = enumerate_edges(p.coords, p.lattice, 1.3 * cutoff)
    ok = src != dst
    if not np.any(ok):
        raise ValueError("need a pair of distinct atoms")
    e = np.flatnonzero(ok)[np.argmin(np.abs(dist[ok] - cutoff))]
    j, direction, r = dst[e], vec[e] / dist[e], dist[e]
    out = []
    for target in (cutoff - delta, cutoff + delta):
        coords = p.coords.copy()
        coords[:, j] += (target - r) * direction
        out.append(p.replace(coords=coords))
    return out


def _lipschitz(f, p, perturb, directions, delta):
    """``max_u |H(p + delta u) - H(p)| / delta`` over the given directions."""
    units = [p] + [perturb(p, delta * u) for u in directions]
    e = f(units)
    return float(np.max(np.abs(e[1:] - e[0])) / delta)


def _move_coords(p, step):
    return p.replace(coords=p.coords + step.reshape(p.coords.shape))


def _move_column(col):
    def move(p, step):
        lattice = p.lattice.copy()
        lattice[:, col] += step
        return p.replace(lattice=lattice)
    return move


def run_continuity_suite(params: ModelParams, cfg: ModelConfig, seed=0, units: int = 50,
                         directions: int = 10, delta: float = 1e-7,
                         use_envelope: bool = True) -> SuiteReport:
    """Cutoff-crossing jump and local Lipschitz estimates.

    ``use_envelope=False`` evaluates the energy without the cutoff envelope;
    the crossing check must then fail.
    """
    rng = np.random.default_rng(seed)
    f = _energy_fn(params, cfg, use_envelope)
    report = SuiteReport("continuity")
    jump, coord_ratio, lattice_ratio, scale_excess = 0.0, 1.0, 1.0, 0.0
    for _ in range(units):
        p = random_unit(rng, n=int(rng.integers(2, 9)))
        inside, outside = cutoff_crossing_pair(p, cfg, delta)
        e_in, e_out = f([inside, outside])
        jump = max(jump, _rel(e_out, e_in))

        dirs = rng.standard_normal((directions, 3 * p.n))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        k3 = _lipschitz(f, p, _move_coords, dirs, 1e-3)
        k5 = _lipschitz(f, p, _move_coords, dirs, 1e-5)
        coord_ratio = max(coord_ratio, max(k3, k5) / max(min(k3, k5), 1e-300))

        for col in range(3):
            column = p.lattice[:, col]
            ldirs = rng.standard_normal((directions, 3))
            ldirs[0] = column  # pure scaling of the column
            ldirs /= np.linalg.norm(ldirs, axis=1, keepdims=True)
            move = _move_column(col)
            k3 = _lipschitz(f, p, move, ldirs, 1e-3)
            k5 = _lipschitz(f, p, move, ldirs, 1e-5)
            lattice_ratio = max(lattice_ratio, max(k3, k5) / max(min(k3, k5), 1e-300))
            scaled = p.lattice.copy()
            scaled[:, col] *= 1 + 1e-7
            e0, e1 = f([p, p.replace(lattice=scaled)])
            bound = max(k3, k5) * 1e-7 * np.linalg.norm(column)
            scale_excess = max(scale_excess, abs(e1 - e0) / max(bound, 1e-300))
    report.add("cutoff crossing jump", jump, jump <= 1e-6, f"<= 1e-6 relative at delta={delta:g}")
    report.add("coordinate Lipschitz ratio", coord_ratio, coord_ratio <= 2.0, "<= 2 between 1e-3 and 1e-5")
    report.add("lattice Lipschitz ratio", lattice_ratio, lattice_ratio <= 2.0, "<= 2 between 1e-3 and 1e-5")
    # K comes from difference quotients, so allow their second-order slack
    report.add("column scaling / K bound", scale_excess, scale_excess <= 1.01, "<= 1 (+1% slack)")
    return report


# -- gradients -------------------------------------------------------------

def run_gradient_suite(params: ModelParams, cfg: ModelConfig, seed=0, units: int = 20,
                       h: float = 1e-4, tol: float = 1e-5, n_max: int = 8,
                       targets=("coords", "lattice", "params"), rel_floor: float = 1e-6,
                       max_scalars: int = 10_000, order: int = 4,
                       noise_ulps: float = 8.0) -> SuiteReport:
    """Analytic gradients against central differences plus the null spaces
    of translations (``sum_i dH/dx_i = 0``) and infinitesimal rotations
    (``dH/dX X^T + dH/dL L^T`` symmetric).

    Each unit's relative errors are floored at the gradient size whose
    difference quotient carries ``tol`` relative rounding noise, taking the
    energy to be accurate to ``noise_ulps`` ulps: ``noise_ulps * eps * |H| /
    (h * tol)``.
    """
    rng = np.random.default_rng(seed)
    report = SuiteReport("gradients")
    worst = {t: 0.0 for t in targets}
    null = rot = 0.0
    for k in range(units):
        p = random_unit(rng, n=int(rng.integers(1, n_max + 1)))
        h0 = abs(float(forward(Batch([p], cfg), params, cfg)[0]))
        floor = noise_ulps * np.finfo(float).eps * h0 / (h * tol)
        for t in targets:
            worst[t] = max(worst[t], finite_diff_check(t, p, params, cfg, h=h, seed=k, floor=floor,
                                                       rel_floor=rel_floor, max_scalars=max_scalars,
                                                       order=order))
        g = energy_with_grads(p, params, cfg, {"coords", "lattice"})[1]
        null = max(null, float(np.max(np.abs(g.grad_coords.sum(axis=1)))))
        s = g.grad_coords @ p.coords.T + g.grad_lattice @ p.lattice.T
        rot = max(rot, float(np.linalg.norm(s - s.T)) / math.sqrt(2.0))
    for t in targets:
        report.add(f"d/d{t} finite differences", worst[t], worst[t] <= tol, f"<= {tol:g} relative")
    report.add("translation null space", null, null <= 1e-8, "<= 1e-8")
    report.add("rotation null space", rot, rot <= 1e-8, "<= 1e-8")
    return report


# -- sampler ---------------------------------------------------------------

def batch_means_se(x, batches: int = 100) -> float:
    """Standard error of the mean of a correlated series by batch means."""
    x = np.asarray(x)
    size = x.size // batches
    means = x[: size * batches].reshape(batches, size).mean(axis=1)
    return float(means.std(ddof=1) / math.sqrt(batches))


def run_sampler_suite(seed=0, samples: int = 100_000, burn_in: int = 2_000, beta: float = 4.0,
                      alpha: float = 0.1, mh_draws: int = 100_000,
                      params: Optional[ModelParams] = None,
                      cfg: Optional[ModelConfig] = None) -> SuiteReport:
    """MALA on ``H = x^2 / 2``, Metropolis-Hastings frequencies, annealing
    endpoints and chain determinism."""
    rng = np.random.default_rng(seed)
    report = SuiteReport("sampler")

    def quadratic(x):
        return 0.5 * float(x @ x), x

    chain, rate = mala_chain(np.zeros(1), quadratic, samples + burn_in, alpha, beta, rng)
    x = chain[burn_in:, 0]
    z_mean = abs(x.mean()) / batch_means_se(x)
    z_var = abs(np.mean(x * x) - 1.0 / beta) / batch_means_se(x * x)
    report.add("quadratic mean z-score", z_mean, z_mean <= 3.0, "<= 3 sigma")
    report.add("quadratic variance z-score", z_var, z_var <= 3.0, "<= 3 sigma")

    worst = 0.0
    for delta, log_ratio, b in ((0.0, 0.0, 1.0), (math.log(2.0), 0.0, 1.0), (0.3, 0.1, 2.0),
                                (1.0, -0.5, 0.5), (-0.2, 0.0, 3.0)):
        prob = min(1.0, math.exp(log_ratio - b * delta))
        hits = sum(mh_accept(delta, log_ratio, b, rng) for _ in range(mh_draws))
        sd = math.sqrt(max(prob * (1 - prob), 1e-300) / mh_draws)
        z = 0.0 if prob in (0.0, 1.0) and hits / mh_draws == prob else abs(hits / mh_draws - prob) / sd
        worst = max(worst, z)
    report.add("acceptance frequency z-score", worst, worst <= 3.0, "<= 3 sigma")

    sched = AnnealSchedule()
    exact = anneal(0, sched) == (1.0, 0.5) and anneal(sched.steps - 1, sched) == (1000.0, 0.0005)
    report.add("annealing endpoints exact", 0.0 if exact else 1.0, exact, "bitwise")

    if params is not None and cfg is not None:
        short = AnnealSchedule(steps=20)
        a = sample_many([[11, 17]] * 2, params, cfg, short, seed=seed)
        b = sample_many([[11, 17]] * 2, params, cfg, short, seed=seed)
        same = all(np.array_equal(u.coords, v.coords) and np.array_equal(u.lattice, v.lattice)
                   for u, v in zip(a.units, b.units))
        report.add("chain determinism", 0.0 if same else 1.0, same, "identical")
    return report


# -- matcher ---------------------------------------------------------------

def oracle_pairs(rng, count: int, n_max: int = 8):
    """Pairs probing the assignment stage: noisy re-descriptions of a unit at
    several noise levels, plus unrelated units of the same composition."""
    pairs = []
    for k in range(count):
        p = random_unit(rng, n=int(rng.integers(1, n_max + 1)), max_per_species=4)
        scale = (abs(np.linalg.det(p.lattice)) / p.n) ** (1.0 / 3.0)
        if k % 5 == 4:
            q = random_unit(rng, n=p.n)
            q = q.replace(species=p.species)
        else:
            kind = KINDS[k % 3]  # translation, rotation, permutation
            q = make_case(p, kind, rng).transformed
            noise = (0.02, 0.15, 0.4, 0.7)[k % 4] * scale
            q = q.replace(coords=q.coords + noise * rng.standard_normal(q.coords.shape) / math.sqrt(3))
        pairs.append((p, q))
    return pairs


def run_matcher_suite(seed=0, pairs: int = 100, n_max: int = 8,
                      tol: MatchTolerances = MatchTolerances()) -> SuiteReport:
    """Agreement with the exhaustive assignment and re-description matches."""
    rng = np.random.default_rng(seed)
    report = SuiteReport("matcher")
    disagree, rms_gap = 0, 0.0
    for p, q in oracle_pairs(rng, pairs, n_max):
        fast = match_structures(p, q, tol)
        slow = match_structures(p, q, tol, exhaustive=True)
        if fast.matched != slow.matched:
            disagree += 1
        elif fast.matched:
            rms_gap = max(rms_gap, abs(fast.rms - slow.rms))
    report.add("oracle verdict disagreements", disagree, disagree == 0, "== 0")
    report.add("oracle rms difference", rms_gap, rms_gap <= 1e-9, "<= 1e-9")

    worst, misses = 0.0, 0
    for k in range(max(pairs // 10, 1)):
        p = random_unit(rng, n=int(rng.integers(1, 5)))
        for c in gen_redescriptions(p, count=1, seed=seed * 1000 + k):
            r = match_structures(p, c.transformed, tol)
            if not r.matched:
                misses += 1
            else:
                worst = max(worst, r.rms)
    report.add("re-description misses", misses, misses == 0, "== 0")
    report.add("re-description rms", worst, worst <= 1e-6, "<= 1e-6")
    return report
