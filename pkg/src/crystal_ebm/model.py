"""Envelope-gated crystal graph network used as the energy function.

The energy of a periodic unit is

    H = MLP(mean_i v_i) + penalty_weight * (ln(rho / rho_ref))**2

where node features start from a species embedding and go through
``conv_layers`` updates

    v_i <- softplus(v_i + sum_{(j,k)} cos^2(pi d_ijk / 2D) * psi(v_i, v_j, e_ijk))

with ``psi = sigmoid(gate) * core`` and ``gate``/``core`` each of the form
``(A v_i + B v_j + b) * (C e)``.

Several units can be evaluated at once: their graphs are stacked into one
disjoint union (``Batch``) so each layer is a handful of array operations.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .crystal import EPS_COINCIDE, EPS_DET, PeriodicUnit
from .elements import MAX_Z
from .errors import ConfigError, DegenerateLattice, NonFiniteEnergy
from .graph import GraphConfig, cutoff_from_volume, enumerate_edges

ModelParams = dict  # name -> np.ndarray, see param_shapes()


@dataclass(frozen=True)
class ModelConfig:
    node_dim: int = 32
    edge_dim: int = 32
    conv_layers: int = 3
    mlp_layers: int = 2
    rho_ref: float = 0.05
    penalty_weight: float = 1.0
    penalty_form: str = "squared"  # or "abs"
    cutoff_multiplier: float = 3.0
    smear_max: float = 20.0
    smear_coeff: float = 3.0

    def __post_init__(self):
        for name in ("node_dim", "conv_layers", "mlp_layers"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value}")
        if not self.rho_ref > 0:
            raise ConfigError(f"rho_ref must be > 0, got {self.rho_ref}")
        if self.penalty_form not in ("squared", "abs"):
            raise ConfigError(f"penalty_form must be 'squared' or 'abs', got {self.penalty_form!r}")
        self.graph  # validates the graph fields

    @property
    def graph(self) -> GraphConfig:
        return GraphConfig(
            cutoff_multiplier=self.cutoff_multiplier,
            smear_max=self.smear_max,
            smear_coeff=self.smear_coeff,
            edge_dim=self.edge_dim,
        )

    @classmethod
    def from_dict(cls, values: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**values)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


# architecture sizes used for the small (perovskite) and large (MP-style) datasets
PRESET_SMALL = dict(node_dim=32, edge_dim=32, conv_layers=3, mlp_layers=2)
PRESET_LARGE = dict(node_dim=64, edge_dim=64, conv_layers=6, mlp_layers=4)


def param_shapes(cfg: ModelConfig) -> dict:
    dv, de = cfg.node_dim, cfg.edge_dim
    shapes = {"embedding": (MAX_Z, dv)}
    for l in range(cfg.conv_layers):
        for part in ("gate", "core"):
            shapes[f"conv{l}.{part}.A"] = (dv, dv)
            shapes[f"conv{l}.{part}.B"] = (dv, dv)
            shapes[f"conv{l}.{part}.C"] = (dv, de)
            shapes[f"conv{l}.{part}.b"] = (dv,)
    for m in range(cfg.mlp_layers):
        out = 1 if m == cfg.mlp_layers - 1 else dv
        shapes[f"mlp{m}.W"] = (out, dv)
        shapes[f"mlp{m}.b"] = (out,)
    return shapes


def init_params(cfg: ModelConfig, seed) -> ModelParams:
    """Glorot-uniform weights, zero biases, embedding uniform in +-0.1."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name == "embedding":
            params[name] = rng.uniform(-0.1, 0.1, size=shape)
        elif len(shape) == 1:
            params[name] = np.zeros(shape)
        else:
            fan_out, fan_in = shape
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            params[name] = rng.uniform(-bound, bound, size=shape)
    return params


def check_params(params: ModelParams, cfg: ModelConfig):
    from .errors import ShapeMismatch

    shapes = param_shapes(cfg)
    if set(params) != set(shapes):
        raise ShapeMismatch(
            f"parameter names differ: missing {sorted(set(shapes) - set(params))}, "
            f"extra {sorted(set(params) - set(shapes))}"
        )
    for name, shape in shapes.items():
        if tuple(params[name].shape) != shape:
            raise ShapeMismatch(f"{name}: expected {shape}, got {params[name].shape}")


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softplus(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def envelope(distance, d_cut):
    """``cos^2(pi d / 2 d_cut)`` inside the cutoff, 0 outside."""
    d = np.asarray(distance, dtype=np.float64)
    out = np.cos(np.pi * d / (2.0 * d_cut)) ** 2
    return np.where(d < d_cut, out, 0.0)


def conv_message(v_i, v_j, e, layer: dict):
    """Message ``sigmoid(gate) * core`` for one edge.

    ``layer`` maps ``gate.A``, ``gate.B``, ``gate.C``, ``gate.b`` and the
    same ``core.*`` keys to arrays.
    """
    def branch(part):
        return (layer[f"{part}.A"] @ v_i + layer[f"{part}.B"] @ v_j + layer[f"{part}.b"]) * (
            layer[f"{part}.C"] @ e
        )

    return sigmoid(branch("gate")) * branch("core")


def layer_params(params: ModelParams, l: int) -> dict:
    prefix = f"conv{l}."
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


def meanpool(features) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    if features.shape[0] < 1:
        raise ValueError("mean pooling needs at least one node")
    return features.mean(axis=0)


def density_penalty(n, volume, cfg: ModelConfig):
    log_ratio = np.log(n / volume / cfg.rho_ref)
    if cfg.penalty_form == "squared":
        return cfg.penalty_weight * log_ratio**2
    return cfg.penalty_weight * np.abs(log_ratio)


class Batch:
    """Disjoint union of the graphs of several periodic units.

    Edge topology is fixed at construction; distances are differentiable
    functions of the coordinates and lattices stored here.

    With ``strict=False`` units that are degenerate (tiny volume, coincident
    atoms, unenumerable cell) are dropped and flagged in ``valid`` instead of
    raising.
    """

    def __init__(self, units: Sequence[PeriodicUnit], cfg: ModelConfig, strict: bool = True):
        self.units = list(units)
        self.valid = np.ones(len(self.units), dtype=bool)
        multiplier = cfg.cutoff_multiplier
        species, node_graph, src, dst, images, vectors, dist = [], [], [], [], [], [], []
        edge_graph, cutoffs, dets, counts, members = [], [], [], [], []
        offset = 0
        for u, p in enumerate(self.units):
            try:
                if not (np.all(np.isfinite(p.coords)) and np.all(np.isfinite(p.lattice))):
                    raise DegenerateLattice("non-finite coordinates or lattice")
                det = float(np.linalg.det(p.lattice))
                if abs(det) <= EPS_DET:
                    raise DegenerateLattice(f"|det L| = {abs(det):.3g}")
                cutoff = cutoff_from_volume(p.n, abs(det), multiplier)
                s, t, k, vec, d = enumerate_edges(p.coords, p.lattice, cutoff)
                if d.size and d.min() <= EPS_COINCIDE:
                    raise DegenerateLattice("coincident atoms")
            except DegenerateLattice:
                if strict:
                    raise
                self.valid[u] = False
                continue
            g = len(members)
            members.append(u)
            species.append(p.species)
            node_graph.append(np.full(p.n, g))
            src.append(s + offset)
            dst.append(t + offset)
            images.append(k)
            vectors.append(vec)
            dist.append(d)
            edge_graph.append(np.full(d.size, g))
            cutoffs.append(cutoff)
            dets.append(det)
            counts.append(p.n)
            offset += p.n
        self.members = np.array(members, dtype=np.int64)
        self.num_graphs = len(members)
        self.num_nodes = offset
        self.species = np.concatenate(species) if species else np.zeros(0, np.int64)
        self.node_graph = np.concatenate(node_graph) if node_graph else np.zeros(0, np.int64)
        self.src = np.concatenate(src) if src else np.zeros(0, np.int64)
        self.dst = np.concatenate(dst) if dst else np.zeros(0, np.int64)
        self.images = np.concatenate(images) if images else np.zeros((0, 3), np.int64)
        self.vectors = np.concatenate(vectors) if vectors else np.zeros((0, 3))
        self.distances = np.concatenate(dist) if dist else np.zeros(0)
        self.edge_graph = np.concatenate(edge_graph) if edge_graph else np.zeros(0, np.int64)
        self.cutoffs = np.array(cutoffs)
        self.dets = np.array(dets)
        self.counts = np.array(counts, dtype=np.int64)
        self.node_offsets = np.concatenate([[0], np.cumsum(self.counts)[:-1]]).astype(np.int64)

        num_edges = self.src.size
        ones = np.ones(num_edges)
        # edges are grouped by source node already
        self.scatter_src = sp.csr_matrix(
            (ones, np.arange(num_edges), _indptr(self.src, offset)), shape=(offset, num_edges)
        )
        by_dst = np.argsort(self.dst, kind="stable")
        self.scatter_dst = sp.csr_matrix(
            (ones, by_dst, _indptr(self.dst, offset)), shape=(offset, num_edges)
        )


def _indptr(index, size):
    return np.concatenate([[0], np.cumsum(np.bincount(index, minlength=size))])


def forward(batch: Batch, params: ModelParams, cfg: ModelConfig, keep: bool = False,
            use_envelope: bool = True):
    """Energies of every graph in the batch (``(num_graphs,)``).

    With ``keep=True`` also returns the intermediate values the backward pass
    needs. ``use_envelope=False`` drops the cutoff envelope, which makes the
    energy discontinuous; it exists only to check that tests detect that.
    """
    gcfg = cfg.graph
    mu, sigma = gcfg.centers, gcfg.sigma
    d = batch.distances
    cut = batch.cutoffs[batch.edge_graph]
    feats = np.exp(-((d[:, None] - mu) ** 2) / (2.0 * sigma**2))
    phase = np.pi * d / (2.0 * cut)
    env = np.cos(phase) ** 2 if use_envelope else np.ones_like(phase)

    v = params["embedding"][batch.species - 1]
    layers = []
    dv = cfg.node_dim
    for l in range(cfg.conv_layers):
        A = np.concatenate([params[f"conv{l}.gate.A"], params[f"conv{l}.core.A"]])
        B = np.concatenate([params[f"conv{l}.gate.B"], params[f"conv{l}.core.B"]])
        C = np.concatenate([params[f"conv{l}.gate.C"], params[f"conv{l}.core.C"]])
        b = np.concatenate([params[f"conv{l}.gate.b"], params[f"conv{l}.core.b"]])
        left = v @ A.T + b
        right = v @ B.T
        s = left[batch.src] + right[batch.dst]
        r = feats @ C.T
        t = s * r
        gate = sigmoid(t[:, :dv])
        core = t[:, dv:]
        msg = gate * core
        u = v + batch.scatter_src @ (env[:, None] * msg)
        if keep:
            layers.append(dict(v=v, A=A, B=B, C=C, s=s, r=r, gate=gate, core=core, msg=msg, u=u))
        v = softplus(u)

    pooled = np.add.reduceat(v, batch.node_offsets, axis=0) / batch.counts[:, None]
    h = pooled
    mlp = []
    for m in range(cfg.mlp_layers):
        z = h @ params[f"mlp{m}.W"].T + params[f"mlp{m}.b"]
        mlp.append((h, z))
        h = softplus(z) if m < cfg.mlp_layers - 1 else z
    vol = np.abs(batch.dets)
    energies = h[:, 0] + density_penalty(batch.counts, vol, cfg)
    if not keep:
        return energies
    cache = dict(feats=feats, phase=phase, env=env, cut=cut, layers=layers, mlp=mlp, v_last=v)
    return energies, cache


def energies(units: Sequence[PeriodicUnit], params: ModelParams, cfg: ModelConfig) -> np.ndarray:
    out = forward(Batch(units, cfg), params, cfg)
    if not np.all(np.isfinite(out)):
        raise NonFiniteEnergy(f"non-finite energy in batch: {out}")
    return out


def energy(p: PeriodicUnit, params: ModelParams, cfg: ModelConfig) -> float:
    """Energy of a single periodic unit."""
    return float(energies([p], params, cfg)[0])
