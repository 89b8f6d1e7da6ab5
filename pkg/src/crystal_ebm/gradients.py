"""Reverse-mode gradients of the energy network.

The backward pass walks the intermediates recorded by ``model.forward`` in
reverse. The edge set is the one enumerated at forward time; edges entering
or leaving the cutoff sphere carry zero envelope weight and zero envelope
slope there, so holding the topology fixed gives the exact derivative.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .crystal import PeriodicUnit
from .errors import NonFiniteEnergy, NonFiniteGradient
from .model import Batch, ModelConfig, ModelParams, energy, forward, param_shapes, sigmoid

ALL_TARGETS = ("coords", "lattice", "params")


@dataclass
class EnergyGradients:
    grad_coords: Optional[np.ndarray] = None  # (3, n)
    grad_lattice: Optional[np.ndarray] = None  # (3, 3)
    grad_params: Optional[dict] = None


def backward(batch: Batch, params: ModelParams, cfg: ModelConfig, cache: dict,
             weights: np.ndarray, geometry: bool = True, want_params: bool = True):
    """Gradients of ``sum_g weights[g] * H_g``.

    Returns ``(grad_coords, grad_lattice, grad_params)``: per-graph lists of
    ``(3, n_g)`` and ``(3, 3)`` arrays (or ``None``) and a name -> array map
    (or ``None``).
    """
    weights = np.asarray(weights, dtype=np.float64)
    dv_dim = cfg.node_dim
    grads = {} if want_params else None

    # readout MLP
    upstream = weights[:, None]
    last = cfg.mlp_layers - 1
    for m in range(last, -1, -1):
        h_in, z = cache["mlp"][m]
        dz = upstream if m == last else upstream * sigmoid(z)
        W = params[f"mlp{m}.W"]
        if want_params:
            grads[f"mlp{m}.W"] = dz.T @ h_in
            grads[f"mlp{m}.b"] = dz.sum(axis=0)
        upstream = dz @ W

    # mean pooling
    dv = upstream[batch.node_graph] / batch.counts[batch.node_graph, None]

    feats, env = cache["feats"], cache["env"]
    dfeats = np.zeros_like(feats) if geometry else None
    denv = np.zeros_like(env) if geometry else None
    for l in range(cfg.conv_layers - 1, -1, -1):
        c = cache["layers"][l]
        du = dv * sigmoid(c["u"])
        dweighted = du[batch.src]
        dmsg = env[:, None] * dweighted
        if geometry:
            denv += np.einsum("ec,ec->e", dweighted, c["msg"])
        gate, core = c["gate"], c["core"]
        dt = np.empty((dmsg.shape[0], 2 * dv_dim))
        np.multiply(dmsg, gate, out=dt[:, dv_dim:])
        np.multiply(dt[:, dv_dim:], core, out=dt[:, :dv_dim])
        dt[:, :dv_dim] *= 1.0 - gate
        ds = dt * c["r"]
        dleft = batch.scatter_src @ ds
        dright = batch.scatter_dst @ ds
        dr = dt * c["s"] if geometry or want_params else None
        if geometry:
            dfeats += dr @ c["C"]
        if want_params:
            dA = dleft.T @ c["v"]
            dB = dright.T @ c["v"]
            dC = dr.T @ feats
            db = ds.sum(axis=0)
            for part, rows in (("gate", slice(0, dv_dim)), ("core", slice(dv_dim, None))):
                grads[f"conv{l}.{part}.A"] = dA[rows]
                grads[f"conv{l}.{part}.B"] = dB[rows]
                grads[f"conv{l}.{part}.C"] = dC[rows]
                grads[f"conv{l}.{part}.b"] = db[rows]
        dv = du + dleft @ c["A"] + dright @ c["B"]

    if want_params:
        demb = np.zeros_like(params["embedding"])
        np.add.at(demb, batch.species - 1, dv)
        grads["embedding"] = demb

    if not geometry:
        return None, None, grads

    gcfg = cfg.graph
    d = batch.distances
    cut = cache["cut"]
    phase = cache["phase"]
    sin2 = np.sin(2.0 * phase)
    # smearing and envelope depend on distance; the envelope also on the cutoff
    dd = np.einsum(
        "et,et->e", dfeats, feats * (-(d[:, None] - gcfg.centers) / gcfg.sigma**2)
    )
    dd -= denv * sin2 * (np.pi / (2.0 * cut))
    dcut_edge = denv * sin2 * phase / cut

    dvec = (dd / d)[:, None] * batch.vectors
    node_grad = batch.scatter_dst @ dvec - batch.scatter_src @ dvec  # (N, 3)

    G = batch.num_graphs
    num_edges = d.size
    edge_to_graph = sp.csr_matrix(
        (np.ones(num_edges), (batch.edge_graph, np.arange(num_edges))), shape=(G, num_edges)
    )
    outer = (dvec[:, :, None] * batch.images[:, None, :]).reshape(num_edges, 9)
    lat_grad = np.asarray(edge_to_graph @ outer).reshape(G, 3, 3)
    dcut = np.asarray(edge_to_graph @ dcut_edge).ravel()

    grad_coords, grad_lattice = [], []
    log_ratio = np.log(batch.counts / np.abs(batch.dets) / cfg.rho_ref)
    if cfg.penalty_form == "squared":
        dpen_dlog = 2.0 * cfg.penalty_weight * log_ratio
    else:
        dpen_dlog = cfg.penalty_weight * np.sign(log_ratio)
    for g, u in enumerate(batch.members):
        p = batch.units[u]
        start = batch.node_offsets[g]
        grad_coords.append(node_grad[start:start + batch.counts[g]].T.copy())
        inv_t = np.linalg.inv(p.lattice).T
        # d|det L|/dL = |det L| L^-T ; D ~ |det L|^(1/3), log rho ~ -log |det L|
        total = (
            lat_grad[g]
            + dcut[g] * batch.cutoffs[g] / 3.0 * inv_t
            - weights[g] * dpen_dlog[g] * inv_t
        )
        grad_lattice.append(total)
    return grad_coords, grad_lattice, grads


def batch_energy_with_grads(units: Sequence[PeriodicUnit], params: ModelParams,
                            cfg: ModelConfig, weights=None,
                            wanted: Iterable[str] = ALL_TARGETS, strict: bool = True):
    """Energies and gradients for many units in one pass.

    Args:
        weights: per-unit multipliers for the parameter gradient, which is
            ``sum_u weights[u] * grad_theta H_u``. Geometry gradients are always
            per-unit and unweighted. Defaults to all ones.
        strict: if false, degenerate units are skipped instead of raising.

    Returns:
        ``(batch, energies, grad_coords, grad_lattice, grad_params)``; the
        per-unit outputs are aligned with ``batch.members``.
    """
    wanted = set(wanted)
    batch = Batch(units, cfg, strict=strict)
    if weights is None:
        weights = np.ones(len(batch.units))
    weights = np.asarray(weights, dtype=np.float64)[batch.members]
    geometry = bool(wanted & {"coords", "lattice"})
    want_params = "params" in wanted
    if batch.num_graphs == 0:  # every unit was skipped
        gp = {k: np.zeros_like(v) for k, v in params.items()} if want_params else None
        return batch, np.empty(0), [], [], gp
    energies, cache = forward(batch, params, cfg, keep=True)
    upstream = weights if want_params else np.ones_like(energies)
    unit_weights = bool(np.all(upstream == 1.0))
    gc, gl, gp = backward(batch, params, cfg, cache, upstream,
                          geometry=geometry and unit_weights, want_params=want_params)
    if geometry and not unit_weights:
        # geometry gradients are reported unweighted
        gc, gl, _ = backward(batch, params, cfg, cache, np.ones_like(energies),
                             geometry=True, want_params=False)
    return batch, energies, gc, gl, gp


def energy_with_grads(p: PeriodicUnit, params: ModelParams, cfg: ModelConfig,
                      wanted: Iterable[str] = ALL_TARGETS):
    """Energy of one unit plus the requested gradients.

    ``wanted`` is any subset of ``{"coords", "lattice", "params"}``.
    """
    wanted = set(wanted)
    unknown = wanted - set(ALL_TARGETS)
    if unknown:
        raise ValueError(f"unknown gradient targets {sorted(unknown)}")
    _, energies, gc, gl, gp = batch_energy_with_grads([p], params, cfg, wanted=wanted)
    e = float(energies[0])
    if not np.isfinite(e):
        raise NonFiniteEnergy(f"energy is {e}")
    out = EnergyGradients(
        grad_coords=gc[0] if "coords" in wanted else None,
        grad_lattice=gl[0] if "lattice" in wanted else None,
        grad_params=gp if "params" in wanted else None,
    )
    for arr in _arrays(out):
        if not np.all(np.isfinite(arr)):
            raise NonFiniteGradient("non-finite gradient entry")
    return e, out


def _arrays(g: EnergyGradients):
    if g.grad_coords is not None:
        yield g.grad_coords
    if g.grad_lattice is not None:
        yield g.grad_lattice
    if g.grad_params is not None:
        yield from g.grad_params.values()


def finite_diff_check(target: str, p: PeriodicUnit, params: ModelParams, cfg: ModelConfig,
                      h: float = 1e-4, max_scalars: int = 10_000, seed=0,
                      func: Optional[Callable] = None, grad_func: Optional[Callable] = None,
                      floor: float = 1e-8, rel_floor: float = 0.0, order: int = 2) -> float:
    """Worst relative error of the analytic gradient against central differences.

    ``func(p, params)`` and ``grad_func(p, params) -> EnergyGradients`` default
    to the model energy and ``energy_with_grads``; they can be swapped to test
    the checker itself. Above ``max_scalars`` entries a random subsample is
    checked. Relative errors use ``max(|fd|, floor, rel_floor * max|g|)`` as
    denominator, where ``g`` is the analytic gradient of the target; a
    positive ``rel_floor`` keeps entries below the difference quotient's
    rounding noise from dominating. ``order`` selects the 2-point (2) or
    4-point (4) central stencil; both use step ``h``.
    """
    if target not in ALL_TARGETS:
        raise ValueError(f"target must be one of {ALL_TARGETS}")
    if h <= 0:
        raise ValueError("h must be positive")
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    if func is None and target == "params":
        # topology does not depend on theta, so the graph is built once
        fixed = Batch([p], cfg)
        func = lambda unit, theta: float(forward(fixed, theta, cfg)[0])  # noqa: E731
    elif func is None:
        func = lambda unit, theta: energy(unit, theta, cfg)  # noqa: E731
    if grad_func is None:
        grad_func = lambda unit, theta: energy_with_grads(unit, theta, cfg, {target})[1]  # noqa: E731
    grads = grad_func(p, params)

    if target == "params":
        slots = [(name, idx) for name, shape in param_shapes(cfg).items()
                 for idx in np.ndindex(*shape)]
    else:
        shape = p.coords.shape if target == "coords" else (3, 3)
        slots = [(None, idx) for idx in np.ndindex(*shape)]
    if len(slots) > max_scalars:
        rng = np.random.default_rng(seed)
        pick = rng.choice(len(slots), size=max_scalars, replace=False)
        slots = [slots[i] for i in sorted(pick)]

    if target == "params":
        g_max = max(float(np.max(np.abs(a))) for a in grads.grad_params.values())
    else:
        g_max = float(np.max(np.abs(grads.grad_coords if target == "coords" else grads.grad_lattice)))
    floor = max(floor, rel_floor * g_max)

    def shifted(name, idx, t):
        if target == "params":
            theta = dict(params)
            theta[name] = params[name].copy()
            theta[name][idx] += t
            return func(p, theta)
        key = "coords" if target == "coords" else "lattice"
        arr = getattr(p, key).copy()
        arr[idx] += t
        return func(p.replace(**{key: arr}), params)

    worst = 0.0
    for name, idx in slots:
        if target == "params":
            analytic = grads.grad_params[name][idx]
        else:
            analytic = (grads.grad_coords if target == "coords" else grads.grad_lattice)[idx]
        near = shifted(name, idx, h) - shifted(name, idx, -h)
        if order == 2:
            fd = near / (2 * h)
        else:
            far = shifted(name, idx, 2 * h) - shifted(name, idx, -2 * h)
            fd = (8 * near - far) / (12 * h)
        worst = max(worst, abs(analytic - fd) / max(abs(fd), floor))
    return worst
