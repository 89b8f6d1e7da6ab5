"""Contrastive training of the energy network.

Each datum contributes the gradient of its energy (positive phase) minus the
gradient at one sampler output (negative phase). The negative chain is
conditioned on the datum's composition multiplied by a geometric integer, so
the model also sees cells with more atoms than the data.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .crystal import PeriodicUnit, expand_composition, reduce_composition
from .errors import ConfigError, CrystalEBMError, NonFiniteGradient, TrainingDiverged
from .gradients import backward
from .io import Checkpoint, save_checkpoint
from .model import Batch, ModelConfig, ModelParams, energies, forward, init_params
from .sampler import AnnealSchedule, sample_many

log = logging.getLogger(__name__)

DIAGNOSTIC_FIELDS = ("step", "e_data", "e_sample", "accept_rate", "grad_norm")


@dataclass(frozen=True)
class TrainConfig:
    """Optimisation settings.

    ``j_cap=None`` picks, per datum, the largest multiplier keeping the
    expanded cell at or below ``max_atoms`` atoms.
    """

    q: float = 0.5
    beta_train: float = 1.0
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 1
    batch_size: int = 8
    j_cap: Optional[int] = None
    max_atoms: int = 80
    seed: int = 0
    train_chain_steps: int = 100
    energy_reg: float = 0.0
    grad_clip: Optional[float] = None

    def __post_init__(self):
        if not 0 < self.q <= 1:
            raise ConfigError(f"q must be in (0, 1], got {self.q}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not self.beta_train > 0:
            raise ConfigError(f"beta_train must be > 0, got {self.beta_train}")
        if self.j_cap is not None and (int(self.j_cap) != self.j_cap or self.j_cap < 1):
            raise ConfigError(f"j_cap must be a positive integer, got {self.j_cap}")
        for name in ("batch_size", "train_chain_steps", "max_atoms"):
            if int(getattr(self, name)) != getattr(self, name) or getattr(self, name) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if not self.energy_reg >= 0:
            raise ConfigError(f"energy_reg must be >= 0, got {self.energy_reg}")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ConfigError(f"grad_clip must be > 0, got {self.grad_clip}")
        if int(self.epochs) != self.epochs or self.epochs < 0:
            raise ConfigError(f"epochs must be a non-negative integer, got {self.epochs}")

    def cap_for(self, reduced_atoms: int) -> int:
        if self.j_cap is not None:
            return int(self.j_cap)
        return max(1, self.max_atoms // reduced_atoms)

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        unknown = set(values) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**values)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "AdamState":
        return cls({k: np.zeros_like(a) for k, a in params.items()},
                   {k: np.zeros_like(a) for k, a in params.items()})

    def to_dict(self) -> dict:
        return {"step": self.step, "m": self.m, "v": self.v}

    @classmethod
    def from_dict(cls, d: dict) -> "AdamState":
        return cls(dict(d["m"]), dict(d["v"]), int(d["step"]))


def draw_multiplier(q: float, j_cap: Optional[int], rng) -> int:
    """Geometric ``P(j) ~ (1 - q)^(j - 1) q``, truncated to ``j <= j_cap`` and
    renormalised. One uniform is drawn per call."""
    u = rng.random()
    if q >= 1.0:
        return 1
    log_fail = math.log1p(-q)
    mass = 1.0 if j_cap is None else -math.expm1(j_cap * log_fail)
    # inverse CDF: P(j <= k) = (1 - (1 - q)^k) / mass
    j = 1 + int(math.floor(math.log1p(-u * mass) / log_fail))
    if j_cap is not None:
        j = min(j, int(j_cap))
    return max(j, 1)


def sample_expansion(species, q: float, j_cap: Optional[int], rng):
    """Species vector of the reduced composition times a geometric ``j``.

    Returns:
        ``(expanded species, j)``.
    """
    j = draw_multiplier(q, j_cap, rng)
    return expand_composition(reduce_composition(species), j), j


@dataclass
class BatchDiagnostics:
    e_data: float
    e_sample: float
    accept_rate: float
    grad_norm: float
    dropped: int = 0
    multipliers: list = field(default_factory=list)


def _grad_norm(grads: dict) -> float:
    return float(math.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def negative_samples(units: Sequence[PeriodicUnit], params, model_cfg: ModelConfig,
                     train_cfg: TrainConfig, rng, sched: Optional[AnnealSchedule] = None):
    """One annealed chain per datum on an expanded composition.

    Returns:
        ``(samples, accept_rates, multipliers)``; failed chains give ``None``.
    """
    if sched is None:
        sched = AnnealSchedule(steps=train_cfg.train_chain_steps)
    species, js = [], []
    for p in units:
        cap = train_cfg.cap_for(reduce_composition(p.species).num_atoms)
        sp, j = sample_expansion(p.species, train_cfg.q, cap, rng)
        species.append(sp)
        js.append(j)
    seed = int(rng.integers(2**63))
    result = sample_many(species, params, model_cfg, sched, seed=seed)
    return result.units, result.accept_rate, js


def batch_gradient(units: Sequence[PeriodicUnit], params: ModelParams, model_cfg: ModelConfig,
                   train_cfg: TrainConfig, rng=None, samples=None, sched=None):
    """Stochastic gradient of the contrastive loss over a batch.

    ``beta * mean_i (grad H(datum_i) - grad H(sample_i))``, evaluated in a
    single weighted backward pass. A positive ``energy_reg`` adds
    ``energy_reg * mean_i (H(datum_i)^2 + H(sample_i)^2)`` to the loss, and
    ``grad_clip`` rescales the gradient to at most that norm.

    Args:
        samples: fixed negative samples aligned with ``units``; when omitted
            they are drawn with ``negative_samples`` using ``rng``.

    Returns:
        ``(grads, BatchDiagnostics)``.
    """
    accept = np.full(len(units), np.nan)
    js = []
    if samples is None:
        samples, accept, js = negative_samples(units, params, model_cfg, train_cfg, rng, sched)
    keep = [k for k, s in enumerate(samples) if s is not None]
    dropped = len(units) - len(keep)
    if dropped:
        log.warning("%d of %d negative chains failed; dropped from the batch", dropped, len(units))
    if not keep:
        raise NonFiniteGradient("every negative chain in the batch failed")
    m = len(keep)
    pool = [units[k] for k in keep] + [samples[k] for k in keep]
    scale = train_cfg.beta_train / m
    weights = np.concatenate([np.full(m, scale), np.full(m, -scale)])
    batch = Batch(pool, model_cfg)
    e, cache = forward(batch, params, model_cfg, keep=True)
    if not np.all(np.isfinite(e)):
        raise NonFiniteGradient("non-finite energy in the batch")
    if train_cfg.energy_reg > 0:
        weights = weights + 2.0 * train_cfg.energy_reg * e / m
    _, _, grads = backward(batch, params, model_cfg, cache, weights, geometry=False)
    norm = _grad_norm(grads)
    if train_cfg.grad_clip is not None and norm > train_cfg.grad_clip:
        grads = {k: g * (train_cfg.grad_clip / norm) for k, g in grads.items()}
    diag = BatchDiagnostics(
        e_data=float(np.mean(e[:m])),
        e_sample=float(np.mean(e[m:])),
        accept_rate=float(np.nanmean(accept)) if np.any(np.isfinite(accept)) else float("nan"),
        grad_norm=norm,
        dropped=dropped,
        multipliers=js,
    )
    return grads, diag


def adam_step(params: ModelParams, grads: dict, state: AdamState, cfg: TrainConfig):
    """Bias-corrected Adam update; returns new ``(params, state)``.

    A non-finite gradient leaves both unchanged.
    """
    if set(grads) != set(params):
        raise ValueError("gradient and parameter names differ")
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != {params[name].shape}")
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        log.warning("non-finite gradient at step %d; update skipped", state.step)
        return params, state
    t = state.step + 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    new_params, m, v = {}, {}, {}
    for name, g in grads.items():
        m[name] = b1 * state.m[name] + (1 - b1) * g
        v[name] = b2 * state.v[name] + (1 - b2) * g * g
        m_hat = m[name] / (1 - b1**t)
        v_hat = v[name] / (1 - b2**t)
        new_params[name] = params[name] - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
    return new_params, AdamState(m, v, t)


class _DiagnosticsWriter:
    def __init__(self, target):
        self.fh = None
        self.callback = None
        if callable(target):
            self.callback = target
        elif target is not None:
            Path(target).parent.mkdir(parents=True, exist_ok=True)
            self.fh = open(target, "w", newline="", encoding="utf-8")
            self.writer = csv.writer(self.fh)
            self.writer.writerow(DIAGNOSTIC_FIELDS)

    def write(self, record: dict):
        if self.callback is not None:
            self.callback(record)
        if self.fh is not None:
            self.writer.writerow([repr(record[k]) if isinstance(record[k], float) else record[k]
                                  for k in DIAGNOSTIC_FIELDS])
            self.fh.flush()

    def close(self):
        if self.fh is not None:
            self.fh.close()


def train(dataset: Sequence[PeriodicUnit], val: Sequence[PeriodicUnit], model_cfg: ModelConfig,
          train_cfg: TrainConfig, params: Optional[ModelParams] = None,
          resume: Optional[Checkpoint] = None, checkpoint_path=None, diagnostics=None,
          max_steps: Optional[int] = None, sched: Optional[AnnealSchedule] = None) -> Checkpoint:
    """Run ``train_cfg.epochs`` epochs of minibatch contrastive training.

    Args:
        params: starting parameters; defaults to ``init_params(seed)``.
        resume: checkpoint to continue from (params, optimiser, random stream
            and epoch counter).
        checkpoint_path: written after every epoch.
        diagnostics: CSV path or callable receiving one record per batch.
        max_steps: stop after this many optimiser steps in total.
        sched: annealing of the negative chains; defaults to the standard
            endpoints over ``train_chain_steps`` steps.

    Raises:
        TrainingDiverged: more than 10% of the batches were unusable.
    """
    if not dataset:
        raise ValueError("training set is empty")
    if resume is not None:
        params = dict(resume.params)
        adam = AdamState.from_dict(resume.adam) if resume.adam else AdamState.zeros_like(params)
        rng = np.random.default_rng()
        rng.bit_generator.state = resume.rng_state
        epoch0, step = resume.epoch, resume.step
    else:
        if params is None:
            params = init_params(model_cfg, train_cfg.seed)
        adam = AdamState.zeros_like(params)
        rng = np.random.default_rng(train_cfg.seed)
        epoch0, step = 0, 0
    history = []
    failures = 0
    attempted = 0
    writer = _DiagnosticsWriter(diagnostics)

    validation = list(resume.notes.get("validation_energy", [])) if resume else []

    def snapshot(epoch):
        return Checkpoint(
            model_config=model_cfg,
            params=params,
            train_config=train_cfg.to_dict(),
            adam=adam.to_dict(),
            rng_state=rng.bit_generator.state,
            epoch=epoch,
            step=step,
            notes={"validation_energy": list(validation)},
        )

    ckpt = snapshot(epoch0)
    saved = False
    try:
        for epoch in range(epoch0, train_cfg.epochs):
            order = rng.permutation(len(dataset))
            for start in range(0, len(order), train_cfg.batch_size):
                if max_steps is not None and step >= max_steps:
                    break
                units = [dataset[k] for k in order[start:start + train_cfg.batch_size]]
                attempted += 1
                try:
                    grads, diag = batch_gradient(units, params, model_cfg, train_cfg, rng,
                                                 sched=sched)
                except CrystalEBMError as exc:
                    failures += 1
                    log.warning("batch at step %d skipped: %s", step, exc)
                    if failures > 0.1 * max(attempted, 10):
                        raise TrainingDiverged(
                            f"{failures} of {attempted} batches were unusable"
                        ) from exc
                    continue
                params, adam = adam_step(params, grads, adam, train_cfg)
                step += 1
                record = dict(step=step, e_data=diag.e_data, e_sample=diag.e_sample,
                              accept_rate=diag.accept_rate, grad_norm=diag.grad_norm)
                history.append(record)
                writer.write(record)
            val_energy = float(np.mean(energies(val, params, model_cfg))) if val else None
            log.info("epoch %d done at step %d, validation energy %s", epoch + 1, step, val_energy)
            validation.append(val_energy)
            ckpt = snapshot(epoch + 1)
            if checkpoint_path is not None:
                save_checkpoint(ckpt, checkpoint_path)
                saved = True
            if max_steps is not None and step >= max_steps:
                break
    finally:
        writer.close()
    if checkpoint_path is not None and not saved:
        save_checkpoint(ckpt, checkpoint_path)  # nothing left to train
    ckpt.history = history
    return ckpt
