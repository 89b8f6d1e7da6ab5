"""Datasets, checkpoints and configuration files.

Datasets are JSON lines, one crystal per line::

    {"id": "NaCl", "species": ["Na", "Cl"],
     "lattice": [[a1, a2, a3], [b1, b2, b3], [c1, c2, c3]],
     "coords": [[x, y, z], ...], "coords_are_fractional": false}

``lattice`` rows are the basis vectors; internally they become columns.
Floats are written with ``repr`` so every value round-trips exactly.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .crystal import PeriodicUnit, validate
from .elements import atomic_number, symbol
from .errors import (
    ConfigError,
    CorruptFile,
    ParseError,
    ShapeMismatch,
    UnknownElement,
    ValidationError,
    VersionMismatch,
)
from .model import ModelConfig, ModelParams, param_shapes

FORMAT_VERSION = 1


def atomic_write(path, text: str):
    """Write ``text`` to ``path`` through a temporary file and a rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -- datasets --------------------------------------------------------------

@dataclass(frozen=True)
class DatasetRecord:
    id: str
    unit: PeriodicUnit


def _matrix(value, rows, line, name):
    try:
        arr = np.array(value, dtype=np.float64)
    except (TypeError, ValueError):
        raise ValidationError(line, f"{name} must be numeric") from None
    if arr.ndim != 2 or arr.shape[1] != 3 or (rows is not None and arr.shape[0] != rows):
        want = f"{rows} x 3" if rows is not None else "n x 3"
        raise ValidationError(line, f"{name} must be {want}, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(line, f"{name} contains non-finite values")
    return arr


def parse_record(obj, line: int = 1) -> DatasetRecord:
    """Convert one decoded JSON object into a validated record."""
    if not isinstance(obj, dict):
        raise ValidationError(line, "record must be a JSON object")
    for key in ("species", "lattice", "coords"):
        if key not in obj:
            raise ValidationError(line, f"missing field {key!r}")
    names = obj["species"]
    if not isinstance(names, list) or not names:
        raise ValidationError(line, "species must be a non-empty list of element symbols")
    species = []
    for name in names:
        if not isinstance(name, str):
            raise ValidationError(line, f"species entries must be strings, got {name!r}")
        try:
            species.append(atomic_number(name))
        except UnknownElement:
            raise UnknownElement(name, line) from None
    lattice = _matrix(obj["lattice"], 3, line, "lattice").T
    coords = _matrix(obj["coords"], None, line, "coords")
    if coords.shape[0] != len(species):
        raise ValidationError(
            line, f"{len(species)} species but {coords.shape[0]} coordinate rows"
        )
    fractional = obj.get("coords_are_fractional", False)
    if not isinstance(fractional, bool):
        raise ValidationError(line, "coords_are_fractional must be true or false")
    coords = lattice @ coords.T if fractional else coords.T
    unit = PeriodicUnit(np.array(species), coords, lattice)
    problems = validate(unit)
    if problems:
        raise ValidationError(line, "; ".join(v.message for v in problems))
    ident = obj.get("id", f"line{line}")
    return DatasetRecord(str(ident), unit)


def read_records(path) -> list[DatasetRecord]:
    """Parse a dataset file; blank lines are skipped.

    Raises:
        ParseError: a line is not valid JSON.
        ValidationError: a record is malformed or describes an invalid unit.
        UnknownElement: a species symbol is not an element.
    """
    records = []
    with open(path, encoding="utf-8") as fh:
        for line, text in enumerate(fh, start=1):
            if not text.strip():
                continue
            try:
                obj = json.loads(text)
            except json.JSONDecodeError as exc:
                raise ParseError(line, exc.msg) from None
            records.append(parse_record(obj, line))
    return records


def load_dataset(path) -> list[PeriodicUnit]:
    return [r.unit for r in read_records(path)]


def record_dict(unit: PeriodicUnit, ident: str) -> dict:
    return {
        "id": ident,
        "species": [symbol(int(z)) for z in unit.species],
        "lattice": unit.lattice.T.tolist(),
        "coords": unit.coords.T.tolist(),
        "coords_are_fractional": False,
    }


def save_dataset(units: Sequence[PeriodicUnit], path, ids: Optional[Sequence[str]] = None):
    """Write units as JSON lines with Cartesian coordinates."""
    if ids is None:
        ids = [f"unit{k}" for k in range(len(units))]
    text = "".join(json.dumps(record_dict(u, i)) + "\n" for u, i in zip(units, ids))
    atomic_write(path, text)


# -- checkpoints -----------------------------------------------------------

@dataclass
class Checkpoint:
    """Everything needed to evaluate or resume a model.

    ``rng_state`` is the bit-generator state of the training stream, and
    ``epoch``/``step`` count completed epochs and optimiser steps.
    """

    model_config: ModelConfig
    params: ModelParams
    train_config: dict = field(default_factory=dict)
    adam: Optional[dict] = None  # {"step": int, "m": params-like, "v": params-like}
    rng_state: Optional[dict] = None
    epoch: int = 0
    step: int = 0
    notes: dict = field(default_factory=dict)  # free-form JSON values
    format_version: int = FORMAT_VERSION
    history: list = field(default_factory=list, repr=False)  # not persisted


def _encode_tensors(tensors: dict) -> dict:
    return {
        name: {"shape": list(arr.shape), "values": np.asarray(arr, dtype=np.float64).ravel().tolist()}
        for name, arr in tensors.items()
    }


def _decode_tensors(obj: dict, shapes: dict, what: str) -> dict:
    if not isinstance(obj, dict):
        raise CorruptFile(f"{what} must be an object")
    missing = set(shapes) - set(obj)
    extra = set(obj) - set(shapes)
    if missing or extra:
        raise ShapeMismatch(f"{what}: missing {sorted(missing)}, unexpected {sorted(extra)}")
    out = {}
    for name, shape in shapes.items():
        entry = obj[name]
        try:
            stored = tuple(int(s) for s in entry["shape"])
            values = np.array(entry["values"], dtype=np.float64)
        except (KeyError, TypeError, ValueError):
            raise CorruptFile(f"{what}.{name} is malformed") from None
        if stored != tuple(shape) or values.size != int(np.prod(shape)):
            raise ShapeMismatch(f"{what}.{name}: expected {tuple(shape)}, got {stored}")
        out[name] = values.reshape(shape)
    return out


def save_checkpoint(ckpt: Checkpoint, path):
    doc = {
        "format_version": ckpt.format_version,
        "model_config": ckpt.model_config.to_dict(),
        "train_config": ckpt.train_config,
        "params": _encode_tensors(ckpt.params),
        "adam": None if ckpt.adam is None else {
            "step": int(ckpt.adam["step"]),
            "m": _encode_tensors(ckpt.adam["m"]),
            "v": _encode_tensors(ckpt.adam["v"]),
        },
        "rng_state": ckpt.rng_state,
        "epoch": ckpt.epoch,
        "step": ckpt.step,
        "notes": ckpt.notes,
    }
    atomic_write(path, json.dumps(doc))


def load_checkpoint(path) -> Checkpoint:
    """Read a checkpoint written by ``save_checkpoint``.

    Raises:
        CorruptFile: the file is not a complete checkpoint document.
        VersionMismatch: ``format_version`` is not supported.
        ShapeMismatch: a tensor does not match the stored model config.
    """
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CorruptFile(f"{path}: {exc}") from None
    if not isinstance(doc, dict) or "format_version" not in doc:
        raise CorruptFile(f"{path}: not a checkpoint")
    if doc["format_version"] != FORMAT_VERSION:
        raise VersionMismatch(
            f"{path}: format version {doc['format_version']}, expected {FORMAT_VERSION}"
        )
    try:
        cfg = ModelConfig.from_dict(doc["model_config"])
        shapes = param_shapes(cfg)
        params = _decode_tensors(doc["params"], shapes, "params")
        adam = doc.get("adam")
        if adam is not None:
            adam = {
                "step": int(adam["step"]),
                "m": _decode_tensors(adam["m"], shapes, "adam.m"),
                "v": _decode_tensors(adam["v"], shapes, "adam.v"),
            }
        return Checkpoint(
            model_config=cfg,
            params=params,
            train_config=dict(doc.get("train_config") or {}),
            adam=adam,
            rng_state=doc.get("rng_state"),
            epoch=int(doc.get("epoch", 0)),
            step=int(doc.get("step", 0)),
            notes=dict(doc.get("notes") or {}),
        )
    except (KeyError, TypeError, AttributeError) as exc:
        raise CorruptFile(f"{path}: missing or malformed field ({exc})") from None


# -- configuration ---------------------------------------------------------

def split_config(values: dict, targets: Iterable[type]) -> list[dict]:
    """Distribute a flat mapping over several dataclasses by field name.

    Raises:
        ConfigError: a key matches no field.
    """
    targets = list(targets)
    parts = [{} for _ in targets]
    for key, value in values.items():
        for k, cls in enumerate(targets):
            if key in {f.name for f in fields(cls)}:
                parts[k][key] = value
                break
        else:
            raise ConfigError(f"unknown config key {key!r}")
    return parts


def read_config(path) -> dict:
    """Flat JSON object of configuration values."""
    try:
        with open(path, encoding="utf-8") as fh:
            values = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if not isinstance(values, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    nested = [k for k, v in values.items() if isinstance(v, (dict, list))]
    if nested:
        raise ConfigError(f"{path}: config must be flat, nested values for {nested}")
    return values
