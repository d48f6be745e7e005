"""JSON documents for matrices, systems, fields, and objectives.

Complex arrays are nested lists whose leaves are ``[re, im]`` pairs.
"""

import json
from pathlib import Path

import numpy as np

from .dynamics import ControlField, ControlSystem
from .errors import InvalidInput, IoError


def matrix_to_json(A):
    A = np.asarray(A, dtype=complex)
    return np.stack([A.real, A.imag], axis=-1).tolist()


def matrix_from_json(data):
    arr = np.asarray(data, dtype=float)
    if arr.shape[-1] != 2:
        raise InvalidInput("complex entries must be [re, im] pairs")
    return arr[..., 0] + 1j * arr[..., 1]


def system_to_dict(system):
    return {
        "dim": system.dim,
        "drift": matrix_to_json(system.drift),
        "generators": [matrix_to_json(g) for g in system.generators],
    }


def system_from_dict(d):
    try:
        drift = matrix_from_json(d["drift"])
        gens = tuple(matrix_from_json(g) for g in d["generators"])
        dim = int(d.get("dim", drift.shape[0]))
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidInput(f"malformed system document: {exc}") from exc
    if drift.shape != (dim, dim):
        raise InvalidInput(f"drift shape {drift.shape} does not match dim={dim}")
    return ControlSystem(drift, gens)


def read_json(path):
    path = Path(path)
    try:
        return json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise IoError(f"no such file: {path}") from exc
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise InvalidInput(f"{path}: invalid JSON ({exc})") from exc


def write_text(path, text):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def load_system(path):
    return system_from_dict(read_json(path))


def load_field(path):
    return ControlField.from_dict(read_json(path))


def save_system(path, system):
    write_text(path, json.dumps(system_to_dict(system)))


def save_field(path, field):
    write_text(path, field.to_json())
