"""JSON formats for MEs, ensembles and measurement schemes, plus bundled fixtures.

Complex arrays are stored as ``{"re": [...], "im": [...]}`` with row-major
nesting. Member indices in files are 1-based. Floats are written with
Python's shortest round-trip representation, so reading back is lossless.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .lindblad import Lindbladian
from .scheme import MeasurementScheme
from .verify import PRE

FIXTURE_CLASSES = ("i", "ii", "iii", "iv")


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    if isinstance(o, complex):
        return {"re": o.real, "im": o.imag}
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def dumps(obj, indent: int = 2) -> str:
    return json.dumps(obj, indent=indent, default=_jsonable)


def write_json(obj, path) -> None:
    Path(path).write_text(dumps(obj) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())


def cplx(a) -> dict:
    a = np.asarray(a, dtype=complex)
    return {"re": a.real.tolist(), "im": a.imag.tolist()}


def from_cplx(d) -> np.ndarray:
    if isinstance(d, dict):
        re = np.asarray(d["re"], dtype=float)
        im = np.asarray(d.get("im", np.zeros_like(re)), dtype=float)
        return re + 1j * im
    return np.asarray(d, dtype=complex)


# ------------------------------------------------------------------ ME

def me_to_dict(me: Lindbladian) -> dict:
    return {"D": me.D, "L": me.L, "H": cplx(me.H), "lindblads": [cplx(c) for c in me.cs],
            "metadata": dict(me.metadata), "hash": me.content_hash()}


def me_from_dict(d: dict) -> Lindbladian:
    try:
        H = from_cplx(d["H"])
        cs = tuple(from_cplx(c) for c in d["lindblads"])
    except KeyError as e:
        raise ValidationError(f"ME file is missing {e}") from None
    if "D" in d and H.shape != (d["D"], d["D"]):
        raise ValidationError("declared D disagrees with H", D=d["D"], shape=list(H.shape))
    if "L" in d and len(cs) != d["L"]:
        raise ValidationError("declared L disagrees with the lindblads list", L=d["L"], got=len(cs))
    return Lindbladian(H, cs, d.get("metadata", {}))


def load_me(path) -> Lindbladian:
    return me_from_dict(read_json(path))


# ------------------------------------------------------------------ PRE

def pre_to_dict(pre: PRE) -> dict:
    return {"K": pre.K, "D": pre.D,
            "states": [cplx(s) for s in pre.states],
            "kappa": pre.kappa.tolist(),
            "occupations": None if pre.occupations is None else pre.occupations.tolist(),
            "residual": pre.residual_norm, "me_hash": pre.me_hash}


def pre_from_dict(d: dict, kappa_transposed: bool = False) -> PRE:
    """``kappa_transposed`` reads the matrix as [source][destination]."""
    states = np.array([from_cplx(s) for s in d["states"]])
    kap = np.asarray(d["kappa"], dtype=float)
    if kappa_transposed:
        kap = kap.T
    res = d.get("residual")
    return PRE(states, kap, me_hash=d.get("me_hash", ""),
               residual_norm=float("nan") if res is None else float(res))


def load_pre(path, kappa_transposed: bool = False) -> PRE:
    return pre_from_dict(read_json(path), kappa_transposed)


# ------------------------------------------------------------------ scheme

def scheme_to_dict(s: MeasurementScheme) -> dict:
    return {"K": s.K, "M": s.M, "L": s.L,
            "members": [{"S": cplx(s.S[k]), "beta": cplx(s.beta[k]),
                         "f": [int(j) + 1 for j in s.f[k]], "lambda": s.lam[k].tolist()}
                        for k in range(s.K)]}


def scheme_from_dict(d: dict) -> MeasurementScheme:
    mem = d["members"]
    return MeasurementScheme([from_cplx(m["S"]) for m in mem], [from_cplx(m["beta"]) for m in mem],
                             [[int(j) - 1 for j in m["f"]] for m in mem],
                             [m["lambda"] for m in mem])


def load_scheme(path) -> MeasurementScheme:
    return scheme_from_dict(read_json(path))


# ------------------------------------------------------------------ fixtures

def fixture_dir() -> Path:
    env = os.environ.get("PREFORGE_FIXTURES")
    base = Path(env) if env else Path(__file__).parent / "fixtures"
    return base / "appendix_d"


def fixture_me(cls: str) -> Lindbladian:
    return load_me(fixture_dir() / f"class_{cls.lower()}.json")


def fixture_pre(cls: str) -> PRE:
    return load_pre(fixture_dir() / f"class_{cls.lower()}_pre.json")


def fixture_scheme(cls: str) -> MeasurementScheme:
    return load_scheme(fixture_dir() / f"class_{cls.lower()}_scheme.json")
