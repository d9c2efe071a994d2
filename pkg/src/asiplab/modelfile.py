"""Plain-text model specification files.

Line-oriented key/value schema, one token stream per line, ``#`` comments.
Every file starts with ``version 1``.  Keys by kind:

    kind doubling | markov | iid
    d <dimension>
    seed <default seed>            # optional
    fourier <k> <re> <im> ...      # doubling: d (re, im) pairs per index k
    states <S>                     # markov
    prow <p1> ... <pS>             # markov: S rows of the transition matrix
    mu <m1> ... <mS>               # markov: optional initial measure
    fval <v1> ... <vd>             # markov: S observable rows
    sigma2 <row>                   # iid: d covariance rows

Rationals like ``1/2`` are accepted wherever a number is expected.
"""

from __future__ import annotations

from fractions import Fraction
from pathlib import Path

import numpy as np

from .models import (
    DoublingMap,
    FiniteMarkovChain,
    FourierObservable,
    IidGaussian,
    TableObservable,
)

__all__ = ["load_model", "save_model", "ModelFileError"]

FORMAT_VERSION = 1


class ModelFileError(ValueError):
    pass


def _num(tok: str) -> float:
    try:
        return float(Fraction(tok))
    except (ValueError, ZeroDivisionError) as exc:
        raise ModelFileError(f"bad number {tok!r}") from exc


def load_model(path) -> tuple[object, int | None]:
    """Read a model file; returns (model, default_seed_or_None)."""
    path = Path(path)
    if not path.exists():
        raise ModelFileError(f"model file not found: {path}")
    fields: dict[str, list[list[str]]] = {}
    order = []
    for raw in path.read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, *rest = line.split()
        fields.setdefault(key, []).append(rest)
        order.append(key)
    if "version" not in fields:
        raise ModelFileError("missing 'version' line")
    if int(fields["version"][0][0]) != FORMAT_VERSION:
        raise ModelFileError(f"unsupported version {fields['version'][0][0]}")
    if "kind" not in fields:
        raise ModelFileError("missing 'kind' line")
    kind = fields["kind"][0][0]
    d = int(fields["d"][0][0]) if "d" in fields else 1
    seed = int(fields["seed"][0][0]) if "seed" in fields else None

    if kind == "doubling":
        if "fourier" not in fields:
            raise ModelFileError("doubling model needs fourier lines")
        coeffs = {}
        for toks in fields["fourier"]:
            k = int(toks[0])
            vals = [_num(t) for t in toks[1:]]
            if len(vals) != 2 * d:
                raise ModelFileError(f"fourier line for k={k} needs {2 * d} numbers")
            coeffs[k] = np.array([complex(vals[2 * i], vals[2 * i + 1]) for i in range(d)])
        return DoublingMap(FourierObservable(coeffs)), seed

    if kind == "markov":
        if "states" not in fields or "prow" not in fields or "fval" not in fields:
            raise ModelFileError("markov model needs states, prow and fval lines")
        S = int(fields["states"][0][0])
        P = np.array([[_num(t) for t in row] for row in fields["prow"]])
        if P.shape != (S, S):
            raise ModelFileError(f"expected {S} prow lines of {S} entries, got shape {P.shape}")
        fvals = np.array([[_num(t) for t in row] for row in fields["fval"]])
        if fvals.shape != (S, d):
            raise ModelFileError(f"expected {S} fval lines of {d} entries")
        mu = None
        if "mu" in fields:
            mu = np.array([_num(t) for t in fields["mu"][0]])
        return FiniteMarkovChain(P, TableObservable(fvals), mu=mu), seed

    if kind == "iid":
        if "sigma2" not in fields:
            raise ModelFileError("iid model needs sigma2 lines")
        sigma2 = np.array([[_num(t) for t in row] for row in fields["sigma2"]])
        if sigma2.shape != (d, d):
            raise ModelFileError(f"expected a {d}x{d} sigma2 block")
        return IidGaussian(sigma2), seed

    raise ModelFileError(f"unknown kind {kind!r}")


def save_model(model, path, seed: int | None = None) -> None:
    path = Path(path)
    lines = [f"version {FORMAT_VERSION}", f"kind {model.kind}", f"d {model.d}"]
    if seed is not None:
        lines.append(f"seed {seed}")
    if isinstance(model, DoublingMap):
        for k, c in model.observable.coeffs.items():
            nums = " ".join(f"{v.real!r} {v.imag!r}" for v in c)
            lines.append(f"fourier {k} {nums}")
    elif isinstance(model, FiniteMarkovChain):
        lines.append(f"states {model.n_states}")
        for row in model.P:
            lines.append("prow " + " ".join(repr(v) for v in row))
        lines.append("mu " + " ".join(repr(v) for v in model.mu))
        for row in model.observable.values:
            lines.append("fval " + " ".join(repr(v) for v in row))
    elif isinstance(model, IidGaussian):
        for row in model.sigma2:
            lines.append("sigma2 " + " ".join(repr(v) for v in row))
    else:
        raise ModelFileError(f"cannot serialize {type(model)!r}")
    path.write_text("\n".join(lines) + "\n")
