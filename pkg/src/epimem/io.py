"""Model files, canonical spec dictionaries, hashing and report writers.

A model file is TOML (read with tomli) or JSON. Either it describes the
model directly with the sections [grid], [traits], [lambda], [gamma],
[kernel] and [u0], or it names one builder section, [sis], [one_shot] or
[renewal], optionally with [grid] overrides and a [u0] section. Unknown
keys are rejected everywhere.
"""
import csv
import hashlib
import json
import math
import os
from pathlib import Path

import numpy as np
import tomli

from . import __version__
from .curves import curve_from_dict
from .errors import ConfigError, IoError
from .model import AgeGrid, InitialDensity, MemoryKernel, ModelSpec, TraitSpace

TOP_KEYS = {"name", "description", "lambda_star", "grid", "traits", "lambda", "gamma", "kernel", "u0",
            "sis", "one_shot", "renewal"}
# provenance stamped on every emitted document; ignored when a document is loaded back
PROVENANCE_KEYS = {"config_hash", "seed", "version"}
SCENARIOS = ("sis", "one_shot", "renewal")
GRID_KEYS = {"step", "max_age"}
TRAIT_KEYS = {"weights", "count", "atoms"}
CURVE_SECTION_KEYS = {"curve", "curves"}
KERNEL_KEYS = {"type", "table"}
U0_KEYS = {"type", "span", "values", "overflow", "root", "epsilon"}
SIS_KEYS = {"lambda_star", "rho", "a_star", "quantiles"}
ONE_SHOT_KEYS = {"alpha", "beta", "t_i", "t_r", "t_v", "weights", "lam_level", "kappa", "kernel"}
RENEWAL_KEYS = {"sigma", "t_i", "t_v", "t_i_weights", "t_v_weights", "lam_level", "paths", "horizon", "seed"}


def _check_keys(d, allowed, where):
    if not isinstance(d, dict):
        raise ConfigError(f"[{where}] must be a table")
    extra = set(d) - set(allowed)
    if extra:
        raise ConfigError(f"unknown keys in [{where}]: {sorted(extra)}")


def read_document(path):
    """Parse a TOML or JSON file into a dict."""
    p = Path(path)
    try:
        raw = p.read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {p}: {exc}") from None
    try:
        if p.suffix.lower() == ".json":
            return json.loads(raw.decode("utf-8"))
        return tomli.loads(raw.decode("utf-8"))
    except (tomli.TOMLDecodeError, json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot parse {p}: {exc}") from None


# ---------------------------------------------------------------- loading

def _grid(d, default=None):
    if d is None:
        if default is None:
            raise ConfigError("missing [grid] section")
        return default
    _check_keys(d, GRID_KEYS, "grid")
    try:
        return AgeGrid(float(d["step"]), float(d["max_age"]))
    except KeyError as exc:
        raise ConfigError(f"[grid] is missing {exc}") from None


def _traits(d):
    if d is None:
        raise ConfigError("missing [traits] section")
    _check_keys(d, TRAIT_KEYS, "traits")
    atoms = d.get("atoms")
    if "weights" in d:
        return TraitSpace(d["weights"], atoms)
    if "count" in d:
        return TraitSpace.uniform(int(d["count"]), atoms)
    raise ConfigError("[traits] needs 'weights' or 'count'")


def _curves(d, n, role):
    if d is None:
        raise ConfigError(f"missing [{role}] section")
    _check_keys(d, CURVE_SECTION_KEYS, role)
    if ("curve" in d) == ("curves" in d):
        raise ConfigError(f"[{role}] needs exactly one of 'curve' or 'curves'")
    if "curve" in d:
        c = curve_from_dict(d["curve"], role)
        return [c] * n
    cs = [curve_from_dict(c, role) for c in d["curves"]]
    if len(cs) != n:
        raise ConfigError(f"[{role}] has {len(cs)} curves for {n} atoms")
    return cs


def _kernel(d, n):
    if d is None:
        return MemoryKernel.constant(n)
    _check_keys(d, KERNEL_KEYS, "kernel")
    kind = d.get("type", "table" if "table" in d else "constant")
    if kind == "constant":
        if "table" in d:
            raise ConfigError("a constant kernel takes no table")
        return MemoryKernel.constant(n)
    if kind != "table" or "table" not in d:
        raise ConfigError("[kernel] type must be 'constant' or 'table' with a 'table' entry")
    return MemoryKernel(d["table"])


def _u0(d, spec):
    """Initial density from a [u0] section; ``spec`` carries the rest of the model."""
    grid, traits = spec.grid, spec.traits
    if d is None:
        return None
    _check_keys(d, U0_KEYS, "u0")
    kind = d.get("type", "values" if "values" in d else "uniform")
    if kind == "uniform":
        return InitialDensity.uniform(grid, traits, float(d.get("span", 2.0)))
    if kind == "values":
        if "values" not in d:
            raise ConfigError("[u0] type 'values' needs a 'values' table")
        return InitialDensity(d["values"], d.get("overflow"))
    if kind == "stationary":
        from .equilibrium import find_equilibria
        rep = find_equilibria(spec)
        if not rep.roots:
            raise ConfigError("[u0] type 'stationary' needs an endemic equilibrium")
        us = rep.u_star[int(d.get("root", -1))]
        return perturbed(us, float(d.get("epsilon", 0.0)), traits)
    raise ConfigError(f"unknown [u0] type {kind!r}")


def perturbed(u_star, epsilon, traits):
    """u*(1 + epsilon cos(a)) renormalised to unit mass."""
    grid = u_star.grid
    cells = u_star.cells * (1.0 + epsilon * np.cos(grid.mids)[:, None])
    over = u_star.overflow.copy()
    mass = float(cells.sum(axis=0) @ traits.weights * grid.step + over @ traits.weights)
    return InitialDensity(cells / mass, over / mass)


def _scenario(doc):
    """(spec, extras) for a builder section."""
    from . import scenarios as sc
    present = [k for k in SCENARIOS if k in doc]
    if len(present) != 1:
        raise ConfigError("give exactly one scenario section")
    kind = present[0]
    if set(doc) & {"traits", "lambda", "gamma", "kernel", "lambda_star"}:
        raise ConfigError(f"[{kind}] cannot be combined with explicit model sections")
    d = doc[kind]
    g = doc.get("grid")
    if g is not None:
        _check_keys(g, GRID_KEYS, "grid")
    step = float(g["step"]) if g and "step" in g else sc.DEFAULT_STEP
    max_age = float(g["max_age"]) if g and "max_age" in g else None
    extras = {"scenario": kind}
    if kind == "sis":
        _check_keys(d, SIS_KEYS, "sis")
        spec = sc.build_sis(float(d["lambda_star"]), float(d["rho"]), float(d["a_star"]),
                            int(d.get("quantiles", 256)), step, max_age)
    elif kind == "one_shot":
        _check_keys(d, ONE_SHOT_KEYS, "one_shot")
        params = sc.OneShotParams(d["alpha"], d["beta"], d["t_i"], d["t_r"], d["t_v"], d.get("weights"),
                                  d.get("lam_level"), d.get("kappa"))
        spec, closed = sc.build_one_shot(params, d.get("kernel"), step, max_age)
        extras["closed_form"] = closed
        extras["regime"] = sc.one_shot_regime(params, kernel=d.get("kernel"))
    else:
        _check_keys(d, RENEWAL_KEYS, "renewal")
        params = sc.RenewalParams(
            curve_from_dict(d["sigma"], "gamma"), d["t_i"], d["t_v"], d.get("t_i_weights"),
            d.get("t_v_weights"), float(d.get("lam_level", 1.0)), int(d.get("paths", 1000)),
            float(d.get("horizon", max_age or 50.0)), int(d.get("seed", 0)), step)
        build = sc.build_renewal(params)
        spec = build.spec
        extras["renewal"] = build
    return spec, extras


def spec_from_document(doc):
    """(ModelSpec, extras) from a parsed model document."""
    _check_keys(doc, TOP_KEYS | PROVENANCE_KEYS, "top level")
    try:
        if any(k in doc for k in SCENARIOS):
            spec, extras = _scenario(doc)
        else:
            extras = {}
            grid = _grid(doc.get("grid"))
            traits = _traits(doc.get("traits"))
            n = len(traits)
            lam = _curves(doc.get("lambda"), n, "lambda")
            gam = _curves(doc.get("gamma"), n, "gamma")
            kernel = _kernel(doc.get("kernel"), n)
            lstar = doc.get("lambda_star")
            if lstar is None:
                lstar = max(float(np.max(c.knots()[1])) for c in lam)
            placeholder = InitialDensity.uniform(grid, traits, min(2.0, grid.max_age))
            spec = ModelSpec(traits, lam, gam, kernel, float(lstar), placeholder, grid)
        u0 = _u0(doc.get("u0"), spec)
        if u0 is not None:
            spec = spec.with_u0(u0)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid model document: {exc!r}") from None
    if "name" in doc:
        spec.name = str(doc["name"])
    return spec, extras


def load_model(path):
    """(ModelSpec, extras) from a TOML or JSON model file."""
    return spec_from_document(read_document(path))


# ---------------------------------------------------- canonical dictionary

def spec_to_dict(spec):
    """Explicit model document that reloads to an equal spec."""
    grid = spec.grid
    k = spec.kernel
    d = {
        "name": spec.name,
        "lambda_star": spec.lambda_star,
        "grid": {"step": grid.step, "max_age": grid.max_age},
        "traits": {"weights": spec.weights.tolist(), "atoms": list(spec.traits.atoms)},
        "lambda": {"curves": [c.to_dict() for c in spec.lam]},
        "gamma": {"curves": [c.to_dict() for c in spec.gamma]},
        "kernel": {"type": "constant"} if k.is_memoryless and k._table is None else {
            "type": "table", "table": k.table.tolist()},
        "u0": {"type": "values", "values": spec.u0.values.tolist(), "overflow": spec.u0.overflow.tolist()},
    }
    return d


def canonical_json(obj):
    return json.dumps(_plain(obj), sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=True)


def spec_hash(spec):
    """sha256 of the canonical JSON of the model document."""
    return hashlib.sha256(canonical_json(spec_to_dict(spec)).encode("utf-8")).hexdigest()


def _plain(obj):
    """Convert numpy scalars/arrays and complex numbers to JSON-friendly values."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, complex):
        return {"re": obj.real, "im": obj.imag}
    if isinstance(obj, float) and not math.isfinite(obj):
        return None if math.isnan(obj) else ("inf" if obj > 0 else "-inf")
    return obj


# ----------------------------------------------------------------- writers

def provenance(config_hash, seed):
    return {"config_hash": config_hash, "seed": seed, "version": __version__}


def _ensure_dir(out):
    try:
        os.makedirs(out, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create output directory {out}: {exc}") from None


def write_json(path, payload, prov):
    _ensure_dir(os.path.dirname(os.fspath(path)) or ".")
    body = {**_plain(payload), **prov}
    try:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(body, fh, sort_keys=True, indent=2, ensure_ascii=False)
            fh.write("\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from None


def write_csv(path, header, rows, prov):
    """CSV with '#'-prefixed provenance lines, then the column header; floats in repr precision."""
    _ensure_dir(os.path.dirname(os.fspath(path)) or ".")
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            for k in sorted(prov):
                fh.write(f"# {k}={prov[k]}\n")
            w = csv.writer(fh)
            w.writerow(header)
            for r in rows:
                w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from None


def read_csv(path):
    """(provenance dict, header, rows as strings)."""
    prov, rows = {}, []
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    body = []
    for line in lines:
        if line.startswith("# "):
            k, _, v = line[2:].partition("=")
            prov[k] = v
        else:
            body.append(line)
    reader = csv.reader(body)
    header = next(reader)
    rows = list(reader)
    return prov, header, rows
