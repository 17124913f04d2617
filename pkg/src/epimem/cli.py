"""Command-line entry point: ``epimem <subcommand> --model FILE --out DIR``."""
import argparse
import hashlib
import os
import sys
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .errors import ConfigError, EpimemError, InvalidModel
from .io import (canonical_json, load_model, provenance, spec_hash, spec_to_dict, write_csv, write_json)

SUBCOMMANDS = ("validate", "simulate", "solve", "equilibrium", "stability", "scenario", "flln")


@dataclass
class RunConfig:
    subcommand: str
    model: str
    out: str = "."
    seed: int = 0
    n: list = field(default_factory=lambda: [1000])
    horizon: float = 10.0
    replicas: int = 1
    region: tuple = (10.0, 50.0)
    boundary_samples: int = 1024

    def __post_init__(self):
        if self.subcommand not in SUBCOMMANDS:
            raise ConfigError(f"unknown subcommand {self.subcommand!r}")
        if self.seed < 0 or self.seed >= 2 ** 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if not self.horizon > 0:
            raise ConfigError("horizon must be positive")
        if any(b <= a for a, b in zip(self.n, self.n[1:])) or not self.n or self.n[0] < 1:
            raise ConfigError("--n must be strictly increasing positive integers")
        if self.replicas < 1:
            raise ConfigError("--replicas must be at least 1")

    def run_dict(self):
        return {"subcommand": self.subcommand, "seed": self.seed, "n": self.n, "horizon": self.horizon,
                "replicas": self.replicas, "region": list(self.region), "boundary_samples": self.boundary_samples}


def config_hash(spec, cfg):
    """sha256 over the resolved model and the run parameters."""
    body = canonical_json({"model": spec_to_dict(spec), "run": cfg.run_dict()})
    return hashlib.sha256(body.encode("utf-8")).hexdigest()


def _path(cfg, name):
    return os.path.join(cfg.out, name)


# ------------------------------------------------------------- subcommands

def _validate(spec, extras, cfg, prov):
    from .model import validate_model
    rep = validate_model(spec)
    write_json(_path(cfg, "validate.json"), {"ok": rep.ok, "report": rep.as_dict()}, prov)
    if not rep.ok:
        raise InvalidModel("model violates: " + ", ".join(rep.failures()), rep)


def _simulate(spec, extras, cfg, prov):
    from .particles import SimConfig, simulate_ensemble
    sim = SimConfig(cfg.n[0], cfg.horizon, cfg.seed, (cfg.horizon,), cfg.replicas)
    runs = simulate_ensemble(spec, sim)
    rows, snaps, events = [], [], {}
    for r, tr in enumerate(runs):
        rows.extend((r, float(t), float(f)) for t, f in zip(tr.times, tr.F))
        for t, hist in tr.snapshots.items():
            m, i = np.nonzero(hist)
            snaps.extend((r, float(t), int(a), int(b), float(hist[a, b])) for a, b in zip(m, i))
        ev = tr.events
        events[str(r)] = {"proposals": tr.proposals,
                          "events": [[float(e["t"]), int(e["k"]), int(e["old"]), int(e["new"])] for e in ev]}
    write_csv(_path(cfg, "trajectory.csv"), ["replica", "t", "F_N"], rows, prov)
    write_csv(_path(cfg, "snapshots.csv"), ["replica", "t", "age_bin", "trait", "mass"], snaps, prov)
    write_json(_path(cfg, "events.json"), {"N": cfg.n[0], "columns": ["t", "individual", "old", "new"],
                                           "replicas": events}, prov)


def _solve(spec, extras, cfg, prov):
    from .pde import solve_pde
    sol = solve_pde(spec, cfg.horizon, snapshot_times=[cfg.horizon])
    write_csv(_path(cfg, "solution_F.csv"), ["t", "F"], zip(sol.times.tolist(), sol.F.tolist()), prov)
    stride = max(1, (sol.times.size - 1) // 200)
    idx = list(range(0, sol.times.size, stride))
    if idx[-1] != sol.times.size - 1:
        idx.append(sol.times.size - 1)
    rows = ((float(sol.times[n]), i, float(sol.S[n, i])) for n in idx for i in range(spec.n_atoms))
    write_csv(_path(cfg, "solution_S.csv"), ["t", "theta", "S"], rows, prov)
    u, W = sol.density(sol.times[-1])
    t = float(sol.times[-1])
    M = spec.grid.count
    rows = [(t, m, i, float(u[m, i])) for m in range(M) for i in range(spec.n_atoms)]
    rows += [(t, M, i, float(W[i])) for i in range(spec.n_atoms)]
    write_csv(_path(cfg, "density.csv"), ["t", "age_bin", "theta", "u"], rows, prov)
    write_json(_path(cfg, "solve.json"), {"horizon": cfg.horizon, "steps": int(sol.times.size - 1),
                                          "F_final": float(sol.F[-1]),
                                          "mass_drift": float(np.max(np.abs(sol.mass - sol.mass[0])))}, prov)


def _equilibrium(spec, extras, cfg, prov):
    from .equilibrium import find_equilibria
    rep = find_equilibria(spec)
    write_json(_path(cfg, "equilibrium.json"), rep.as_dict(), prov)
    M = spec.grid.count
    rows = []
    for r, us in enumerate(rep.u_star):
        rows += [(r, m, i, float(us.cells[m, i])) for m in range(M) for i in range(spec.n_atoms)]
        rows += [(r, M, i, float(us.overflow[i])) for i in range(spec.n_atoms)]
    write_csv(_path(cfg, "u_star.csv"), ["root", "age_bin", "theta", "u"], rows, prov)


def _stability(spec, extras, cfg, prov):
    from .stability import scan_roots
    rep = scan_roots(spec, cfg.region, cfg.boundary_samples)
    write_json(_path(cfg, "stability.json"), rep.as_dict(), prov)


def _scenario(spec, extras, cfg, prov):
    from .model import validate_model
    kind = extras.get("scenario")
    if kind is None:
        raise ConfigError("the model file has no [sis], [one_shot] or [renewal] section")
    derived = {"scenario": kind, "info": spec.info, "n_atoms": spec.n_atoms, "R0": spec.r0(),
               "model_hash": spec_hash(spec), "assumptions_ok": validate_model(spec).ok}
    if "regime" in extras:
        cf = extras["closed_form"]
        derived["regime"] = extras["regime"].as_dict()
        derived["H0_closed_form"] = cf.H0
    if "renewal" in extras:
        b = extras["renewal"]
        derived.update({"gamma_star": b.gamma_star, "gamma_star_mc": b.gamma_star_mc, "threshold": b.threshold,
                        "endemic": b.endemic})
    write_json(_path(cfg, "scenario.json"), derived, prov)
    write_json(_path(cfg, "spec.json"), spec_to_dict(spec), prov)


def _flln(spec, extras, cfg, prov):
    from .flln import flln_sweep
    res = flln_sweep(spec, cfg.n, cfg.horizon, cfg.replicas, cfg.seed)
    write_json(_path(cfg, "flln.json"), res.as_dict(), prov)


HANDLERS = {"validate": _validate, "simulate": _simulate, "solve": _solve, "equilibrium": _equilibrium,
            "stability": _stability, "scenario": _scenario, "flln": _flln}


def run(cfg):
    """Execute one subcommand; returns the exit status."""
    spec, extras = load_model(cfg.model)
    prov = provenance(config_hash(spec, cfg), cfg.seed)
    HANDLERS[cfg.subcommand](spec, extras, cfg, prov)
    return 0


def build_parser():
    ap = argparse.ArgumentParser(prog="epimem", description="Age and trait structured epidemic model with memory.")
    ap.add_argument("--version", action="version", version=f"epimem {__version__}")
    ap.add_argument("subcommand", choices=SUBCOMMANDS)
    ap.add_argument("--model", required=True, help="TOML or JSON model file")
    ap.add_argument("--out", default=".", help="output directory")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--n", type=int, nargs="+", default=[1000], help="population size(s)")
    ap.add_argument("--horizon", type=float, default=10.0)
    ap.add_argument("--replicas", type=int, default=None)
    ap.add_argument("--region", type=float, nargs=2, default=(10.0, 50.0), metavar=("X", "Y"))
    ap.add_argument("--boundary-samples", type=int, default=1024)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    replicas = args.replicas if args.replicas is not None else (20 if args.subcommand == "flln" else 1)
    try:
        cfg = RunConfig(args.subcommand, args.model, args.out, args.seed, list(args.n), args.horizon, replicas,
                        tuple(args.region), args.boundary_samples)
        return run(cfg)
    except EpimemError as exc:
        print(f"epimem: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
