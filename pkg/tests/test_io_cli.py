import json
import os

import numpy as np
import pytest

from epimem import __version__
from epimem.cli import main
from epimem.errors import ConfigError, IoError
from epimem.io import load_model, read_csv, spec_from_document, spec_hash, spec_to_dict

from conftest import model_path, x_plus_exp_root


def _json(path):
    with open(path) as fh:
        return json.load(fh)


@pytest.mark.parametrize("name", ["sis_step.toml", "sis.toml", "one_shot.toml", "bistable.toml"])
def test_roundtrip_hash(name, tmp_path):
    spec, _ = load_model(model_path(name))
    doc = spec_to_dict(spec)
    again, _ = spec_from_document(json.loads(json.dumps(doc)))
    assert spec_hash(again) == spec_hash(spec)
    path = tmp_path / "spec.json"
    path.write_text(json.dumps(doc))
    assert spec_hash(load_model(path)[0]) == spec_hash(spec)


def test_unknown_keys_rejected(tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text('[sis]\nlambda_star = 2.0\nrho = 1.0\na_star = 3.0\nmystery = 1\n')
    with pytest.raises(ConfigError):
        load_model(bad)
    bad.write_text('colour = "red"\n[sis]\nlambda_star = 2.0\nrho = 1.0\na_star = 3.0\n')
    with pytest.raises(ConfigError):
        load_model(bad)
    with pytest.raises(IoError):
        load_model(tmp_path / "missing.toml")


def test_validate_exit_zero(tmp_path):
    assert main(["validate", "--model", model_path("sis.toml"), "--out", str(tmp_path)]) == 0
    out = _json(tmp_path / "validate.json")
    assert out["ok"] and all(c["ok"] for c in out["report"]["checks"].values())
    assert out["version"] == __version__ and len(out["config_hash"]) == 64 and out["seed"] == 0


def test_exit_codes(tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text("[sis]\nlambda_star = 2.0\n")
    assert main(["validate", "--model", str(bad), "--out", str(tmp_path)]) == 2
    assert main(["validate", "--model", str(tmp_path / "nope.toml"), "--out", str(tmp_path)]) == 4
    invalid = tmp_path / "invalid.toml"
    invalid.write_text(open(model_path("sis_step.toml")).read().replace(
        'curve = { type = "sis_step", T = 1.0 }',
        'curve = { type = "linear", ages = [0.0, 1.0], values = [0.5, 1.0] }'))
    assert main(["validate", "--model", str(invalid), "--out", str(tmp_path)]) == 3
    assert main(["flln", "--model", model_path("sis_step.toml"), "--out", str(tmp_path), "--n", "100", "50"]) == 2


def test_equilibrium_example55(tmp_path):
    assert main(["equilibrium", "--model", model_path("one_shot.toml"), "--out", str(tmp_path)]) == 0
    out = _json(tmp_path / "equilibrium.json")
    assert len(out["roots"]) == 1
    assert out["roots"][0] == pytest.approx(x_plus_exp_root(), abs=1e-6)
    prov, header, rows = read_csv(tmp_path / "u_star.csv")
    assert header == ["root", "age_bin", "theta", "u"]
    assert prov["config_hash"] == out["config_hash"]


def test_solve_and_simulate_outputs(tmp_path):
    sis = model_path("sis_step.toml")
    assert main(["solve", "--model", sis, "--out", str(tmp_path), "--horizon", "2"]) == 0
    prov, header, rows = read_csv(tmp_path / "solution_F.csv")
    assert header == ["t", "F"] and len(rows) == 129
    assert prov["version"] == __version__
    assert main(["simulate", "--model", sis, "--out", str(tmp_path), "--n", "200", "--horizon", "2",
                 "--seed", "5"]) == 0
    _, header, rows = read_csv(tmp_path / "trajectory.csv")
    assert header == ["replica", "t", "F_N"]
    F = np.array([float(r[2]) for r in rows])
    assert np.all((F >= 0) & (F <= 2))
    first = (tmp_path / "events.json").read_text()
    main(["simulate", "--model", sis, "--out", str(tmp_path), "--n", "200", "--horizon", "2", "--seed", "5"])
    assert (tmp_path / "events.json").read_text() == first


def test_scenario_and_stability(tmp_path):
    assert main(["scenario", "--model", model_path("bistable.toml"), "--out", str(tmp_path)]) == 0
    out = _json(tmp_path / "scenario.json")
    assert out["regime"]["tag"] == "bistable"
    reloaded, _ = load_model(tmp_path / "spec.json")
    assert spec_hash(reloaded) == out["model_hash"]
    assert main(["stability", "--model", model_path("sis_step.toml"), "--out", str(tmp_path)]) == 0
    st = _json(tmp_path / "stability.json")
    assert st["winding_number"] == 0 and st["verdict"] == "no-roots-in-region"


def test_config_hash_depends_on_run(tmp_path):
    sis = model_path("sis_step.toml")
    main(["validate", "--model", sis, "--out", str(tmp_path / "a"), "--seed", "1"])
    main(["validate", "--model", sis, "--out", str(tmp_path / "b"), "--seed", "2"])
    a, b = _json(tmp_path / "a" / "validate.json"), _json(tmp_path / "b" / "validate.json")
    assert a["config_hash"] != b["config_hash"]
    assert os.path.exists(tmp_path / "a" / "validate.json")
