import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ergolab.runner.cli import main
from ergolab.runner.config import STAGES, ConfigError, parse_config, resolve_stages, schema_json
from ergolab.runner.oracles import (OracleError, bounded_cost_gradient_bound, lq_adjoint_slope,
                                    lq_cost_for_gain, ou_oracle, ou_tv, riccati_oracle)
from ergolab.runner.pipeline import EXIT_ASSUMPTION, EXIT_CONFIG, run_scenario
from ergolab.runner.scenarios import UnknownScenario, load_scenario

CHECK_ONLY = """\
[run]
scenario = {name}
seed = 1
stages = check

[check]
n_samples = 300
convexity_samples = 200
"""


# -- oracles ------------------------------------------------------------------

@pytest.mark.parametrize("a,q,r,sigma,P", [
    (-1.0, 1.0, 1.0, 1.0, np.sqrt(2) - 1),
    (-2.0, 4.0, 1.0, 1.0, 2 * (np.sqrt(2) - 1)),
    (1.0, 3.0, 1.0, 2.0, 3.0),
    (-1.0, 0.0, 1.0, 1.0, 0.0),
])
def test_riccati_examples(a, q, r, sigma, P):
    sol = riccati_oracle(a, q, r, sigma)
    assert sol.P == pytest.approx(P, abs=1e-12)
    assert sol.lam == pytest.approx(sigma ** 2 * P, abs=1e-12)


def test_riccati_adjoint_slope_example():
    assert lq_adjoint_slope(-2.0, 4.0, riccati_oracle(-2.0, 4.0, 1.0, 1.0).K) == pytest.approx(
        4 * (np.sqrt(2) - 1), abs=1e-6)
    assert lq_adjoint_slope(-1.0, 1.0, np.sqrt(2) - 1) == pytest.approx(0.828427, abs=1e-6)


def test_riccati_rejects_unstabilisable():
    with pytest.raises(OracleError):
        riccati_oracle(1.0, 0.0, 1.0, 1.0)
    with pytest.raises(OracleError):
        lq_cost_for_gain(-1.0, 1.0, 1.0, 1.0, -2.0)


@given(st.floats(-3, -0.1), st.floats(0.1, 3), st.floats(0.1, 3))
def test_riccati_gain_minimises_cost(a, q, r):
    sol = riccati_oracle(a, q, r, 1.0)
    for dK in (-0.05, 0.05):
        K = sol.K + dK
        if K > a:
            assert lq_cost_for_gain(a, q, r, 1.0, K) >= sol.lam - 1e-12


def test_ou_oracles():
    assert ou_tv(1.0, 1.0, 1.0, -1.0, 2.0) == pytest.approx(0.1538, abs=1e-3)
    assert ou_tv(1.0, 1.0, 0.5, 0.5, 2.0) == 0.0
    o = ou_oracle(1.0, 1.0, 1.0, 1.0)
    assert o.mean == pytest.approx(np.exp(-1)) and o.stationary_variance == 0.5
    assert bounded_cost_gradient_bound() == pytest.approx(np.sqrt(2 / np.e), abs=1e-9)


# -- configuration ------------------------------------------------------------

def test_schema_is_json_with_all_sections():
    schema = json.loads(schema_json())
    assert set(schema["properties"]) == {"run", "scenario", *STAGES}


def test_parse_fills_defaults_and_coerces():
    cfg = parse_config("[run]\nscenario = lq-1d\n[ebsde]\nalphas = 0.5, 0.25, 0.125\n[scenario]\nK = none\n")
    assert cfg["ebsde"]["alphas"] == [0.5, 0.25, 0.125]
    assert cfg["ebsde"]["n_paths"] == 2000
    assert cfg["scenario"]["K"] is None
    assert cfg["run"]["stages"] == ["all"]


@pytest.mark.parametrize("text,needle", [
    ("[run]\nseed = 1\n", "scenario"),
    ("[run]\nscenario = x\n[bogus]\na = 1\n", "unknown section"),
    ("[run]\nscenario = x\n[adjoint]\nwidth = 2\n", "unknown key"),
    ("[run]\nscenario = x\n[adjoint]\ndt = fast\n", "cannot parse"),
    ("[run]\nscenario = x\n[adjoint]\ndt = -1\n", "adjoint/dt"),
    ("not an ini", "malformed"),
])
def test_config_errors_are_actionable(text, needle):
    with pytest.raises(ConfigError, match=needle):
        parse_config(text)


def test_stage_resolution():
    assert resolve_stages(["smp", "adjoint"]) == ["adjoint", "smp"]
    assert resolve_stages(["all"]) == list(STAGES)
    with pytest.raises(ConfigError, match="no stages"):
        resolve_stages([])
    with pytest.raises(ConfigError, match="needs stage 'adjoint'"):
        resolve_stages(["smp"])
    with pytest.raises(ConfigError, match="unknown stages"):
        resolve_stages(["fly"])


def test_scenarios_load_and_reject_bad_names():
    for name in ("ou-quadratic", "lq-1d", "bounded-cost-1d", "periodic-1d", "nondissipative-1d"):
        assert load_scenario(name).model.state_dim == 1
    with pytest.raises(UnknownScenario):
        load_scenario("nope")
    with pytest.raises(ValueError):
        load_scenario("lq-1d", zeta=1.0)


# -- pipeline and CLI ---------------------------------------------------------

def test_check_stage_writes_bundle(tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text(CHECK_ONLY.format(name="bounded-cost-1d"))
    bundle = run_scenario(str(cfg), out=str(tmp_path / "out"))
    assert bundle.exit_code == 0
    assert "assumptions.json" in bundle.files
    manifest = json.loads((bundle.directory / "manifest.json").read_text())
    assert manifest["stages"] == ["check"] and manifest["seed"] == 1
    assert "check" in bundle.table()


def test_cli_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text(CHECK_ONLY.format(name="nondissipative-1d"))
    assert main(["run", str(bad), "--out", str(tmp_path / "o")]) == EXIT_ASSUMPTION
    unknown = tmp_path / "unknown.ini"
    unknown.write_text(CHECK_ONLY.format(name="no-such-model"))
    assert main(["run", str(unknown), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert main(["run", str(bad), "--stages", "smp"]) == EXIT_CONFIG
    assert main(["run", str(bad), "--stages", ","]) == EXIT_CONFIG
    assert main(["run", str(tmp_path / "missing.ini")]) == EXIT_CONFIG
    assert main(["run"]) == EXIT_CONFIG
    err = capsys.readouterr().err
    assert "config error" in err


def test_cli_seed_override_and_schema(tmp_path, capsys):
    good = tmp_path / "good.ini"
    good.write_text(CHECK_ONLY.format(name="ou-quadratic"))
    assert main(["run", str(good), "--seed", "7", "--out", str(tmp_path / "o"), "--threads", "1"]) == 0
    assert (tmp_path / "o" / "ou-quadratic-seed7" / "manifest.json").exists()
    capsys.readouterr()
    assert main(["schema"]) == 0
    assert json.loads(capsys.readouterr().out)["title"] == "ergolab run configuration"


def test_replay_of_check_stage_is_identical(tmp_path, capsys):
    good = tmp_path / "good.ini"
    good.write_text(CHECK_ONLY.format(name="lq-1d"))
    assert main(["run", str(good), "--out", str(tmp_path / "a")]) == 0
    manifest = tmp_path / "a" / "lq-1d-seed1" / "manifest.json"
    assert main(["run", "--replay", str(manifest), "--out", str(tmp_path / "b")]) == 0
    assert "replay identical" in capsys.readouterr().out
