import json

import pytest

from kindisc.config import ConfigError, RunConfig, default_config, load_config
from kindisc.simulate import CASES, N2O


def _load(tmp_path, d):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(d))
    return load_config(p)


@pytest.mark.parametrize("case", list(CASES))
def test_round_trip_is_identity(case, tmp_path):
    cfg = default_config(case, budget=7, constraints_off=True).with_seeds(gp_seed=3, mh_seed=2)
    again = _load(tmp_path, cfg.to_dict())
    assert again == cfg
    assert again.to_dict() == cfg.to_dict()


def test_rate_search_uses_case_species():
    for name, case in CASES.items():
        assert default_config(name).rate_gp().variables == case.species


def test_minimal_config(tmp_path):
    cfg = _load(tmp_path, {"schema_version": 1, "case": "n2o"})
    assert cfg.name == "n2o" and cfg.budget == 5 and cfg.mode == "benchmark"
    assert cfg.label == "PI-ADoK"
    assert all(t.weight == 1.0 for t in cfg.concentration.constraints + cfg.rate.constraints)


def test_ablation_label():
    assert default_config("n2o", constraints_off=True).label == "ADoK-S-mode"


def test_inline_case_is_kept(tmp_path):
    d = {"schema_version": 1, "case": {**N2O.to_dict(), "name": "custom"}}
    cfg = _load(tmp_path, d)
    assert cfg.case.name == "custom"
    assert _load(tmp_path, cfg.to_dict()) == cfg


@pytest.mark.parametrize("patch,path", [
    ({"schema_version": 2}, "schema_version"),
    ({"case": "nope"}, "case"),
    ({"mode": "auto"}, "mode"),
    ({"budget": 3}, "budget"),
    ({"seeds": {"gp_seed": -1}}, "seeds.gp_seed"),
    ({"seeds": {"other_seed": 1}}, "seeds.other_seed"),
    ({"extra": 1}, "extra"),
    ({"rate": {"gp": {"variables": ["CNO", "CX"]}}}, "rate.gp.variables[1]"),
    ({"concentration": {"gp": {"variables": ["CNO"]}}}, "concentration.gp.variables"),
    ({"rate": {"constraints": [{"kind": "sign", "species": ["CQ"]}]}}, "rate.constraints[0].species[0]"),
    ({"rate": {"constraints": [{"kind": "shape"}]}}, "rate.constraints[0].kind"),
    ({"concentration": {"constraints": [{"kind": "sign", "weight": -1}]}}, "concentration.constraints[0].weight"),
    ({"mbdoe": {"lower": [0, 0]}}, "mbdoe.lower"),
    ({"mbdoe": {"n_grid": 4}}, "mbdoe.n_grid"),
    ({"uq": {"band_k": 5}}, "uq.band_k"),
    ({"uq": {"mh": {"seed": 3}}}, "uq.mh.seed"),
    ({"data": "missing.csv"}, "data"),
])
def test_errors_name_the_field(patch, path, tmp_path):
    d = {"schema_version": 1, "case": "n2o", **patch}
    with pytest.raises(ConfigError) as exc:
        _load(tmp_path, d)
    assert exc.value.path == path
    assert str(exc.value).startswith(path)


def test_missing_and_malformed_files(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "none.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_seed_overrides():
    cfg = default_config("n2o").with_seeds(noise_seed=8)
    assert cfg.seeds.noise_seed == 8 and cfg.seeds.gp_seed == 0
    with pytest.raises(ConfigError):
        cfg.with_seeds(colour_seed=1)


def test_data_path_relative_to_config(tmp_path):
    from kindisc.simulate import datasets_to_csv, run_designed

    (tmp_path / "d.csv").write_text(datasets_to_csv(run_designed(N2O)))
    cfg = _load(tmp_path, {"schema_version": 1, "case": "n2o", "data": "d.csv"})
    assert cfg.data == str(tmp_path / "d.csv")


def test_from_dict_matches_default():
    assert RunConfig.from_dict({"schema_version": 1, "case": "toluene"}) == default_config("toluene")
