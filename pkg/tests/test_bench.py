import json
import os

import numpy as np
import pytest

from unfoldlab import bench
from unfoldlab import report as rp
from unfoldlab.config import (ExperimentConfig, config_from_dict, config_to_dict,
                              load_config, parse_config, to_toml)
from unfoldlab.errors import ConfigError


def tiny_config(seed=77):
    cfg = ExperimentConfig()
    cfg.seed = seed
    cfg.problem.n1 = cfg.problem.n2 = 20
    cfg.problem.rank_r = 2
    cfg.data.train, cfg.data.val, cfg.data.test = 8, 2, 4
    cfg.model.depth_k = 3
    cfg.model.hidden_channels = 3
    cfg.solver.tune_iters = 40
    cfg.solver.tune_instances = 3
    cfg.solver.converge_cap = 500
    cfg.train.epochs = 3
    cfg.train.batch_size = 4
    cfg.lista.m, cfg.lista.n, cfg.lista.k_nonzeros = 12, 24, 3
    cfg.lista.depth_k = 5
    cfg.lista.train, cfg.lista.val, cfg.lista.test = 16, 4, 8
    cfg.lista.epochs = 5
    cfg.lista.batch_size = 8
    return cfg


# ---------------------------------------------------------------------------
# config


def test_config_roundtrip_lossless():
    cfg = tiny_config()
    text = to_toml(cfg)
    back = parse_config(text)
    assert config_to_dict(back) == config_to_dict(cfg)


def test_default_config_roundtrip():
    cfg = ExperimentConfig()
    assert config_to_dict(parse_config(to_toml(cfg))) == config_to_dict(cfg)


def test_unknown_top_level_key_rejected():
    with pytest.raises(ConfigError, match="unknown config key"):
        config_from_dict({"sedd": 1})


def test_unknown_section_key_rejected():
    with pytest.raises(ConfigError, match="unknown key"):
        config_from_dict({"problem": {"n3": 4}})


def test_type_mismatch_rejected():
    with pytest.raises(ConfigError):
        config_from_dict({"seed": "abc"})
    with pytest.raises(ConfigError):
        config_from_dict({"problem": {"n1": 1.5}})
    with pytest.raises(ConfigError):
        config_from_dict({"model": {"shared_conv": 1}})


def test_validation_rejects_bad_values():
    with pytest.raises(ConfigError):
        config_from_dict({"problem": {"sparse_frac": 1.5}})
    with pytest.raises(ConfigError):
        config_from_dict({"problem": {"psi_mode": "hadamard"}})
    with pytest.raises(ConfigError):
        config_from_dict({"model": {"variants": ["hyper", "nope"]}})


def test_malformed_toml_rejected():
    with pytest.raises(ConfigError, match="TOML"):
        parse_config("seed = [unterminated")


def test_load_config_file(tmp_path):
    path = tmp_path / "exp.toml"
    path.write_text(to_toml(tiny_config(seed=5)))
    assert load_config(path).seed == 5


# ---------------------------------------------------------------------------
# studies (tiny scale)


@pytest.fixture(scope="module")
def matched_report():
    return bench.run_matched(tiny_config())


def test_matched_report_structure(matched_report):
    cfg = matched_report.config
    assert [m.name for m in matched_report.methods] == ["classical"] + cfg.model.variants
    for m in matched_report.methods:
        assert m.losses.shape == (cfg.data.test, cfg.model.depth_k)
        assert np.all(np.isfinite(m.losses))
    assert matched_report.baseline_converged.shape == (cfg.data.test,)


def test_matched_classical_only():
    cfg = tiny_config()
    cfg.model.variants = []
    report = bench.run_matched(cfg)
    assert [m.name for m in report.methods] == ["classical"]


def test_mismatch_requires_orthogonal():
    cfg = tiny_config()
    cfg.problem.psi_mode = "identity"
    with pytest.raises(ConfigError):
        bench.run_mismatch(cfg)


def test_mismatch_zero_delta_degenerates_to_matched(tmp_path):
    cfg = tiny_config(seed=123)
    cfg.problem.psi_mode = "orthogonal"
    cfg.problem.mismatch_delta = 0.0
    cfg.model.variants = ["hyper"]
    mm = bench.run_mismatch(cfg)
    ma = bench.run_matched(cfg)
    rp.emit_report(mm, tmp_path / "mm")
    rp.emit_report(ma, tmp_path / "ma")
    assert (tmp_path / "mm" / "results.csv").read_bytes() == \
        (tmp_path / "ma" / "results.csv").read_bytes()


def test_mismatch_runs_and_records_delta():
    cfg = tiny_config()
    cfg.problem.psi_mode = "orthogonal"
    cfg.model.variants = ["hyper"]
    report = bench.run_mismatch(cfg)
    assert report.delta == cfg.problem.mismatch_delta
    assert report.kind == "mismatch"


# ---------------------------------------------------------------------------
# emit_report


def test_emit_report_files(matched_report, tmp_path):
    paths = rp.emit_report(matched_report, tmp_path)
    names = {os.path.basename(p) for p in paths}
    assert names == {"results.csv", "instance_losses.csv", "meta.json", "loss_vs_iter.svg"}

    cfg = matched_report.config
    lines = (tmp_path / "results.csv").read_text().strip().splitlines()
    methods = 1 + len(cfg.model.variants)
    assert lines[0] == "method,iteration,mean_loss,std_loss,n_test"
    assert len(lines) - 1 == methods * cfg.model.depth_k + 1  # + converged row


def test_meta_roundtrips_to_equal_config(matched_report, tmp_path):
    rp.emit_report(matched_report, tmp_path)
    meta = json.loads((tmp_path / "meta.json").read_text())
    rebuilt = config_from_dict(meta["config"])
    assert config_to_dict(rebuilt) == config_to_dict(matched_report.config)


def test_results_reaggregate_from_instance_losses(matched_report, tmp_path):
    rp.emit_report(matched_report, tmp_path)
    inst_rows = (tmp_path / "instance_losses.csv").read_text().strip().splitlines()[1:]
    sums = {}
    counts = {}
    for row in inst_rows:
        method, it, inst, loss = row.split(",")
        key = (method, int(it))
        sums[key] = sums.get(key, 0.0) + float(loss)
        counts[key] = counts.get(key, 0) + 1
    res_rows = (tmp_path / "results.csv").read_text().strip().splitlines()[1:]
    for row in res_rows:
        method, it, mean_loss, _, n = row.split(",")
        key = (method, int(it))
        assert counts[key] == int(n)
        assert abs(sums[key] / counts[key] - float(mean_loss)) < 1e-12


def test_svg_is_wellformed_with_one_polyline_per_method(matched_report, tmp_path):
    import xml.etree.ElementTree as ET

    rp.emit_report(matched_report, tmp_path)
    tree = ET.parse(tmp_path / "loss_vs_iter.svg")
    ns = "{http://www.w3.org/2000/svg}"
    polys = tree.getroot().findall(f"{ns}polyline")
    assert len(polys) == len(matched_report.methods)
    methods = {p.get("data-method") for p in polys}
    assert methods == {m.name for m in matched_report.methods}


def test_emit_deterministic_across_runs(tmp_path):
    a = bench.run_matched(tiny_config(seed=99))
    b = bench.run_matched(tiny_config(seed=99))
    rp.emit_report(a, tmp_path / "a")
    rp.emit_report(b, tmp_path / "b")
    assert (tmp_path / "a" / "results.csv").read_bytes() == \
        (tmp_path / "b" / "results.csv").read_bytes()
    assert (tmp_path / "a" / "instance_losses.csv").read_bytes() == \
        (tmp_path / "b" / "instance_losses.csv").read_bytes()


# ---------------------------------------------------------------------------
# lista diagnostics (tiny scale)


def test_lista_diag_report(tmp_path):
    cfg = tiny_config()
    report = bench.run_lista_diag(cfg)
    assert set(report.nmse) == {"ista", "lista_free", "lista_cp"}
    depth = cfg.lista.depth_k
    for curve in report.nmse.values():
        assert len(curve) == depth
    assert report.param_counts["lista_cp"] < report.param_counts["lista_free"]
    assert all(r == 0.0 for r in report.coupling["lista_cp"])
    paths = rp.emit_lista_report(report, tmp_path)
    assert {os.path.basename(p) for p in paths} == \
        {"lista_results.csv", "lista_meta.json", "nmse_vs_layer.svg"}
