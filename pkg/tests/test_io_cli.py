import json
import os
import subprocess
import sys

import numpy as np
import pytest

from genhyper.cli import main
from genhyper.diffusion import DiffusionSchedule, ScoreNetwork, standardize
from genhyper.errors import ParseError
from genhyper.fields import ParameterField, rectangle_mesh
from genhyper.fileio import (
    atomic_write_text, load_dataset, load_field, load_fit, load_individual_csv, load_mesh, load_observations,
    load_samples, load_score, save_dataset, save_field, save_fit, save_mesh, save_samples, save_score,
)
from genhyper.mechanics import Protocol
from genhyper.node import FitConfig, NodeArch, fit_population, predict_stress
from genhyper.synth import SynthConfig, synth_generate


def _files(directory):
    return {p.name: p.read_bytes() for p in sorted(directory.iterdir())}


def test_dataset_roundtrip_exact(tmp_path):
    pop = synth_generate(SynthConfig(n=3, seed=5, n_points=7))
    save_dataset(pop, tmp_path)
    back = load_dataset(tmp_path)
    assert [i.name for i in back] == [i.name for i in pop]
    for a, b in zip(pop, back):
        assert a.params == b.params
        for ca, cb in zip(a.curves, b.curves):
            assert ca.kind == cb.kind
            assert np.array_equal(ca.stretch, cb.stretch)
            assert np.array_equal(ca.sigma_xx, cb.sigma_xx) and np.array_equal(ca.sigma_yy, cb.sigma_yy)


def test_dataset_without_manifest(tmp_path):
    save_dataset(synth_generate(SynthConfig(n=2, seed=1, n_points=5)), tmp_path)
    (tmp_path / "manifest.json").unlink()
    assert len(load_dataset(tmp_path)) == 2


def test_synth_deterministic_and_positive(tmp_path):
    cfg = SynthConfig(n=4, seed=11, n_points=6)
    save_dataset(synth_generate(cfg), tmp_path / "a")
    save_dataset(synth_generate(cfg), tmp_path / "b")
    assert _files(tmp_path / "a") == _files(tmp_path / "b")
    pop = synth_generate(cfg)
    assert all(v > 0 for ind in pop for v in ind.params.values())
    assert len(synth_generate(SynthConfig(n=0))) == 0


def test_parse_errors_carry_line_numbers(tmp_path):
    f = tmp_path / "ind.csv"
    f.write_text("protocol,lambda,sigma_xx,sigma_yy\nequibiaxial,1.0,0.0,0.0\nequibiaxial,1.1,abc,0.1\n")
    with pytest.raises(ParseError, match=r"ind.csv:3"):
        load_individual_csv(f)
    f.write_text("protocol,lambda,sigma_xx,sigma_yy\nequibiaxial,1.0,0.0\n")
    with pytest.raises(ParseError, match=r"ind.csv:2"):
        load_individual_csv(f)
    f.write_text("protocol,lambda,sigma_xx,sigma_yy\nsideways,1.0,0.0,0.0\n")
    with pytest.raises(ParseError, match=r"ind.csv:2"):
        load_individual_csv(f)
    f.write_text("lam,sxx\n1,2\n")
    with pytest.raises(ParseError, match=r"ind.csv:1"):
        load_individual_csv(f)
    j = tmp_path / "m.json"
    j.write_text('{"version": 1,\n "kind": "model",\n oops}')
    with pytest.raises(ParseError, match=r"m.json:3"):
        load_fit(j)
    j.write_text('{"version": 99, "kind": "model"}')
    with pytest.raises(ParseError, match="version"):
        load_fit(j)
    n = tmp_path / "nodes.txt"
    n.write_text("0 0\n1 0\n1\n")
    with pytest.raises(ParseError, match=r"nodes.txt:3"):
        load_mesh(n, n)


def test_atomic_write_leaves_old_file_on_failure(tmp_path, monkeypatch):
    target = tmp_path / "out.txt"
    atomic_write_text(target, "old")

    def boom(*a, **k):
        raise OSError("disk full")
    monkeypatch.setattr(os, "replace", boom)
    with pytest.raises(OSError):
        atomic_write_text(target, "new")
    assert target.read_text() == "old"
    assert [p.name for p in tmp_path.iterdir()] == ["out.txt"]


def test_observation_files(tmp_path):
    f = tmp_path / "obs.csv"
    f.write_text("protocol,lambda,sigma_xx,sigma_yy\nequibiaxial,1.1,0.5,0.4\noffx,1.2,0.7,\n")
    kind, rows = load_observations(f)
    assert kind == "stress" and rows[1][3] is None and rows[0][0] == Protocol.parse("equibiaxial")
    f.write_text("param,index,value\nphi,0,-2.5\nphi,2,-3.0\n")
    kind, idx, vals = load_observations(f)
    assert kind == "param" and idx.tolist() == [0, 2] and vals.tolist() == [-2.5, -3.0]


def test_mesh_and_field_roundtrip(tmp_path):
    mesh = rectangle_mesh(3, 2, 1.5, 0.5)
    save_mesh(mesh, tmp_path / "n.txt", tmp_path / "t.txt")
    back = load_mesh(tmp_path / "n.txt", tmp_path / "t.txt")
    assert np.array_equal(back.nodes, mesh.nodes) and np.array_equal(back.tris, mesh.tris)
    vals = np.random.default_rng(0).normal(size=(2, mesh.n_nodes, 3))
    pf = ParameterField(vals, mesh.nodes, {"ell": 0.3, "seed": 4})
    save_field(pf, tmp_path / "f.csv")
    got = load_field(tmp_path / "f.csv")
    assert np.array_equal(got.values, vals) and np.array_equal(got.points, mesh.nodes)
    assert got.provenance == {"ell": 0.3, "seed": 4}


def test_samples_roundtrip(tmp_path):
    x = np.random.default_rng(0).normal(size=(5, 4))
    save_samples(x, tmp_path / "s.csv")
    assert np.array_equal(load_samples(tmp_path / "s.csv"), x)


@pytest.fixture(scope="module")
def small_fit():
    pop = synth_generate(SynthConfig(n=3, seed=2, n_points=6))
    return fit_population(pop, NodeArch("iso2"), FitConfig(iterations=40), seed=0)


def test_model_roundtrip_predicts_identically(tmp_path, small_fit):
    save_fit(small_fit, tmp_path / "m.json")
    back = load_fit(tmp_path / "m.json")
    assert back.names == small_fit.names and np.array_equal(back.phis, small_fit.phis)
    lam = np.linspace(1.0, 1.25, 9)
    for i in range(len(back.names)):
        for p in ("equibiaxial", "offx", "offy"):
            a = predict_stress(small_fit.model(i), p, lam)
            b = predict_stress(back.model(i), p, lam)
            assert np.abs(np.asarray(a) - np.asarray(b)).max() <= 1e-12


def test_score_roundtrip(tmp_path, small_fit):
    st, z = standardize(small_fit.phis)
    score = ScoreNetwork.init(z.shape[1], DiffusionSchedule(), np.random.default_rng(0), (8, 8))
    save_score(score, tmp_path / "s.json", st, small_fit, {"epochs": 1})
    back, st2, fit2 = load_score(tmp_path / "s.json")
    x = np.random.default_rng(1).normal(size=(6, z.shape[1]))
    assert np.abs(np.asarray(back(x, 0.3)) - np.asarray(score(x, 0.3))).max() <= 1e-12
    assert np.array_equal(st2.mean, st.mean) and fit2.names == small_fit.names


# -- command line -----------------------------------------------------------------

@pytest.fixture(scope="module")
def cli_run(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["synth-gen", "--n", "4", "--n-points", "6", "--out", str(d / "data"), "--seed", "3"]) == 0
    assert main(["fit", "--data", str(d / "data"), "--out", str(d / "model.json"), "--iterations", "30"]) == 0
    assert main(["score-train", "--model", str(d / "model.json"), "--out", str(d / "score.json"),
                 "--hidden", "16,16", "--epochs", "20", "--batch", "4"]) == 0
    return d


def test_cli_sample_reproducible(cli_run):
    d = cli_run
    for name in ("a", "b"):
        assert main(["sample", "--score", str(d / "score.json"), "--n", "20", "--steps", "50", "--seed", "7",
                     "--out", str(d / f"{name}.csv")]) == 0
    assert (d / "a.csv").read_bytes() == (d / "b.csv").read_bytes()
    main(["sample", "--score", str(d / "score.json"), "--n", "20", "--steps", "50", "--seed", "8",
          "--out", str(d / "c.csv")])
    assert (d / "a.csv").read_bytes() != (d / "c.csv").read_bytes()
    assert load_samples(d / "a.csv").shape == (20, 12)


def test_cli_downstream_commands(cli_run, capsys):
    d = cli_run
    main(["sample", "--score", str(d / "score.json"), "--n", "30", "--steps", "50", "--out", str(d / "p.csv")])
    for src, q in (("score.json", "qa.csv"), ("model.json", "qb.csv")):
        assert main(["stress-eval", "--model", str(d / src), "--phi", str(d / "p.csv"), "--protocol",
                     "equibiaxial", "--lambda", "1.2", "--out", str(d / q)]) == 0
    assert (d / "qa.csv").read_bytes() == (d / "qb.csv").read_bytes()
    capsys.readouterr()
    assert main(["eval", "--a", str(d / "qa.csv"), "--b", str(d / "qa.csv"), "--gmm", "1", "--kde", "20",
                 "--out", str(d / "ev.json")]) == 0
    assert "energy_distance_sq" in capsys.readouterr().out
    ev = json.loads((d / "ev.json").read_text())
    assert ev["energy_distance_sq"] <= 1e-12 and len(ev["kde_a"]["density"]) == 20

    (d / "obs.csv").write_text("param,index,value\nphi,0,-3.0\n")
    assert main(["sample-cond", "--score", str(d / "score.json"), "--obs", str(d / "obs.csv"), "--sigma", "0.1",
                 "--n", "10", "--steps", "50", "--out", str(d / "c.csv")]) == 0
    (d / "sobs.csv").write_text("protocol,lambda,sigma_xx,sigma_yy\nequibiaxial,1.1,0.05,0.04\n")
    assert main(["sample-cond", "--score", str(d / "score.json"), "--obs", str(d / "sobs.csv"), "--sigma", "0.01",
                 "--n", "10", "--steps", "50", "--out", str(d / "c2.csv")]) == 0

    assert main(["field-sample", "--score", str(d / "score.json"), "--grid", "3,3,1,1", "--ell", "0.4",
                 "--n-fields", "2", "--steps", "50", "--out", str(d / "f.csv")]) == 0
    pf = load_field(d / "f.csv")
    assert pf.values.shape == (2, 9, 12) and pf.provenance["schedule"]["n_steps"] == 50

    save_mesh(rectangle_mesh(4, 4), d / "n.txt", d / "t.txt")
    mesh_arg = f"{d / 'n.txt'},{d / 't.txt'}"
    assert main(["eig", "--mesh", mesh_arg, "--neig", "6", "--out", str(d / "b.json")]) == 0
    assert main(["field-sample", "--score", str(d / "score.json"), "--mesh", mesh_arg, "--ell", "0.3",
                 "--neig", "10", "--steps", "50", "--out", str(d / "f2.csv")]) == 0
    assert load_field(d / "f2.csv").values.shape == (1, 25, 12)


def test_cli_config_file(cli_run, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"n": 12, "steps": 40}))
    assert main(["sample", "--config", str(cfg), "--score", str(cli_run / "score.json"),
                 "--out", str(tmp_path / "s.csv")]) == 0
    assert load_samples(tmp_path / "s.csv").shape[0] == 12
    cfg.write_text(json.dumps({"bogus": 1}))
    assert main(["sample", "--config", str(cfg), "--score", str(cli_run / "score.json"), "--n", "2",
                 "--out", str(tmp_path / "s.csv")]) == 2


def test_cli_exit_codes(cli_run, tmp_path):
    d = cli_run
    assert main(["fit", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "m.json")]) == 2
    assert main(["stress-eval", "--model", str(tmp_path / "nope.json"), "--phi", "x", "--protocol",
                 "equibiaxial", "--lambda", "1.1", "--out", str(tmp_path / "q.csv")]) == 2
    assert main(["field-sample", "--score", str(d / "score.json"), "--grid", "3,x", "--ell", "0.3",
                 "--out", str(tmp_path / "f.csv")]) == 2
    (tmp_path / "n.txt").write_text("0 0\n1 0\n2 0\n")
    (tmp_path / "t.txt").write_text("0 1 2\n")
    assert main(["eig", "--mesh", f"{tmp_path / 'n.txt'},{tmp_path / 't.txt'}", "--out",
                 str(tmp_path / "b.json")]) == 2
    bad = json.loads((d / "score.json").read_text())
    bad["net"]["biases"][-1][0] = float("nan")
    (tmp_path / "bad.json").write_text(json.dumps(bad))
    assert main(["sample", "--score", str(tmp_path / "bad.json"), "--n", "5", "--steps", "20",
                 "--out", str(tmp_path / "s.csv")]) == 3
    assert not (tmp_path / "s.csv").exists()


def test_module_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "genhyper", "synth-gen", "--n", "2", "--out", str(tmp_path / "d")],
                         capture_output=True, text=True)
    assert out.returncode == 0 and "wrote 2" in out.stdout
    out = subprocess.run([sys.executable, "-m", "genhyper", "synth-gen", "--n", "-1", "--out", str(tmp_path / "d")],
                         capture_output=True, text=True)
    assert out.returncode == 2 and out.stderr.startswith("error:")
