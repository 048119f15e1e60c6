import json
import re

import pytest

from stedr import checkpoint
from stedr.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, build_parser, execute

TINY = ["--max-epochs", "2", "--hidden", "50", "--batch-size", "64"]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def dataset(workdir):
    path = workdir / "a.jsonl"
    assert execute(["gen", "--generator", "a", "--n", "1000", "--seed", "7", "--out", str(path)]) == 0
    return path


@pytest.fixture(scope="module")
def trained(workdir, dataset):
    cfg = workdir / "cfg.json"
    cfg.write_text(json.dumps({"max_epochs": 2, "hidden": 50, "seed": 3}))
    paths = [workdir / "m1.ckpt", workdir / "m2.ckpt"]
    for p in paths:
        assert execute(["train", "--data", str(dataset), "--config", str(cfg), "--out", str(p)]) == 0
    return cfg, paths


def test_gen_writes_one_line_per_sample(dataset):
    assert len(dataset.read_text().splitlines()) == 1000
    manifest = json.loads((dataset.parent / "a.jsonl.manifest.json").read_text())
    assert manifest["command"] == "gen" and manifest["seed"] == 7
    assert str(dataset) in manifest["outputs"]


def test_gen_is_idempotent(workdir, dataset):
    again = workdir / "again.jsonl"
    execute(["gen", "--generator", "a", "--n", "1000", "--seed", "7", "--out", str(again)])
    assert again.read_bytes() == dataset.read_bytes()


def test_train_twice_gives_identical_checkpoints(trained):
    _, (a, b) = trained
    assert checkpoint.file_digest(a) == checkpoint.file_digest(b)
    assert (a.parent / "m1.ckpt.history.json").is_file()


def test_flags_override_config_file(workdir, dataset, trained):
    cfg, _ = trained
    out = workdir / "m3.ckpt"
    assert execute(["train", "--data", str(dataset), "--config", str(cfg), "--hidden", "100",
                    "--seed", "4", "--out", str(out)]) == 0
    manifest = json.loads((workdir / "m3.ckpt.manifest.json").read_text())
    assert manifest["config"]["hidden"] == 100 and manifest["config"]["max_epochs"] == 2
    assert manifest["config"]["seed"] == 4 and manifest["config_path"] == str(cfg)


def test_eval_reports_pehe(trained, dataset, capsys):
    _, (model, _) = trained
    capsys.readouterr()
    assert execute(["eval", "--model", str(model), "--data", str(dataset)]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["pehe"] >= 0
    for key in ("eps_ate", "v_within", "v_across", "factual_mse"):
        assert key in report
    assert json.loads((model.parent / "m1.ckpt.metrics.json").read_text())["pehe"] == report["pehe"]


def test_eval_on_test_split(trained, dataset, capsys):
    _, (model, _) = trained
    capsys.readouterr()
    assert execute(["eval", "--model", str(model), "--data", str(dataset), "--split", "test"]) == 0
    assert json.loads(capsys.readouterr().out)["n"] == 200


def _subcommands():
    parser = build_parser()
    action = next(a for a in parser._actions if a.dest == "command")
    return action.choices


@pytest.mark.parametrize("name", ["gen", "train", "eval", "emulate", "screen", "report"])
def test_help_documents_every_flag(name, capsys):
    assert execute([name, "--help"]) == EXIT_OK
    text = capsys.readouterr().out
    for action in _subcommands()[name]._actions:
        for flag in action.option_strings:
            assert re.search(re.escape(flag) + r"\b", text), flag
        assert action.help, action.dest


def test_top_level_help(capsys):
    assert execute(["--help"]) == EXIT_OK
    assert "emulate" in capsys.readouterr().out


@pytest.mark.parametrize("argv", [
    [],
    ["frobnicate"],
    ["gen", "--generator", "a", "--n", "10", "--out", "x.jsonl", "--bogus"],
    ["gen", "--generator", "a", "--out", "x.jsonl"],
    ["train", "--data", "/nonexistent/a.jsonl", "--out", "m.ckpt"],
    ["eval", "--model", "/nonexistent/m.ckpt", "--data", "/nonexistent/a.jsonl"],
])
def test_usage_errors_exit_2_with_one_line(argv, capsys, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert execute(argv) == EXIT_CONFIG
    err = capsys.readouterr().err.strip()
    assert err
    if argv:
        assert len(err.splitlines()) == 1


def test_invalid_config_value_exits_2(dataset, tmp_path, capsys):
    out = tmp_path / "m.ckpt"
    assert execute(["train", "--data", str(dataset), "--alpha", "0.9", "--out", str(out)]) == EXIT_CONFIG
    assert not out.exists()


def test_runtime_failure_exits_3(tmp_path, capsys):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"garbage")
    data = tmp_path / "d.jsonl"
    execute(["gen", "--generator", "a", "--n", "20", "--out", str(data)])
    assert execute(["eval", "--model", str(bad), "--data", str(data)]) == EXIT_RUNTIME
    assert "failed" in capsys.readouterr().err


@pytest.fixture(scope="module")
def claims(workdir):
    cfg = workdir / "claims_cfg.json"
    cfg.write_text(json.dumps({"n_drugs": 4, "n_classes": 2}))
    path = workdir / "claims.jsonl"
    assert execute(["gen", "--generator", "claims", "--n", "1500", "--seed", "2",
                    "--config", str(cfg), "--out", str(path)]) == 0
    return path


def test_claims_oracle_written_to_sidecar(claims):
    assert (claims.parent / "claims.jsonl.oracle.jsonl").is_file()
    assert "latent_subgroup" not in claims.read_text()


def test_emulate_and_report(workdir, claims):
    out = workdir / "trial"
    assert execute(["emulate", "--claims", str(claims), "--drug", "0", "--min-cases", "40",
                    "--out", str(out), *TINY[:2]]) == 0
    trial = json.loads((out / "trial.json").read_text())
    assert len(trial["subgroup_ate"]) == 3
    for name in ("model.ckpt", "attention.csv", "manifest.json"):
        assert (out / name).is_file()
    figs = workdir / "figs"
    assert execute(["report", "--heatmap", str(out / "attention.csv"), "--out", str(figs),
                    "--format", "svg"]) == 0
    assert (figs / "attention.svg").stat().st_size > 0


def test_emulate_ineligible_drug_exits_2(workdir, claims, capsys):
    assert execute(["emulate", "--claims", str(claims), "--drug", "3", "--min-cases", "100000",
                    "--out", str(workdir / "none")]) == EXIT_CONFIG


def test_screen_digest_stable_across_workers(workdir, claims, monkeypatch):
    digests = []
    for workers in ("1", "2"):
        out = workdir / f"screen{workers}"
        assert execute(["screen", "--claims", str(claims), "--drugs", "0,1", "--n-trials", "2",
                        "--min-cases", "40", "--workers", workers, "--out", str(out),
                        *TINY[:4]]) == 0
        digests.append((out / "screen.digest").read_text())
    assert digests[0] == digests[1]


def test_report_forest_plots(tmp_path):
    screen = tmp_path / "screen"
    screen.mkdir()
    (screen / "drug_reports.csv").write_text(
        "drug,subgroup,mean,low,up,p,p_adj,verdict\n"
        "0,overall,-0.08,-0.12,-0.04,0.001,0.004,population_candidate\n"
        "0,subgroup_1,-0.1,-0.15,-0.05,0.001,0.004,population_candidate\n"
        "1,overall,nan,nan,nan,1.0,1.0,unbalanced\n")
    figs = tmp_path / "figs"
    assert execute(["report", "--screen", str(screen), "--out", str(figs)]) == EXIT_OK
    assert sorted(p.name for p in figs.glob("*.png")) == ["forest_drug0.png"]
    first = (figs / "forest_drug0.png").read_bytes()
    execute(["report", "--screen", str(screen), "--out", str(figs)])
    assert (figs / "forest_drug0.png").read_bytes() == first


def test_report_without_estimates_exits_2(tmp_path, capsys):
    (tmp_path / "drug_reports.csv").write_text(
        "drug,subgroup,mean,low,up,p,p_adj,verdict\n1,overall,nan,nan,nan,1.0,1.0,unbalanced\n")
    assert execute(["report", "--screen", str(tmp_path), "--out", str(tmp_path / "f")]) == EXIT_CONFIG
    assert "finite estimate" in capsys.readouterr().err


def test_screen_rejects_unknown_drug(workdir, claims):
    assert execute(["screen", "--claims", str(claims), "--drugs", "99", "--n-trials", "2",
                    "--out", str(workdir / "s")]) == EXIT_CONFIG
