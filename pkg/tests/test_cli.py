import json

import pytest

from pbmrc.cli import RunConfig, ConfigError, main, parse_overrides
from pbmrc.synthetic import write_desk_data


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    return write_desk_data(tmp_path_factory.mktemp("desk"))


@pytest.fixture(scope="module")
def trained(desk, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--config", desk["config"], "--out", str(out), "--max-epochs", "1"]) == 0
    return out


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_parse_overrides():
    assert parse_overrides(["--max-epochs", "3", "--thresholds=[0.4,0.5,0.6]", "--out", "x"]) == {
        "max_epochs": 3, "thresholds": [0.4, 0.5, 0.6], "out": "x"}
    with pytest.raises(ConfigError):
        parse_overrides(["--dangling"])
    with pytest.raises(ConfigError):
        parse_overrides(["positional"])


def test_runconfig_rejects_unknown_keys():
    with pytest.raises(ConfigError, match="nope"):
        RunConfig.from_flat({"nope": 1})
    rc = RunConfig.from_flat({"hidden_size": 16, "num_heads": 2, "max_epochs": 2, "vocab": "v"})
    assert rc.encoder == {"hidden_size": 16, "num_heads": 2} and rc.train == {"max_epochs": 2}


def test_train_writes_three_files(trained):
    assert sorted(p.name for p in trained.iterdir()) == ["checkpoint.pbmrc", "config.json", "epoch_log.jsonl"]
    lines = (trained / "epoch_log.jsonl").read_text().splitlines()
    assert len(lines) == 1 and json.loads(lines[0])["epoch"] == 1


def test_resolved_config_reproduces_run(trained, tmp_path, capsys):
    code, _, _ = run(capsys, "train", "--config", str(trained / "config.json"), "--out", str(tmp_path))
    assert code == 0
    for name in ("checkpoint.pbmrc", "epoch_log.jsonl"):
        assert (tmp_path / name).read_bytes() == (trained / name).read_bytes()


def test_freeze_requires_soft(desk, tmp_path, capsys):
    code, out, err = run(capsys, "train", "--config", desk["config"], "--out", str(tmp_path),
                         "--freeze", "prompt_only", "--prompt-mode", "hard")
    assert code == 1 and "soft" in err and out == ""


def test_unknown_override_and_missing_path(desk, tmp_path, capsys):
    assert run(capsys, "train", "--config", desk["config"], "--out", str(tmp_path), "--bogus", "1")[0] == 1
    code, _, err = run(capsys, "train", "--config", desk["config"], "--out", str(tmp_path),
                       "--vocab", str(tmp_path / "missing.txt"))
    assert code == 1 and "missing.txt" in err


def test_evaluate_empty_split(desk, trained, tmp_path, capsys):
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    code, out, _ = run(capsys, "evaluate", "--config", desk["config"], "--checkpoint",
                       str(trained / "checkpoint.pbmrc"), "--corpus", str(empty))
    assert code == 0 and out == "P=0.0000 R=0.0000 F1=0.0000\n"


def test_evaluate_writes_report(desk, trained, tmp_path, capsys):
    rep = tmp_path / "report.json"
    code, out, _ = run(capsys, "evaluate", "--config", desk["config"], "--checkpoint",
                       str(trained / "checkpoint.pbmrc"), "--out", str(rep))
    assert code == 0 and out.startswith("P=")
    assert set(json.loads(rep.read_text())) == {"per_label", "micro", "macro", "totals"}


def test_predict_outputs_standoff(desk, trained, capsys):
    code, out, _ = run(capsys, "predict", "--config", desk["config"], "--checkpoint",
                       str(trained / "checkpoint.pbmrc"))
    assert code == 0 and len(out.splitlines()) == 40
    assert json.loads(out.splitlines()[0])["id"] == "syn000"


def test_predict_hidden_size_mismatch(desk, trained, capsys):
    code, out, err = run(capsys, "predict", "--config", desk["config"], "--checkpoint",
                         str(trained / "checkpoint.pbmrc"), "--hidden-size", "64")
    assert code == 1 and "shape mismatch" in err and out == ""


def test_io_error_exit_code(desk, trained, tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    code, _, _ = run(capsys, "evaluate", "--config", desk["config"], "--checkpoint",
                     str(trained / "checkpoint.pbmrc"), "--out", str(blocker / "sub" / "r.json"))
    assert code == 2


def test_convert_bio_to_standoff(tmp_path, capsys):
    bio = tmp_path / "s.bio"
    bio.write_text("Aspirin\tB-Drug\ncauses\tO\nnausea\tB-ADR\n\n")
    code, out, _ = run(capsys, "convert", "--corpus", str(bio), "--to", "standoff")
    assert code == 0
    assert [json.loads(l) for l in out.splitlines()] == [{
        "id": "s1", "text": "Aspirin causes nausea",
        "entities": [{"start": 0, "end": 7, "label": "Drug"}, {"start": 15, "end": 21, "label": "ADR"}]}]


def test_convert_to_instances(tmp_path, capsys):
    src = tmp_path / "s.jsonl"
    src.write_text('{"id":"s1","text":"Aspirin causes nausea.","entities":[{"start":0,"end":7,"label":"Drug"},'
                   '{"start":15,"end":21,"label":"ADR"}]}\n')
    code, _, err = run(capsys, "convert", "--corpus", str(src), "--to", "instances")
    assert code == 1 and "--templates" in err
    tpl = tmp_path / "t.json"
    tpl.write_text('{"Drug": "find drugs", "ADR": "find adverse reactions"}')
    out_file = tmp_path / "inst.jsonl"
    code, out, _ = run(capsys, "convert", "--corpus", str(src), "--to", "instances", "--templates", str(tpl),
                       "--out", str(out_file))
    assert code == 0 and json.loads(out)["instances"] == 2
    assert len(out_file.read_text().splitlines()) == 2


def test_convert_reports_malformed_input(tmp_path, capsys):
    src = tmp_path / "bad.jsonl"
    src.write_text('{"id":"s1","text":"abc","entities":[{"start":2,"end":1,"label":"X"}]}\n')
    code, _, err = run(capsys, "convert", "--corpus", str(src), "--to", "bio")
    assert code == 1 and "end" in err


def test_lint_templates(desk, tmp_path, capsys):
    code, out, _ = run(capsys, "lint-templates", "--corpus", desk["corpus"], "--templates", desk["templates"])
    assert code == 0 and json.loads(out)["missing"] == []
    partial = tmp_path / "t.json"
    partial.write_text('{"Drug": "find drugs", "Extra": "find drugs"}')
    code, out, _ = run(capsys, "lint-templates", "--corpus", desk["corpus"], "--templates", str(partial))
    rep = json.loads(out)
    assert code == 1 and rep["missing"] == ["ADR"] and rep["unused"] == ["Extra"]
    assert rep["duplicates"] == [["Drug", "Extra"]]


def test_gradcheck_command(capsys):
    code, out, _ = run(capsys, "gradcheck", "--preset", "desk")
    assert code == 0 and out.splitlines()[-1].startswith("PASS")
    assert any("soft_prompt.ADR" in line for line in out.splitlines())


def test_gradcheck_failure_exit_code(capsys):
    # an impossible tolerance makes every non-trivial group fail
    code, out, _ = run(capsys, "gradcheck", "--gradcheck-tolerance", "-1", "--gradcheck-coords", "2")
    assert code == 4 and out.splitlines()[-1].startswith("FAIL")


def test_nonfinite_exit_code(desk, tmp_path, capsys, monkeypatch):
    import pbmrc.model as M
    from pbmrc import tensor as T
    monkeypatch.setattr(M, "end_head_logits", lambda E, nodes: T.scale(M._linear(E, nodes, "head.end"), float("nan")))
    code, _, err = run(capsys, "train", "--config", desk["config"], "--out", str(tmp_path), "--max-epochs", "1")
    assert code == 3 and "non-finite" in err
