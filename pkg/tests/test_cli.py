import json

import pytest

from delearn.cli import main


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.toml"
    cfg.write_text(
        "[train]\nsigma1 = 10\nsigma2 = 30\nmu_gopt = 10\nmu_val = 10\nl_rule = 0.01\n\n"
        "[generator]\npositive_fraction = 0.3\nnoise_row_rate = 0.2\n"
    )
    assert main(["gen-data", "--config", str(cfg), "--n", "40", "--seed", "3", "-o", str(root / "d")]) == 0
    return root, cfg


def test_gen_data_outputs_and_determinism(workdir, tmp_path):
    root, cfg = workdir
    for name in ("data.jsonl", "schema.json", "expert.rules", "manifest.json"):
        assert (root / "d" / name).is_file()
    assert main(["gen-data", "--config", str(cfg), "--n", "40", "--seed", "3", "-o", str(tmp_path)]) == 0
    assert (tmp_path / "data.jsonl").read_bytes() == (root / "d" / "data.jsonl").read_bytes()


def test_refuses_overwrite_without_force(workdir, capsys):
    root, cfg = workdir
    assert main(["gen-data", "--n", "10", "-o", str(root / "d")]) == 2
    assert "--force" in capsys.readouterr().err


def test_force_overwrites(tmp_path):
    args = ["gen-data", "--preset", "spe", "--n", "12", "-o", str(tmp_path)]
    assert main(args) == 0
    assert main(args + ["--force"]) == 0


def test_train_eval_explain_br(workdir, capsys):
    root, cfg = workdir
    data, out = root / "d", root / "run"
    assert main(["train", str(data), "--config", str(cfg), "-o", str(out)]) == 0
    assert "best snapshot" in capsys.readouterr().out
    assert (out / "best.json").is_file() and (out / "metrics.jsonl").is_file()

    assert main(["eval", str(out / "best.json"), str(data), "--json"]) == 0
    m = json.loads(capsys.readouterr().out)
    assert 0.0 <= m["accuracy"] <= 1.0

    assert main(["explain", str(out / "best.json"), str(data), "0"]) == 0
    assert "critical rows" in capsys.readouterr().out
    assert main(["explain", str(out / "best.json"), str(data), "999"]) == 2
    assert "unknown sample" in capsys.readouterr().err

    assert main(["br", str(data), "--json"]) == 0
    assert "recall" in json.loads(capsys.readouterr().out)


def test_train_restarts_and_flags(workdir, capsys):
    root, cfg = workdir
    out = root / "restarts"
    args = ["train", str(root / "d"), "--config", str(cfg), "-o", str(out), "--restarts", "2",
            "--no-assess", "--no-critical-loss", "--json"]
    assert main(args) == 0
    lines = [json.loads(l) for l in capsys.readouterr().out.splitlines()]
    assert "best_step" in lines[-1]
    assert (out / "run_0" / "best.json").is_file() and (out / "run_1" / "best.json").is_file()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["train"]["use_assess"] is False
    assert manifest["config"]["train"]["critical_weight"] == 0.0


def test_missing_inputs(tmp_path, capsys):
    assert main(["br", str(tmp_path / "nope")]) == 2
    assert main(["train", str(tmp_path / "nope"), "-o", str(tmp_path / "o")]) == 2
    bad = tmp_path / "bad.toml"
    bad.write_text("[oops]\n")
    assert main(["gen-data", "--config", str(bad), "-o", str(tmp_path / "g")]) == 2
