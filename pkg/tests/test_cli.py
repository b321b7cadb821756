import json
import os
import subprocess
import sys

import numpy as np
import pytest

from pte import checkpoint as ckpt
from pte import cli
from pte.partition import GENERAL
from test_pipeline import tiny_config


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(tiny_config().to_dict()))
    return str(path)


def _run(args, capsys):
    code = cli.main(args)
    out, err = capsys.readouterr()
    return code, out, err


class TestParser:
    @pytest.mark.parametrize("cmd", ["gen-data", "train-general", "score", "prune", "distill", "expand",
                                     "finetune", "evaluate", "pipeline", "sweep", "multi-domain", "show-config"])
    def test_subcommands_exist(self, cmd):
        assert cli.build_parser().parse_args([cmd]).command == cmd

    @pytest.mark.parametrize("name", ["ft", "mol", "ewc", "random", "selective"])
    def test_baselines(self, name):
        assert cli.build_parser().parse_args(["baseline", name]).name == name

    def test_globals_before_or_after(self):
        p = cli.build_parser()
        a = p.parse_args(["--seed", "3", "--out-dir", "x", "prune"])
        b = p.parse_args(["prune", "--seed", "3", "--out-dir", "x"])
        assert (a.seed, a.out_dir) == (b.seed, b.out_dir) == (3, "x")

    def test_unknown_baseline_rejected(self):
        with pytest.raises(SystemExit):
            cli.build_parser().parse_args(["baseline", "adapter"])


class TestCommands:
    def test_show_config_applies_overrides(self, tmp_path, capsys):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"finetune": {"steps": 7}, "beam_size": 2}))
        code, out, _ = _run(["show-config", "--preset", "toy", "--config", str(path), "--seed", "5"], capsys)
        assert code == 0
        d = json.loads(out)
        assert d["finetune"]["steps"] == 7
        assert d["finetune"]["lr"] == 1e-3          # rest of the toy preset kept
        assert (d["beam_size"], d["seed"]) == (2, 5)

    def test_stages_then_evaluate(self, tmp_path, capsys, config_file):
        out = str(tmp_path / "run")
        for stage in cli.STAGE_COMMANDS:
            code, _, err = _run([stage, "--config", config_file, "--out-dir", out], capsys)
            assert code == 0, err
        assert os.path.exists(os.path.join(out, "table.txt"))

    def test_pipeline_prints_table(self, tmp_path, capsys, config_file):
        code, out, _ = _run(["pipeline", "--config", config_file, "--out-dir", str(tmp_path), "--baselines", "ft"],
                            capsys)
        assert code == 0
        lines = out.splitlines()
        assert lines[0].split()[0] == "System"
        assert [l.split("  ")[0] for l in lines[1:]] == ["General model", "Pruned + KD", "Fine-tuning", "PTE"]

    def test_sweep_and_baseline(self, tmp_path, capsys, config_file):
        out = str(tmp_path)
        assert _run(["pipeline", "--config", config_file, "--out-dir", out], capsys)[0] == 0
        code, text, _ = _run(["sweep", "--knob", "ewc_alpha", "--values", "0,1", "--config", config_file,
                              "--out-dir", out], capsys)
        assert code == 0
        assert [p["ewc_alpha"] for p in json.loads(text)["points"]] == [0.0, 1.0]
        assert _run(["baseline", "random", "--config", config_file, "--out-dir", out], capsys)[0] == 0


class TestExitCodes:
    def test_config_error_is_3(self, tmp_path, capsys):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"prune_ratio": 1.5}))
        code, _, err = _run(["show-config", "--config", str(path)], capsys)
        assert code == 3
        assert "config error" in err

    def test_bad_values_is_3(self, tmp_path, capsys, config_file):
        code, _, _ = _run(["sweep", "--values", "a,b", "--config", config_file, "--out-dir", str(tmp_path)], capsys)
        assert code == 3

    def test_missing_input_is_1(self, tmp_path, capsys, config_file):
        code, _, err = _run(["prune", "--config", config_file, "--out-dir", str(tmp_path)], capsys)
        assert code == 1
        assert "missing" in err

    def test_invariant_violation_is_2(self, tmp_path, capsys, config_file):
        out = str(tmp_path)
        for stage in ("gen-data", "train-general", "score", "prune", "distill"):
            assert _run([stage, "--config", config_file, "--out-dir", out], capsys)[0] == 0
        path = os.path.join(out, "checkpoints", "distilled.pte")
        c = ckpt.load(path)
        k = "dec.0.ffn.fc1.weight"
        c.model.params[k].data[c.partition.labels[k] == GENERAL] *= 2.0
        ckpt.save(path, c.model, c.partition, c.meta)
        code, _, err = _run(["expand", "--config", config_file, "--out-dir", out], capsys)
        assert code == 2
        assert "invariant" in err


def test_module_entry_point_sets_threads(tmp_path):
    code = ("import os, sys; from pte import cli; rc = cli.main(['--threads', '1', 'show-config']); "
            "sys.stderr.write(os.environ['OMP_NUM_THREADS']); sys.exit(rc)")
    res = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True)
    assert res.returncode == 0
    assert res.stderr == "1"
    res = subprocess.run([sys.executable, "-m", "pte", "show-config"], capture_output=True, text=True)
    assert res.returncode == 0
    assert json.loads(res.stdout)["beam_size"] == 4
