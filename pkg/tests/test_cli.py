import json
import subprocess
import sys

import numpy as np
import pytest

from concept_rrg.cli import CONFIG_DIR_ENV, main
from concept_rrg.corpus import read_pgm

TINY = dict(dim=8, align_heads=2, gen_d_model=16, gen_layers=1, gen_heads=2, batch_size=8, val_limit=4, epochs=1, max_len=64)


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--out", str(root / "corpus"), "--n", "40", "--seed", "3"]) == 0
    assert main(["build-bank", "--corpus", str(root / "corpus"), "--out", str(root / "bank.json")]) == 0
    (root / "train.json").write_text(json.dumps({**TINY, "corpus": "corpus", "bank": "bank.json"}))
    assert main(["train", "--config", str(root / "train.json"), "--out", str(root / "run")]) == 0
    return root


def test_help_and_usage_errors(capsys):
    assert main(["--help"]) == 0
    assert main(["train", "--help"]) == 0
    assert main([]) == 2
    assert main(["frobnicate"]) == 2
    assert main(["gen-data"]) == 2
    assert main(["train", "--out", "x"]) == 2


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "concept_rrg", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "gen-data" in proc.stdout


def test_pipeline_outputs(run_dir):
    assert (run_dir / "corpus" / "gen-data.resolved.json").exists()
    assert (run_dir / "bank.resolved.json").exists()
    for name in ("best.pt", "last.pt", "metrics.jsonl", "config.resolved.json"):
        assert (run_dir / "run" / name).exists()
    cfg = json.loads((run_dir / "run" / "config.resolved.json").read_text())
    assert cfg["gen_d_model"] == 16 and cfg["corpus"].endswith("corpus")


def test_eval(run_dir):
    out = run_dir / "eval" / "test.json"
    assert main(["eval", "--checkpoint", str(run_dir / "run" / "best.pt"), "--limit", "3", "--dump-reports", "--out", str(out)]) == 0
    rep = json.loads(out.read_text())
    assert rep["n_samples"] == 3 and 0 <= rep["bleu_4"] <= 1
    assert "localization" in rep["analysis"] and "gates" in rep["analysis"]
    assert len(json.loads((out.parent / "test.reports.json").read_text())) == 3
    assert (out.parent / "test.resolved.json").exists()


def test_generate_from_id_and_image(run_dir, capsys):
    ck = str(run_dir / "run" / "best.pt")
    out = run_dir / "gen" / "g.json"
    assert main(["generate", "--checkpoint", ck, "--input", "5", "--beam", "2", "--topk", "3", "--out", str(out)]) == 0
    side = json.loads(out.read_text())
    printed = capsys.readouterr().out.strip()
    assert side["report"] == printed and side["reference"]
    assert all(len(s["top"]) == 3 for s in side["steps"])
    img = next((run_dir / "corpus" / "images").glob("*.pgm"))
    assert main(["generate", "--checkpoint", ck, "--input", str(img)]) == 0
    assert main(["generate", "--checkpoint", ck, "--input", "not-an-id"]) == 2
    assert main(["generate", "--checkpoint", ck, "--input", "4000"]) == 1


def test_inspect_attn(run_dir):
    out = run_dir / "attn"
    assert main(["inspect-attn", "--checkpoint", str(run_dir / "run" / "best.pt"), "--sample", "2", "--out", str(out)]) == 0
    z = np.load(out / "attention.npz")
    np.testing.assert_allclose(z["attn_p"].sum(-1), 1.0, atol=1e-5)
    gates = json.loads((out / "gates.json").read_text())
    assert len(gates["pathology"]) == z["attn_p"].shape[2]
    heat = read_pgm(next(out.glob("pathology_00_*.pgm")))
    assert heat.shape == (64, 64) and heat.max() == 1.0


def test_runtime_errors_exit_one(run_dir, tmp_path, capsys):
    assert main(["build-bank", "--corpus", str(tmp_path / "missing"), "--out", str(tmp_path / "b.json")]) == 1
    assert "error [data]" in capsys.readouterr().err
    assert main(["eval", "--checkpoint", str(tmp_path / "none.pt"), "--out", str(tmp_path / "e.json")]) == 1
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"lr": -1.0}))
    args = ["train", "--config", str(bad), "--corpus", str(run_dir / "corpus"), "--bank", str(run_dir / "bank.json"), "--out", str(tmp_path / "r")]
    assert main(args) == 1
    assert "error [config]" in capsys.readouterr().err


def test_config_dir_env(run_dir, tmp_path, monkeypatch):
    cfg_dir = tmp_path / "configs"
    cfg_dir.mkdir()
    (cfg_dir / "train.json").write_text(json.dumps({**TINY, "corpus": str(run_dir / "corpus"), "bank": str(run_dir / "bank.json")}))
    monkeypatch.setenv(CONFIG_DIR_ENV, str(cfg_dir))
    assert main(["train", "--out", str(tmp_path / "r"), "--max-steps", "2", "--seed", "4"]) == 0
    cfg = json.loads((tmp_path / "r" / "config.resolved.json").read_text())
    assert cfg["seed"] == 4 and cfg["dim"] == 8
    (cfg_dir / "named.json").write_text(json.dumps({**TINY, "corpus": str(run_dir / "corpus"), "bank": str(run_dir / "bank.json")}))
    assert main(["train", "--config", "named.json", "--out", str(tmp_path / "r2"), "--max-steps", "1", "--no-fg"]) == 0
    assert json.loads((tmp_path / "r2" / "config.resolved.json").read_text())["use_fg"] is False


def test_ablate(run_dir):
    out = run_dir / "abl"
    args = ["ablate", "--config", str(run_dir / "train.json"), "--rows", "baseline", "full", "--seeds", "0", "--split", "val", "--out", str(out)]
    assert main(args) == 0
    data = json.loads((out / "ablation.json").read_text())
    assert [r["name"] for r in data["runs"]] == ["baseline", "full"]
    assert (out / "ablate.resolved.json").exists()
    assert main(["ablate", "--config", str(run_dir / "train.json"), "--rows", "nope", "--out", str(out)]) == 2
