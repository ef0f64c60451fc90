import json

import numpy as np
import pytest

from infinilab import cli
from infinilab import config as C
from infinilab import model as M
from infinilab import telemetry as TM
from infinilab.checkpoint import save_checkpoint
from infinilab.tensor import Tensor

TINY = ["layers=1", "d_model=16", "heads=2", "d_ff=32", "seq_len=32", "batch_size=2",
        "corpus_documents=60", "warmup_steps=1", "snapshot_every=1"]


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture
def trained(tmp_path):
    run_dir = tmp_path / "run"
    assert run("train", "--config", "desk_pretrain", "--run-dir", run_dir, "--deterministic",
               "--override", *TINY, "steps=4", "checkpoint_every=2") == 0
    return run_dir


class TestHelp:
    @pytest.mark.parametrize("argv", [["--help"], ["train", "--help"], ["eval-passkey", "--help"]])
    def test_lists_every_config_field(self, argv, capsys):
        with pytest.raises(SystemExit) as exc:
            cli.main(argv)
        assert exc.value.code == 0
        text = capsys.readouterr().out
        for name in C.config_fields():
            assert name in text


class TestErrors:
    def test_unknown_field_names_it(self, tmp_path, capsys):
        with pytest.raises(SystemExit) as exc:
            run("train", "--run-dir", tmp_path, "--override", "train.learning_rat=1")
        assert exc.value.code == 2
        assert "learning_rat" in capsys.readouterr().err

    def test_invalid_value_names_field(self, tmp_path, capsys):
        with pytest.raises(SystemExit):
            run("train", "--run-dir", tmp_path, "--override", "train.mode=sideways")
        assert "train.mode" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path, capsys):
        with pytest.raises(SystemExit) as exc:
            run("train", "--config", tmp_path / "nope.json", "--run-dir", tmp_path)
        assert exc.value.code == 2

    def test_bad_json_field(self, tmp_path, capsys):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"train": {"stepz": 3}}))
        with pytest.raises(SystemExit):
            run("train", "--config", path, "--run-dir", tmp_path)
        assert "stepz" in capsys.readouterr().err

    def test_missing_checkpoint(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            run("eval-passkey", "--run-dir", tmp_path)
        assert exc.value.code == 2


class TestWorkflow:
    def test_train_writes_run_layout(self, trained):
        assert (trained / "config.resolved").exists()
        resolved = C.RunConfig.from_dict(json.loads((trained / "config.resolved").read_text()))
        assert resolved.model.d_model == 16 and resolved.train.steps == 4
        assert len(TM.read_telemetry(trained / "telemetry.csv")) == 4
        assert {p.name for p in (trained / "checkpoints").iterdir()} == {"step_000002.ckpt", "step_000004.ckpt", "final.ckpt"}

    def test_eval_desk_grid_populates_csv(self, trained, capsys):
        assert run("eval-passkey", "--run-dir", trained, "--grid", "desk", "--samples-per-cell", 1) == 0
        lines = (trained / "results" / "passkey.csv").read_text().strip().splitlines()
        assert lines[0] == "context_length,depth,accuracy,n"
        assert len(lines) == 1 + 5 * 5

    def test_random_checkpoint_low_accuracy_exits_zero(self, tmp_path):
        run_dir = tmp_path / "fresh"
        assert run("train", "--run-dir", run_dir, "--override", *TINY, "steps=0") == 0
        assert run("eval-passkey", "--run-dir", run_dir, "--contexts", "64", "--samples-per-cell", 2) == 0
        text = (run_dir / "results" / "passkey.csv").read_text()
        assert all(float(l.split(",")[2]) == 0.0 for l in text.strip().splitlines()[1:])

    def test_eval_is_deterministic(self, trained, tmp_path):
        for out in ("a", "b"):
            run("eval-passkey", "--run-dir", trained, "--contexts", "64,128", "--samples-per-cell", 2,
                "--out", tmp_path / out, "--deterministic")
        assert (tmp_path / "a" / "passkey.csv").read_bytes() == (tmp_path / "b" / "passkey.csv").read_bytes()

    def test_resume_keeps_one_row_per_step(self, trained):
        # pretend the run crashed after step 2, then continue it
        assert run("train", "--run-dir", trained, "--resume", trained / "checkpoints" / "step_000002.ckpt",
                   "--deterministic") == 0
        assert [r["step"] for r in TM.read_telemetry(trained / "telemetry.csv")] == [1, 2, 3, 4]

    def test_finetune_from_checkpoint(self, trained, tmp_path):
        ft = tmp_path / "ft"
        assert run("finetune", "--init", trained / "checkpoints" / "final.ckpt", "--run-dir", ft,
                   "--override", "steps=2", "batch_size=2", "warmup_steps=1", "finetune_contexts=40") == 0
        resolved = C.RunConfig.from_dict(json.loads((ft / "config.resolved").read_text()))
        assert resolved.train.mode == "finetune" and resolved.model.d_model == 16
        assert resolved.train.base_lr == C.load_config("desk_finetune").train.base_lr

    def test_finetune_needs_init(self, tmp_path):
        with pytest.raises(SystemExit):
            run("finetune", "--run-dir", tmp_path)

    def test_analyze_balance(self, trained):
        assert run("analyze-balance", "--run-dir", trained) == 0
        out = trained / "results" / "balance"
        for name in ("alpha_histogram.csv", "layer_preference.csv", "alpha_heatmap.csv", "mean_alpha.csv"):
            assert (out / name).exists()
        assert len((out / "mean_alpha.csv").read_text().strip().splitlines()) == 1 + 4

    def test_generate_data(self, tmp_path):
        assert run("generate-data", "--run-dir", tmp_path, "--override", "corpus_documents=20",
                   "--finetune-samples", 5, "--samples-per-cell", 1) == 0
        names = {p.name for p in (tmp_path / "data").iterdir()}
        assert names == {"corpus.jsonl", "finetune.jsonl", "eval_grid.jsonl"}
        assert len((tmp_path / "data" / "eval_grid.jsonl").read_text().splitlines()) == 25

    def test_generate_data_deterministic(self, tmp_path):
        for d in ("a", "b"):
            run("generate-data", "--run-dir", tmp_path / d, "--seed", 3, "--override", "corpus_documents=20",
                "--finetune-samples", 5, "--samples-per-cell", 1)
        for name in ("corpus.jsonl", "finetune.jsonl", "eval_grid.jsonl"):
            assert (tmp_path / "a" / "data" / name).read_bytes() == (tmp_path / "b" / "data" / name).read_bytes()


def test_inspect_full_size_checkpoint(tmp_path, capsys):
    cfg = M.full_config()
    weights = {n: Tensor(np.zeros(s, dtype=np.float32)) for n, s in M.weight_shapes(cfg).items()}
    path = tmp_path / "full.ckpt"
    save_checkpoint(path, cfg, weights, meta={"step": 0})
    del weights
    assert run("inspect-checkpoint", path) == 0
    out = capsys.readouterr().out
    summary = json.loads(out.strip().splitlines()[-1])
    assert summary["config"]["layers"] == 12 and summary["config"]["d_model"] == 1024
    assert summary["parameters"] == M.count_parameters(cfg)
    assert "layers 12  d_model 1024" in out
