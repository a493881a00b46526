"""Command-line surface: every subcommand end to end on a tiny dataset."""

import json
import logging

import pytest

from mmdial import cli


TINY_TRAIN = ["--d-model", "8", "--n-heads", "2", "--d-ff", "16", "--h-len", "4",
              "--epochs", "1", "--batch-size", "16", "--seed", "0"]


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("ds") / "data"
    rc = cli.main(["gen-data", "--out", str(out), "--n-samples", "60",
                   "--vocab-size", "64", "--n-keywords", "6",
                   "--n-attributes", "5", "--d-img", "8", "--max-images", "3",
                   "--seed", "5"])
    assert rc == 0
    return out


@pytest.fixture(scope="module")
def run_dir(dataset_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    rc = cli.main(["train", "--data", str(dataset_dir), "--out", str(out),
                   *TINY_TRAIN])
    assert rc == 0
    return out


def feed_stdin(monkeypatch, lines):
    it = iter(lines)

    def fake_input(prompt=""):
        try:
            return next(it)
        except StopIteration:
            raise EOFError

    monkeypatch.setattr("builtins.input", fake_input)


class TestParsing:
    def test_unknown_subcommand_fails_with_usage(self, capsys):
        assert cli.main(["frobnicate"]) != 0
        assert "usage" in capsys.readouterr().err

    def test_unknown_flag_fails(self, capsys):
        assert cli.main(["gradcheck", "--warp-speed", "9"]) != 0

    def test_missing_required_flag_fails(self, capsys):
        assert cli.main(["gen-data", "--n-samples", "5"]) != 0

    def test_no_subcommand_fails(self):
        assert cli.main([]) != 0


class TestGenData:
    def test_writes_dataset_layout(self, dataset_dir):
        for name in ("train.jsonl", "valid.jsonl", "test.jsonl",
                     "vocab.json", "meta.json"):
            assert (dataset_dir / name).exists()

    def test_prints_split_sizes(self, dataset_dir, tmp_path, capsys):
        rc = cli.main(["gen-data", "--out", str(tmp_path / "d2"),
                       "--n-samples", "30", "--vocab-size", "64",
                       "--n-keywords", "6", "--n-attributes", "5",
                       "--d-img", "8", "--seed", "1"])
        out = capsys.readouterr().out
        assert rc == 0
        assert "train" in out and "valid" in out and "test" in out

    def test_same_seed_is_reproducible(self, dataset_dir, tmp_path):
        args = ["gen-data", "--n-samples", "60", "--vocab-size", "64",
                "--n-keywords", "6", "--n-attributes", "5", "--d-img", "8",
                "--max-images", "3", "--seed", "5"]
        assert cli.main([*args, "--out", str(tmp_path / "again")]) == 0
        a = (dataset_dir / "train.jsonl").read_bytes()
        b = (tmp_path / "again" / "train.jsonl").read_bytes()
        assert a == b


class TestTrain:
    def test_artifacts_written(self, run_dir):
        assert (run_dir / "best.ckpt").exists()
        assert (run_dir / "last.ckpt").exists()
        lines = (run_dir / "metrics.jsonl").read_text().splitlines()
        assert len(lines) == 1
        assert {"step", "loss", "bleu4", "nist"} <= json.loads(lines[0]).keys()

    def test_flag_overrides_config_file(self, dataset_dir, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"lr": 0.005, "epochs": 1, "d_model": 8,
                                   "n_heads": 2, "d_ff": 16, "h_len": 4,
                                   "batch_size": 16}))
        rc = cli.main(["train", "--data", str(dataset_dir),
                       "--out", str(tmp_path / "o"), "--config", str(cfg),
                       "--lr", "0.002"])
        assert rc == 0
        line = next(l for l in capsys.readouterr().out.splitlines()
                    if l.startswith("config:"))
        effective = json.loads(line.removeprefix("config:"))
        assert effective["lr"] == 0.002       # flag wins over file
        assert effective["epochs"] == 1       # file field without flag survives

    def test_dataset_owns_coupled_fields(self, dataset_dir, tmp_path, capsys,
                                         caplog):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"vocab_size": 999, "epochs": 1,
                                   "d_model": 8, "n_heads": 2, "d_ff": 16,
                                   "h_len": 4, "batch_size": 16}))
        with caplog.at_level(logging.WARNING, logger="mmdial.cli"):
            rc = cli.main(["train", "--data", str(dataset_dir),
                           "--out", str(tmp_path / "o"), "--config", str(cfg)])
        assert rc == 0
        line = next(l for l in capsys.readouterr().out.splitlines()
                    if l.startswith("config:"))
        assert json.loads(line.removeprefix("config:"))["vocab_size"] == 64
        assert "vocab_size" in caplog.text

    def test_paper_scale_profile(self):
        assert cli.apply_paper_scale({}) == {
            "d_model": 512, "d_ff": 2048, "n_layers": 2, "n_heads": 8,
            "batch_size": 150, "epochs": 10, "lr": 0.0004, "warmup_steps": 0}
        assert cli.apply_paper_scale({"d_model": 64})["d_model"] == 64


class TestEval:
    def test_oracle_scores_perfect_bleu4(self, dataset_dir, capsys):
        rc = cli.main(["eval", "--data", str(dataset_dir), "--oracle",
                       "--split", "test"])
        out = capsys.readouterr().out
        assert rc == 0
        bleu4 = next(l for l in out.splitlines() if l.startswith("BLEU-4"))
        assert "100.00" in bleu4

    def test_checkpoint_eval_prints_table(self, dataset_dir, run_dir, capsys):
        rc = cli.main(["eval", "--data", str(dataset_dir),
                       "--ckpt", str(run_dir / "best.ckpt")])
        out = capsys.readouterr().out
        assert rc == 0
        for label in ("BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4", "NIST", "samples"):
            assert label in out

    def test_eval_needs_ckpt_or_oracle(self, dataset_dir, capsys):
        rc = cli.main(["eval", "--data", str(dataset_dir)])
        assert rc == 1
        assert "error" in capsys.readouterr().err


class TestGenerate:
    def test_writes_responses_file(self, dataset_dir, run_dir, tmp_path, capsys):
        out_file = tmp_path / "responses.jsonl"
        rc = cli.main(["generate", "--data", str(dataset_dir),
                       "--ckpt", str(run_dir / "best.ckpt"),
                       "--out", str(out_file), "--split", "valid"])
        assert rc == 0
        lines = [json.loads(l) for l in out_file.read_text().splitlines()]
        assert lines
        for row in lines:
            assert {"index", "response", "response_words", "reference"} <= row.keys()
        # greedy decoding is deterministic, so a second run matches exactly
        again = tmp_path / "responses2.jsonl"
        cli.main(["generate", "--data", str(dataset_dir),
                  "--ckpt", str(run_dir / "best.ckpt"),
                  "--out", str(again), "--split", "valid"])
        assert again.read_bytes() == out_file.read_bytes()


class TestChat:
    def test_replies_and_logs_history_seed(self, dataset_dir, run_dir,
                                           monkeypatch, capsys, caplog):
        feed_stdin(monkeypatch, ["hello there @red", ":quit"])
        with caplog.at_level(logging.INFO, logger="mmdial.cli"):
            rc = cli.main(["chat", "--data", str(dataset_dir),
                           "--ckpt", str(run_dir / "best.ckpt")])
        assert rc == 0
        assert "bot>" in capsys.readouterr().out
        assert "history seed" in caplog.text

    def test_unknown_tag_reported(self, dataset_dir, run_dir, monkeypatch,
                                  capsys):
        feed_stdin(monkeypatch, ["@notanattribute hi"])
        rc = cli.main(["chat", "--data", str(dataset_dir),
                       "--ckpt", str(run_dir / "best.ckpt")])
        assert rc == 0
        assert "unknown attribute tag" in capsys.readouterr().out

    def test_reset_clears_context(self, dataset_dir, run_dir, monkeypatch,
                                  capsys):
        feed_stdin(monkeypatch, ["hi", ":reset", "hi again", ":quit"])
        rc = cli.main(["chat", "--data", str(dataset_dir),
                       "--ckpt", str(run_dir / "best.ckpt")])
        assert rc == 0
        assert "(context cleared)" in capsys.readouterr().out


class TestGradcheckCommand:
    def test_small_model_passes(self, capsys):
        rc = cli.main(["gradcheck", "--d-model", "8", "--n-layers", "1",
                       "--n-heads", "2", "--d-ff", "12", "--h-len", "2",
                       "--vocab-size", "12", "--d-img", "4"])
        out = capsys.readouterr().out
        assert rc == 0
        assert "PASS" in out
        assert "max rel err" in out


class TestAblationCommands:
    def test_pnet_sweep_prints_six_rows(self, dataset_dir, capsys):
        rc = cli.main(["ablate-pnet", "--data", str(dataset_dir),
                       "--seeds", "0", *TINY_TRAIN])
        out = capsys.readouterr().out
        assert rc == 0
        rows = [l for l in out.splitlines()
                if l and l[0].isdigit()]
        assert len(rows) == 6
        assert [r.split()[0] for r in rows] == ["0.0", "0.2", "0.4", "0.6",
                                                "0.8", "1.0"]

    def test_history_ablation_prints_summary(self, dataset_dir, capsys):
        rc = cli.main(["ablate-history", "--data", str(dataset_dir),
                       "--seeds", "0,1", *TINY_TRAIN])
        out = capsys.readouterr().out
        assert rc == 0
        assert "trained beats fixed in" in out
        rows = [l for l in out.splitlines() if l and l[0].isdigit()]
        assert len(rows) == 2
