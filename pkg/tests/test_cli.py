import json
from pathlib import Path

import numpy as np
import pytest
import yaml

from sefgan.cli import main
from sefgan.data import read_manifest, read_wav, write_wav

from conftest import DESK_CONFIG


def micro_config_file(tmp_path: Path) -> Path:
    import copy

    doc = copy.deepcopy(DESK_CONFIG)
    doc["model"]["flow"].update(
        {"n_blocks": 2, "subnet_layers": 2, "subnet_channels": 8,
         "cond_channels": 12, "early_output_every": 0, "early_output_channels": 0}
    )
    doc["data"]["segment_samples"] = 1024
    doc["train"].update(
        {"batch_size": 4,
         "stft_resolutions": [[512, 128, 512], [256, 64, 256]]}
    )
    path = tmp_path / "config.yaml"
    path.write_text(yaml.safe_dump(doc))
    return path


@pytest.fixture(autouse=True)
def run_dir_env(tmp_path, monkeypatch):
    monkeypatch.setenv("SEFGAN_RUN_DIR", str(tmp_path / "runs"))


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_corpus")
    rc = main(
        ["make-desk-corpus", "--out", str(root), "--train-utts", "3",
         "--val-utts", "2", "--test-utts", "2", "--duration", "0.3",
         "--seed", "0"]
    )
    assert rc == 0
    return root


@pytest.fixture(scope="module")
def nf_ckpt(corpus, tmp_path_factory):
    run_dir = tmp_path_factory.mktemp("cli_nf")
    cfg = micro_config_file(run_dir)
    rc = main(
        ["train-nf", "--config", str(cfg),
         "--manifest", str(corpus / "manifest.jsonl"),
         "--out", str(run_dir / "run"), "--epochs", "1"]
    )
    assert rc == 0
    return run_dir / "run" / "nf_best.ckpt", cfg


class TestCorpusCommands:
    def test_make_desk_corpus_writes_manifest(self, corpus):
        entries = read_manifest(corpus / "manifest.jsonl")
        assert len(entries) == 7
        assert (corpus / "config_snapshot.yaml").exists()

    def test_mix_dataset_snr_exactness(self, corpus, tmp_path):
        out = tmp_path / "mixed"
        rc = main(
            ["mix-dataset", "--manifest", str(corpus / "manifest.jsonl"),
             "--out", str(out)]
        )
        assert rc == 0
        rows = [
            json.loads(line)
            for line in (out / "mix_report.jsonl").read_text().splitlines()
        ]
        assert all(
            abs(r["measured_snr_db"] - r["requested_snr_db"]) < 0.01 for r in rows
        )

    def test_invalid_config_key_exits_2(self, corpus, tmp_path, capsys):
        bad = tmp_path / "bad.yaml"
        bad.write_text("model:\n  flow:\n    bogus_knob: 3\n")
        rc = main(
            ["mix-dataset", "--manifest", str(corpus / "manifest.jsonl"),
             "--out", str(tmp_path / "x"), "--config", str(bad)]
        )
        assert rc == 2
        err = capsys.readouterr().err.strip()
        record = json.loads(err)  # single machine-parsable line
        assert record["error"] == "ConfigError"
        assert "bogus_knob" in record["message"]


class TestTrainCommands:
    def test_train_nf_writes_run_artifacts(self, nf_ckpt):
        ckpt, _ = nf_ckpt
        run_dir = ckpt.parent
        assert ckpt.exists()
        assert (run_dir / "config_snapshot.yaml").exists()
        assert (run_dir / "train_log.jsonl").exists()

    def test_train_gan_requires_init(self, corpus, capsys):
        with pytest.raises(SystemExit) as exc:
            main(
                ["train-gan", "--manifest", str(corpus / "manifest.jsonl"),
                 "--out", "unused"]
            )
        assert exc.value.code == 2
        assert "--init" in capsys.readouterr().err

    def test_train_gan_one_epoch(self, corpus, nf_ckpt, tmp_path):
        ckpt, cfg = nf_ckpt
        rc = main(
            ["train-gan", "--config", str(cfg),
             "--manifest", str(corpus / "manifest.jsonl"),
             "--init", str(ckpt), "--out", str(tmp_path / "gan"),
             "--epochs", "1"]
        )
        assert rc == 0
        assert (tmp_path / "gan" / "gan_best.ckpt").exists()

    def test_missing_manifest_is_clean_error(self, nf_ckpt, tmp_path, capsys):
        _, cfg = nf_ckpt
        rc = main(
            ["train-nf", "--config", str(cfg),
             "--manifest", str(tmp_path / "missing.jsonl"),
             "--out", str(tmp_path / "r"), "--epochs", "1"]
        )
        assert rc == 2
        record = json.loads(capsys.readouterr().err.strip())
        assert record["error"] == "DataError"


class TestEnhanceCommand:
    def test_enhance_deterministic_with_seed(self, corpus, nf_ckpt, tmp_path):
        ckpt, cfg = nf_ckpt
        noisy = corpus / "clean" / "train_00.wav"  # any 16 kHz mono file works
        out_a = tmp_path / "a.wav"
        out_b = tmp_path / "b.wav"
        for out in (out_a, out_b):
            rc = main(
                ["enhance", "--config", str(cfg), "--ckpt", str(ckpt),
                 "--in", str(noisy), "--out", str(out), "--seed", "7"]
            )
            assert rc == 0
        assert out_a.read_bytes() == out_b.read_bytes()

    def test_enhance_output_length_matches_input(self, corpus, nf_ckpt, tmp_path):
        ckpt, cfg = nf_ckpt
        noisy = corpus / "clean" / "train_01.wav"
        out = tmp_path / "est.wav"
        before = noisy.read_bytes()
        rc = main(
            ["enhance", "--config", str(cfg), "--ckpt", str(ckpt),
             "--in", str(noisy), "--out", str(out), "--seed", "1"]
        )
        assert rc == 0
        assert len(read_wav(out)) == len(read_wav(noisy))
        # inputs are never mutated in place
        assert noisy.read_bytes() == before

    def test_checkpoint_config_mismatch_rejected(self, corpus, nf_ckpt, tmp_path, capsys):
        ckpt, _ = nf_ckpt
        noisy = corpus / "clean" / "train_00.wav"
        rc = main(
            ["enhance", "--ckpt", str(ckpt),  # default config != micro config
             "--in", str(noisy), "--out", str(tmp_path / "x.wav")]
        )
        assert rc == 2
        record = json.loads(capsys.readouterr().err.strip())
        assert record["error"] == "CheckpointError"


class TestEvalCommands:
    def test_evaluate_writes_metrics(self, corpus, nf_ckpt, tmp_path):
        ckpt, cfg = nf_ckpt
        out = tmp_path / "eval"
        rc = main(
            ["evaluate", "--config", str(cfg), "--ckpt", str(ckpt),
             "--manifest", str(corpus / "manifest.jsonl"),
             "--split", "test", "--out", str(out)]
        )
        assert rc == 0
        lines = (out / "metrics.jsonl").read_text().splitlines()
        kinds = [json.loads(l)["kind"] for l in lines]
        assert kinds.count("file") == 2
        assert "aggregate" in kinds and "metadata" in kinds

    def test_likelihood_histogram(self, corpus, nf_ckpt, tmp_path):
        ckpt, cfg = nf_ckpt
        out = tmp_path / "lik"
        rc = main(
            ["likelihood", "--config", str(cfg), "--ckpt", str(ckpt),
             "--manifest", str(corpus / "manifest.jsonl"),
             "--split", "val", "--out", str(out)]
        )
        assert rc == 0
        doc = json.loads((out / "likelihood.json").read_text())
        assert len(doc["values"]) == 2
        assert doc["bin_width"] == pytest.approx(0.05)

    def test_bench_rtf(self, corpus, nf_ckpt, tmp_path):
        ckpt, cfg = nf_ckpt
        out = tmp_path / "rtf"
        files = [str(corpus / "clean" / "train_00.wav"),
                 str(corpus / "clean" / "train_01.wav")]
        rc = main(
            ["bench-rtf", "--config", str(cfg), "--ckpt", str(ckpt),
             "--in", *files, "--out", str(out)]
        )
        assert rc == 0
        doc = json.loads((out / "rtf.json").read_text())
        assert doc["rtf"] > 0 and doc["files"] == 2
        assert doc["param_count"] > 0
