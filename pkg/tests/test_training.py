import json
import struct
from pathlib import Path

import numpy as np
import pytest
import torch

from sefgan import CheckpointError, NumericalError
from sefgan.config import config_from_mapping
from sefgan.data import make_desk_corpus, read_manifest, select_split
from sefgan.training import (
    CHECKPOINT_MAGIC,
    EarlyStopping,
    MixtureDataset,
    PlateauScheduler,
    TrainResult,
    build_discriminators,
    build_model,
    exponential_lr,
    load_checkpoint,
    read_checkpoint_header,
    save_checkpoint,
    train_adversarial,
    train_nf,
)

from conftest import DESK_CONFIG


def micro_config(**train_overrides):
    import copy

    doc = copy.deepcopy(DESK_CONFIG)
    doc["model"]["flow"].update(
        {"n_blocks": 2, "subnet_layers": 2, "subnet_channels": 8,
         "cond_channels": 12, "early_output_every": 0, "early_output_channels": 0}
    )
    doc["data"]["segment_samples"] = 1024
    doc["train"].update(
        {
            "batch_size": 4,
            "stft_resolutions": [[512, 128, 512], [256, 64, 256], [128, 32, 128]],
            **train_overrides,
        }
    )
    return config_from_mapping(doc)


@pytest.fixture(scope="module")
def micro_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("micro_corpus")
    manifest = make_desk_corpus(
        root, n_train=3, n_val=2, n_test=2, duration_s=0.3, seed=2
    )
    entries = read_manifest(manifest)
    return manifest.parent, entries


def make_datasets(root, entries):
    return (
        MixtureDataset(select_split(entries, "train"), root),
        MixtureDataset(select_split(entries, "val"), root),
    )


class TestSchedules:
    def test_plateau_factor_composition(self):
        opt = torch.optim.Adam([torch.nn.Parameter(torch.zeros(1))], lr=1e-3)
        sched = PlateauScheduler(opt, factor=0.8, patience=10)
        sched.update(1.0)  # establishes best
        for _ in range(20):  # two full plateau windows
            sched.update(1.0)
        assert sched.lr == pytest.approx(1e-3 * 0.8**2)

    def test_early_stop_halts_exactly_after_patience(self):
        early = EarlyStopping(patience=40)
        early.update(1.0)
        for i in range(39):
            early.update(1.0)
            assert not early.should_stop
        early.update(1.0)  # 40th flat epoch
        assert early.should_stop

    def test_exponential_decay_epoch_ten(self):
        assert exponential_lr(5e-5, 0.8, 10) == pytest.approx(5e-5 * 0.8**10)

    def test_improvement_resets_counters(self):
        early = EarlyStopping(patience=3)
        assert early.update(1.0)
        assert not early.update(1.0)
        assert early.update(0.5)
        assert early.counter == 0


class TestCheckpointContainer:
    def payload(self):
        return {"model": {"w": torch.arange(4.0)}, "note": "x"}

    def test_round_trip(self, tmp_path):
        cfg = micro_config()
        path = save_checkpoint(
            tmp_path / "a.ckpt", stage="nf", epoch=3, cfg=cfg, payload=self.payload()
        )
        header, payload = load_checkpoint(path, cfg)
        assert header["stage"] == "nf" and header["epoch"] == 3
        assert torch.equal(payload["model"]["w"], torch.arange(4.0))

    def test_tampered_config_hash_rejected(self, tmp_path):
        cfg = micro_config()
        path = save_checkpoint(
            tmp_path / "a.ckpt", stage="nf", epoch=0, cfg=cfg, payload=self.payload()
        )
        raw = path.read_bytes()
        (length,) = struct.unpack("<I", raw[8:12])
        header = json.loads(raw[12 : 12 + length])
        header["model_hash"] = "0" * 16
        blob = json.dumps(header).encode()
        # keep the header the same length so the payload offset is unchanged
        path.write_bytes(
            raw[:8] + struct.pack("<I", len(blob)) + blob + raw[12 + length :]
        )
        with pytest.raises(CheckpointError, match="model"):
            load_checkpoint(path, cfg)

    def test_future_format_version_rejected(self, tmp_path):
        cfg = micro_config()
        path = save_checkpoint(
            tmp_path / "a.ckpt", stage="nf", epoch=0, cfg=cfg, payload=self.payload()
        )
        raw = path.read_bytes()
        (length,) = struct.unpack("<I", raw[8:12])
        header = json.loads(raw[12 : 12 + length])
        header["format_version"] = 99
        blob = json.dumps(header).encode()
        path.write_bytes(
            raw[:8] + struct.pack("<I", len(blob)) + blob + raw[12 + length :]
        )
        with pytest.raises(CheckpointError, match="format_version"):
            read_checkpoint_header(path)

    def test_not_a_checkpoint(self, tmp_path):
        junk = tmp_path / "junk.bin"
        junk.write_bytes(b"definitely not a checkpoint")
        with pytest.raises(CheckpointError):
            read_checkpoint_header(junk)

    def test_stage_mismatch_rejected(self, tmp_path):
        cfg = micro_config()
        path = save_checkpoint(
            tmp_path / "a.ckpt", stage="gan", epoch=0, cfg=cfg, payload=self.payload()
        )
        with pytest.raises(CheckpointError, match="nf"):
            load_checkpoint(path, cfg, expect_stage="nf")

    def test_full_hash_required_for_resume(self, tmp_path):
        cfg = micro_config()
        path = save_checkpoint(
            tmp_path / "a.ckpt", stage="nf", epoch=0, cfg=cfg, payload=self.payload()
        )
        other = micro_config(nf_lr=5e-4)  # same model, different train section
        header, _ = load_checkpoint(path, other)  # inference load is fine
        assert header["stage"] == "nf"
        with pytest.raises(CheckpointError, match="resume"):
            load_checkpoint(path, other, require_full_hash=True)


class TestTrainNf:
    def test_two_epochs_improve_and_checkpoint(self, micro_corpus, tmp_path):
        root, entries = micro_corpus
        cfg = micro_config()
        train_ds, val_ds = make_datasets(root, entries)
        model = build_model(cfg)
        result = train_nf(cfg, train_ds, val_ds, model, tmp_path, max_epochs=2)
        assert result.best_path.exists() and result.last_path.exists()
        assert len(result.history) == 2
        assert result.history[1]["val_nll"] < result.history[0]["val_nll"]
        log_lines = (tmp_path / "train_log.jsonl").read_text().splitlines()
        kinds = {json.loads(l)["kind"] for l in log_lines}
        assert kinds == {"step", "epoch"}

    def test_determinism_same_seed_same_losses(self, micro_corpus, tmp_path):
        root, entries = micro_corpus
        cfg = micro_config()
        runs = []
        for name in ("a", "b"):
            train_ds, val_ds = make_datasets(root, entries)
            model = build_model(cfg)
            result = train_nf(
                cfg, train_ds, val_ds, model, tmp_path / name, max_epochs=2
            )
            runs.append(result.step_losses)
        assert runs[0] == runs[1]

    def test_resume_preserves_trajectory(self, micro_corpus, tmp_path):
        root, entries = micro_corpus
        cfg = micro_config()

        train_ds, val_ds = make_datasets(root, entries)
        model = build_model(cfg)
        straight = train_nf(
            cfg, train_ds, val_ds, model, tmp_path / "straight", max_epochs=4
        )

        train_ds, val_ds = make_datasets(root, entries)
        model = build_model(cfg)
        part1 = train_nf(
            cfg, train_ds, val_ds, model, tmp_path / "resumed", max_epochs=2
        )
        model2 = build_model(cfg)
        part2 = train_nf(
            cfg, train_ds, val_ds, model2, tmp_path / "resumed",
            max_epochs=4, resume_from=part1.last_path,
        )
        assert part1.step_losses + part2.step_losses == straight.step_losses
        assert [r["val_nll"] for r in part1.history + part2.history] == [
            r["val_nll"] for r in straight.history
        ]


@pytest.fixture(scope="module")
def nf_init(micro_corpus, tmp_path_factory):
    root, entries = micro_corpus
    cfg = micro_config()
    train_ds, val_ds = make_datasets(root, entries)
    model = build_model(cfg)
    result = train_nf(
        cfg, train_ds, val_ds, model,
        tmp_path_factory.mktemp("nf_init"), max_epochs=1,
    )
    return result.best_path


class TestTrainAdversarial:
    def count_steps(self, monkeypatch):
        calls = {"n": 0}
        original = torch.optim.Adam.step

        def counting_step(self, *args, **kwargs):
            calls["n"] += 1
            return original(self, *args, **kwargs)

        monkeypatch.setattr(torch.optim.Adam, "step", counting_step)
        return calls

    def test_gan_two_steps_per_batch(self, micro_corpus, nf_init, tmp_path, monkeypatch):
        root, entries = micro_corpus
        cfg = micro_config()
        train_ds, val_ds = make_datasets(root, entries)
        model = build_model(cfg)
        discs = build_discriminators(cfg)
        calls = self.count_steps(monkeypatch)
        result = train_adversarial(
            cfg, train_ds, val_ds, model, discs, nf_init, tmp_path,
            hybrid=False, epochs=1,
        )
        n_batches = len(result.step_losses)
        assert calls["n"] == 2 * n_batches

    def test_hybrid_three_steps_per_batch(
        self, micro_corpus, nf_init, tmp_path, monkeypatch
    ):
        root, entries = micro_corpus
        cfg = micro_config()
        train_ds, val_ds = make_datasets(root, entries)
        model = build_model(cfg)
        discs = build_discriminators(cfg)
        calls = self.count_steps(monkeypatch)
        result = train_adversarial(
            cfg, train_ds, val_ds, model, discs, nf_init, tmp_path,
            hybrid=True, epochs=1,
        )
        n_batches = len(result.step_losses)
        assert calls["n"] == 3 * n_batches

    def test_hybrid_zero_weight_nll_step_is_noop(self, micro_corpus, nf_init, tmp_path):
        # With weight 0 the likelihood step must not move the parameters.
        root, entries = micro_corpus
        cfg = micro_config(hybrid_weight=0.0)
        train_ds, val_ds = make_datasets(root, entries)
        model = build_model(cfg)
        _, payload = load_checkpoint(nf_init)
        model.load_state_dict(payload["model"])
        opt = torch.optim.Adam(model.parameters(), lr=cfg.train.g_lr)
        rng = np.random.default_rng(0)
        clean, noisy = next(
            train_ds.train_batches(cfg.data.segment_samples, 4, rng)
        )
        before = [p.detach().clone() for p in model.parameters()]
        nll = model.log_likelihood(clean, noisy).mean()
        opt.zero_grad()
        (cfg.train.hybrid_weight * nll).backward()
        opt.step()
        assert all(
            torch.equal(a, b) for a, b in zip(before, model.parameters())
        )

    def test_requires_nf_stage_checkpoint(self, micro_corpus, tmp_path):
        root, entries = micro_corpus
        cfg = micro_config()
        train_ds, val_ds = make_datasets(root, entries)
        model = build_model(cfg)
        discs = build_discriminators(cfg)
        bogus = save_checkpoint(
            tmp_path / "g.ckpt", stage="gan", epoch=0, cfg=cfg,
            payload={"model": model.state_dict()},
        )
        with pytest.raises(CheckpointError, match="nf"):
            train_adversarial(
                cfg, train_ds, val_ds, model, discs, bogus, tmp_path, epochs=1
            )

    def test_gan_epoch_lr_schedule(self, micro_corpus, nf_init, tmp_path):
        root, entries = micro_corpus
        cfg = micro_config()
        train_ds, val_ds = make_datasets(root, entries)
        model = build_model(cfg)
        discs = build_discriminators(cfg)
        result = train_adversarial(
            cfg, train_ds, val_ds, model, discs, nf_init, tmp_path,
            hybrid=False, epochs=2,
        )
        assert result.history[0]["lr_g"] == pytest.approx(cfg.train.g_lr)
        assert result.history[1]["lr_g"] == pytest.approx(
            cfg.train.g_lr * cfg.train.lr_decay_gan
        )
        assert result.history[0]["lr_d"] == pytest.approx(cfg.train.d_lr)

    def test_adam_betas_from_config(self, micro_corpus, nf_init, tmp_path):
        root, entries = micro_corpus
        cfg = micro_config()
        assert cfg.train.adam_betas_gan == (0.5, 0.9)
        opt = torch.optim.Adam([torch.nn.Parameter(torch.zeros(1))],
                               lr=cfg.train.g_lr, betas=cfg.train.adam_betas_gan)
        assert opt.param_groups[0]["betas"] == (0.5, 0.9)

    def test_resume_preserves_trajectory(self, micro_corpus, nf_init, tmp_path):
        root, entries = micro_corpus
        cfg = micro_config()

        def run(run_dir, epochs, resume_from=None):
            train_ds, val_ds = make_datasets(root, entries)
            model = build_model(cfg)
            discs = build_discriminators(cfg)
            return train_adversarial(
                cfg, train_ds, val_ds, model, discs, nf_init, run_dir,
                hybrid=False, epochs=epochs, resume_from=resume_from,
            )

        straight = run(tmp_path / "straight", 2)
        first = run(tmp_path / "resumed", 1)
        resumed = run(tmp_path / "resumed", 2, resume_from=first.last_path)
        assert first.step_losses + resumed.step_losses == straight.step_losses

    def test_hybrid_combined_objective_two_steps_per_batch(
        self, micro_corpus, nf_init, tmp_path, monkeypatch
    ):
        # Combined-objective mode folds the likelihood term into the
        # generator update: two optimizer steps per batch, nll still logged.
        root, entries = micro_corpus
        cfg = micro_config(hybrid_combined=True)
        train_ds, val_ds = make_datasets(root, entries)
        model = build_model(cfg)
        discs = build_discriminators(cfg)
        calls = self.count_steps(monkeypatch)
        result = train_adversarial(
            cfg, train_ds, val_ds, model, discs, nf_init, tmp_path,
            hybrid=True, epochs=1,
        )
        assert calls["n"] == 2 * len(result.step_losses)
        log_lines = [json.loads(l)
                     for l in (tmp_path / "train_log.jsonl").read_text().splitlines()]
        steps = [r for r in log_lines if r["kind"] == "step"]
        assert all("nll" in r for r in steps)
