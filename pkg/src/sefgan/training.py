"""Three-stage training: likelihood pretraining, adversarial refinement,
and hybrid refinement, plus checkpointing and schedules.

Determinism contract: given a fixed seed and manifest, model construction,
batch order, crops, and latent draws are all reproducible, and a checkpoint
carries enough state (parameters, optimizers, rng) to resume a run without
changing its trajectory.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
import torch
from torch import Tensor

from . import CheckpointError, ConfigError, NumericalError
from .config import RunConfig, config_hash, config_to_dict
from .data import ManifestEntry, pad_for_squeeze, segment_waveform, synthesize_mixture
from .discriminators import DiscriminatorEnsemble
from .flow import SpeechFlow
from .losses import discriminator_loss, generator_loss, reconstruction_loss

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"SEFGANCK"
CHECKPOINT_VERSION = 1
STAGES = ("nf", "gan", "hybrid")
DISC_COLLAPSE_THRESHOLD = 1e-4


# ---------------------------------------------------------------------------
# Schedules


class EarlyStopping:
    """Halt after ``patience`` consecutive epochs without improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = float("inf")
        self.counter = 0

    def update(self, value: float) -> bool:
        """Returns True when ``value`` improves on the best seen."""
        if value < self.best:
            self.best = value
            self.counter = 0
            return True
        self.counter += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.counter >= self.patience


class PlateauScheduler:
    """Multiply the lr by ``factor`` after ``patience`` flat epochs."""

    def __init__(self, optimizer, factor: float, patience: int):
        self.optimizer = optimizer
        self.factor = factor
        self.patience = patience
        self.best = float("inf")
        self.counter = 0

    def update(self, value: float) -> None:
        if value < self.best:
            self.best = value
            self.counter = 0
            return
        self.counter += 1
        if self.counter >= self.patience:
            for group in self.optimizer.param_groups:
                group["lr"] *= self.factor
            self.counter = 0

    @property
    def lr(self) -> float:
        return self.optimizer.param_groups[0]["lr"]

    def state_dict(self) -> dict:
        return {"best": self.best, "counter": self.counter}

    def load_state_dict(self, state: dict) -> None:
        self.best = state["best"]
        self.counter = state["counter"]


def exponential_lr(base_lr: float, decay: float, epoch: int) -> float:
    return base_lr * decay**epoch


# ---------------------------------------------------------------------------
# Checkpoint container


def model_hash(cfg: RunConfig) -> str:
    """Hash of the model section only; gates parameter compatibility."""
    canonical = json.dumps(config_to_dict(cfg)["model"], sort_keys=True)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def save_checkpoint(
    path: str | Path, *, stage: str, epoch: int, cfg: RunConfig, payload: dict
) -> Path:
    """Write a versioned container: magic, JSON header, parameter payload."""
    if stage not in STAGES:
        raise CheckpointError(f"unknown training stage {stage!r}")
    header = {
        "format_version": CHECKPOINT_VERSION,
        "stage": stage,
        "epoch": epoch,
        "config_hash": config_hash(cfg),
        "model_hash": model_hash(cfg),
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        blob = json.dumps(header).encode("utf-8")
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(buf.getvalue())
    return path


def read_checkpoint_header(path: str | Path) -> dict:
    try:
        with open(path, "rb") as fh:
            magic = fh.read(len(CHECKPOINT_MAGIC))
            if magic != CHECKPOINT_MAGIC:
                raise CheckpointError(f"{path} is not a checkpoint file")
            (length,) = struct.unpack("<I", fh.read(4))
            header = json.loads(fh.read(length).decode("utf-8"))
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: format_version {header.get('format_version')} is not "
            f"readable by this version ({CHECKPOINT_VERSION})"
        )
    return header


def load_checkpoint(
    path: str | Path,
    cfg: RunConfig | None = None,
    *,
    expect_stage: str | None = None,
    require_full_hash: bool = False,
) -> tuple[dict, dict]:
    """Read (header, payload), validating version and config compatibility.

    Loading for inference or stage initialization checks the model-section
    hash; exact resumption (``require_full_hash``) checks the full config.
    """
    header = read_checkpoint_header(path)
    if expect_stage is not None and header["stage"] != expect_stage:
        raise CheckpointError(
            f"{path}: expected a {expect_stage!r}-stage checkpoint, "
            f"got {header['stage']!r}"
        )
    if cfg is not None:
        if header["model_hash"] != model_hash(cfg):
            raise CheckpointError(
                f"{path}: checkpoint model config does not match the running "
                "config (model hash mismatch)"
            )
        if require_full_hash and header["config_hash"] != config_hash(cfg):
            raise CheckpointError(
                f"{path}: checkpoint config hash does not match the running "
                "config; cannot resume exactly"
            )
    with open(path, "rb") as fh:
        fh.read(len(CHECKPOINT_MAGIC))
        (length,) = struct.unpack("<I", fh.read(4))
        fh.read(length)
        payload = torch.load(io.BytesIO(fh.read()), weights_only=False)
    return header, payload


# ---------------------------------------------------------------------------
# Data access


class MixtureDataset:
    """Synthesizes a manifest once and serves aligned training batches."""

    def __init__(
        self,
        entries: list[ManifestEntry],
        root: str | Path,
        target_peak: float = 0.95,
    ):
        if not entries:
            raise ConfigError("dataset has no manifest entries")
        self.pairs = []
        for entry in entries:
            clean, noisy = synthesize_mixture(entry, root, target_peak)
            self.pairs.append((entry.utt_id, entry.snr_db, clean, noisy))

    def __len__(self) -> int:
        return len(self.pairs)

    def train_batches(
        self,
        segment_samples: int,
        batch_size: int,
        rng: np.random.Generator,
        device: str = "cpu",
    ) -> Iterator[tuple[Tensor, Tensor]]:
        segments = []
        for _, _, clean, noisy in self.pairs:
            stacked = np.stack([clean, noisy])
            result = segment_waveform(stacked, segment_samples, "train", rng)
            segments.extend(result.segments)
        order = rng.permutation(len(segments))
        for lo in range(0, len(order), batch_size):
            batch = [segments[i] for i in order[lo : lo + batch_size]]
            stacked = np.stack(batch)  # [B, 2, seg]
            tensor = torch.from_numpy(stacked).to(device)
            yield tensor[:, 0], tensor[:, 1]

    def full_utterances(
        self, squeeze_factor: int, device: str = "cpu"
    ) -> list[tuple[str, Tensor, Tensor]]:
        out = []
        for utt_id, _, clean, noisy in self.pairs:
            clean_p, _ = pad_for_squeeze(clean, squeeze_factor)
            noisy_p, _ = pad_for_squeeze(noisy, squeeze_factor)
            out.append(
                (
                    utt_id,
                    torch.from_numpy(clean_p).unsqueeze(0).to(device),
                    torch.from_numpy(noisy_p).unsqueeze(0).to(device),
                )
            )
        return out


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, epoch]))


# ---------------------------------------------------------------------------
# Builders


def build_model(cfg: RunConfig, device: str = "cpu") -> SpeechFlow:
    """Construct the generator with parameter init seeded from the config."""
    torch.manual_seed(cfg.train.seed)
    return SpeechFlow(cfg.model.flow, cfg.model.cond).to(device)


def build_discriminators(cfg: RunConfig, device: str = "cpu") -> DiscriminatorEnsemble:
    torch.manual_seed(cfg.train.seed + 1)
    return DiscriminatorEnsemble(cfg.model.disc).to(device)


# ---------------------------------------------------------------------------
# Logging


class TrainLogger:
    """Line-delimited JSON training log."""

    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path is not None else None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def write(self, record: dict) -> None:
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record) + "\n")


@dataclass
class TrainResult:
    best_path: Path
    last_path: Path
    history: list[dict] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)


def _check_finite(value: float, what: str, last_good: Path | None) -> None:
    if math.isfinite(value):
        return
    hint = f"; last good checkpoint: {last_good}" if last_good else ""
    raise NumericalError(f"non-finite {what} encountered, aborting{hint}")


# ---------------------------------------------------------------------------
# Stage 1: likelihood pretraining


def train_nf(
    cfg: RunConfig,
    dataset: MixtureDataset,
    val_dataset: MixtureDataset,
    model: SpeechFlow,
    run_dir: str | Path,
    device: str = "cpu",
    max_epochs: int | None = None,
    max_steps: int | None = None,
    resume_from: str | Path | None = None,
) -> TrainResult:
    """Minimize the per-dimension NLL with plateau decay and early stopping.

    Returns paths to the best-validation and final checkpoints. Passing
    ``resume_from`` continues an interrupted run without perturbing its
    trajectory (full config hash must match).
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    logger = TrainLogger(run_dir / "train_log.jsonl")
    tc = cfg.train
    max_epochs = max_epochs if max_epochs is not None else tc.nf_max_epochs

    opt = torch.optim.Adam(model.parameters(), lr=tc.nf_lr)
    plateau = PlateauScheduler(opt, tc.plateau_factor, tc.plateau_patience)
    early = EarlyStopping(tc.early_stop_patience)
    s = model.squeeze_factor

    best_path = run_dir / "nf_best.ckpt"
    last_path = run_dir / "nf_last.ckpt"
    result = TrainResult(best_path=best_path, last_path=last_path)
    step = 0
    start_epoch = 0
    stop = False
    payload: dict | None = None

    if resume_from is not None:
        _, payload = load_checkpoint(
            resume_from, cfg, expect_stage="nf", require_full_hash=True
        )
        model.load_state_dict(payload["model"])
        opt.load_state_dict(payload["opt_g"])
        plateau.load_state_dict(payload["plateau"])
        early.best = payload["early"]["best"]
        early.counter = payload["early"]["counter"]
        torch.set_rng_state(payload["torch_rng"])
        start_epoch = payload["epoch"] + 1
        step = payload["step"]

    def validate() -> float:
        model.eval()
        with torch.no_grad():
            vals = [
                model.log_likelihood(c, y).mean().item()
                for _, c, y in val_dataset.full_utterances(s, device)
            ]
        return float(np.mean(vals))

    for epoch in range(start_epoch, max_epochs):
        model.train()
        rng = _epoch_rng(tc.seed, epoch)
        for clean, noisy in dataset.train_batches(
            cfg.data.segment_samples, tc.batch_size, rng, device
        ):
            loss = model.log_likelihood(clean, noisy).mean()
            _check_finite(
                loss.item(), "training loss",
                last_path if last_path.exists() else None,
            )
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), tc.grad_clip)
            opt.step()
            step += 1
            result.step_losses.append(loss.item())
            logger.write(
                {"kind": "step", "step": step, "epoch": epoch,
                 "nll": loss.item(), "lr": plateau.lr}
            )
            if max_steps is not None and step >= max_steps:
                stop = True
                break

        val_nll = validate()
        improved = early.update(val_nll)
        plateau.update(val_nll)
        record = {
            "kind": "epoch", "epoch": epoch, "step": step,
            "val_nll": val_nll, "lr": plateau.lr, "improved": improved,
        }
        result.history.append(record)
        logger.write(record)

        payload = {
            "model": model.state_dict(),
            "opt_g": opt.state_dict(),
            "plateau": plateau.state_dict(),
            "early": {"best": early.best, "counter": early.counter},
            "torch_rng": torch.get_rng_state(),
            "epoch": epoch,
            "step": step,
            "best_val_nll": early.best,
            "config": config_to_dict(cfg),
        }
        save_checkpoint(last_path, stage="nf", epoch=epoch, cfg=cfg, payload=payload)
        if improved:
            save_checkpoint(best_path, stage="nf", epoch=epoch, cfg=cfg, payload=payload)
        if early.should_stop or stop:
            break

    if not best_path.exists():
        if payload is None:
            raise ConfigError("train_nf ran zero epochs; nothing to checkpoint")
        save_checkpoint(best_path, stage="nf", epoch=-1, cfg=cfg, payload=payload)
    return result


# ---------------------------------------------------------------------------
# Stages 2 and 3: adversarial and hybrid refinement


def _generator_step_losses(cfg: RunConfig) -> dict:
    tc = cfg.train
    return {
        "fm_weight": tc.fm_weight,
        "rec_weight": tc.rec_weight,
        "recon": tc.recon_loss,
        "resolutions": tc.stft_resolutions,
        "log_floor": tc.stft_log_floor,
    }


def train_adversarial(
    cfg: RunConfig,
    dataset: MixtureDataset,
    val_dataset: MixtureDataset,
    model: SpeechFlow,
    discs: DiscriminatorEnsemble,
    init_ckpt: str | Path,
    run_dir: str | Path,
    device: str = "cpu",
    hybrid: bool = False,
    epochs: int | None = None,
    resume_from: str | Path | None = None,
) -> TrainResult:
    """Adversarial (or hybrid likelihood+adversarial) refinement.

    Starts from a likelihood-pretrained checkpoint. Each batch generates
    audio from a fresh latent draw, updates the discriminators on the
    least-squares objective, then updates the generator on the composite
    objective; hybrid mode prepends a likelihood gradient step.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    stage = "hybrid" if hybrid else "gan"
    logger = TrainLogger(run_dir / "train_log.jsonl")
    tc = cfg.train
    epochs = epochs if epochs is not None else tc.gan_epochs

    opt_g = torch.optim.Adam(model.parameters(), lr=tc.g_lr, betas=tc.adam_betas_gan)
    opt_d = torch.optim.Adam(discs.parameters(), lr=tc.d_lr, betas=tc.adam_betas_gan)
    latent_gen = torch.Generator(device="cpu").manual_seed(tc.seed + 17)
    s = model.squeeze_factor
    loss_kw = _generator_step_losses(cfg)

    best_path = run_dir / f"{stage}_best.ckpt"
    last_path = run_dir / f"{stage}_last.ckpt"
    result = TrainResult(best_path=best_path, last_path=last_path)
    best_val = float("inf")
    step = 0
    start_epoch = 0
    payload: dict | None = None

    if resume_from is not None:
        _, payload = load_checkpoint(
            resume_from, cfg, expect_stage=stage, require_full_hash=True
        )
        model.load_state_dict(payload["model"])
        discs.load_state_dict(payload["disc"])
        opt_g.load_state_dict(payload["opt_g"])
        opt_d.load_state_dict(payload["opt_d"])
        latent_gen.set_state(payload["latent_rng"])
        torch.set_rng_state(payload["torch_rng"])
        start_epoch = payload["epoch"] + 1
        step = payload["step"]
        best_val = payload["best_val_rec"]
    else:
        _, init_payload = load_checkpoint(init_ckpt, cfg, expect_stage="nf")
        model.load_state_dict(init_payload["model"])

    def validate() -> float:
        model.eval()
        eval_gen = torch.Generator(device="cpu").manual_seed(tc.seed + 29)
        with torch.no_grad():
            vals = []
            for _, clean, noisy in val_dataset.full_utterances(s, device):
                z = torch.randn(noisy.shape, generator=eval_gen).to(device)
                est = model.inverse(z, model.build_cond_stack(noisy))
                vals.append(
                    reconstruction_loss(
                        clean, est, tc.recon_loss, tc.stft_resolutions,
                        tc.stft_log_floor,
                    ).item()
                )
        return float(np.mean(vals))

    for epoch in range(start_epoch, epochs):
        lr_g = exponential_lr(tc.g_lr, tc.lr_decay_gan, epoch)
        lr_d = exponential_lr(tc.d_lr, tc.lr_decay_gan, epoch)
        for group in opt_g.param_groups:
            group["lr"] = lr_g
        for group in opt_d.param_groups:
            group["lr"] = lr_d

        model.train()
        discs.train()
        rng = _epoch_rng(tc.seed + 1000, epoch)
        epoch_adv_d = []
        for clean, noisy in dataset.train_batches(
            cfg.data.segment_samples, tc.batch_size, rng, device
        ):
            record = {"kind": "step", "epoch": epoch, "lr_g": lr_g, "lr_d": lr_d}

            if hybrid and not tc.hybrid_combined:
                nll = model.log_likelihood(clean, noisy).mean()
                _check_finite(nll.item(), "hybrid nll", last_path)
                opt_g.zero_grad()
                (tc.hybrid_weight * nll).backward()
                torch.nn.utils.clip_grad_norm_(model.parameters(), tc.grad_clip)
                opt_g.step()
                record["nll"] = nll.item()

            # Fresh latent draw for every generator update.
            z = torch.randn(noisy.shape, generator=latent_gen).to(device)
            cond_stack = model.build_cond_stack(noisy)
            fake = model.inverse(z, cond_stack)

            d_loss = discriminator_loss(discs(clean), discs(fake.detach()))
            _check_finite(d_loss.item(), "discriminator loss", last_path)
            opt_d.zero_grad()
            d_loss.backward()
            torch.nn.utils.clip_grad_norm_(discs.parameters(), tc.grad_clip)
            opt_d.step()

            report = generator_loss(
                discs(clean), discs(fake), clean, fake, **loss_kw
            )
            g_loss = report.total
            if hybrid and tc.hybrid_combined:
                nll = model.log_likelihood(clean, noisy).mean()
                g_loss = g_loss + tc.hybrid_weight * nll
                record["nll"] = nll.item()
            _check_finite(g_loss.item(), "generator loss", last_path)
            opt_g.zero_grad()
            g_loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), tc.grad_clip)
            opt_g.step()

            step += 1
            epoch_adv_d.append(d_loss.item())
            g_total = float(g_loss.detach())
            record.update({"step": step, "adv_d": d_loss.item(), "g_total": g_total})
            record.update(report.components)
            result.step_losses.append(g_total)
            logger.write(record)

        collapsed = bool(epoch_adv_d) and max(epoch_adv_d) < DISC_COLLAPSE_THRESHOLD
        if collapsed:
            log.warning(
                "discriminator loss below %.0e for all of epoch %d; "
                "possible discriminator collapse",
                DISC_COLLAPSE_THRESHOLD, epoch,
            )

        val_rec = validate()
        record = {
            "kind": "epoch", "epoch": epoch, "step": step, "val_rec": val_rec,
            "lr_g": lr_g, "lr_d": lr_d, "disc_collapse": collapsed,
        }
        result.history.append(record)
        logger.write(record)

        payload = {
            "model": model.state_dict(),
            "disc": discs.state_dict(),
            "opt_g": opt_g.state_dict(),
            "opt_d": opt_d.state_dict(),
            "latent_rng": latent_gen.get_state(),
            "torch_rng": torch.get_rng_state(),
            "epoch": epoch,
            "step": step,
            "best_val_rec": min(best_val, val_rec),
            "config": config_to_dict(cfg),
        }
        save_checkpoint(last_path, stage=stage, epoch=epoch, cfg=cfg, payload=payload)
        if val_rec < best_val:
            best_val = val_rec
            save_checkpoint(best_path, stage=stage, epoch=epoch, cfg=cfg, payload=payload)

    if not best_path.exists():
        if payload is None:
            raise ConfigError("adversarial stage ran zero epochs; nothing to checkpoint")
        save_checkpoint(best_path, stage=stage, epoch=-1, cfg=cfg, payload=payload)
    return result


def train_gan(cfg, dataset, val_dataset, model, discs, init_ckpt, run_dir,
              device="cpu", epochs=None) -> TrainResult:
    return train_adversarial(
        cfg, dataset, val_dataset, model, discs, init_ckpt, run_dir,
        device=device, hybrid=False, epochs=epochs,
    )


def train_hybrid(cfg, dataset, val_dataset, model, discs, init_ckpt, run_dir,
                 device="cpu", epochs=None) -> TrainResult:
    return train_adversarial(
        cfg, dataset, val_dataset, model, discs, init_ckpt, run_dir,
        device=device, hybrid=True, epochs=epochs,
    )


def load_model_for_inference(
    ckpt_path: str | Path, cfg: RunConfig, device: str = "cpu"
) -> tuple[SpeechFlow, dict]:
    """Rebuild the generator from any-stage checkpoint for enhancement."""
    header, payload = load_checkpoint(ckpt_path, cfg)
    model = build_model(cfg, device)
    model.load_state_dict(payload["model"])
    model.eval()
    return model, header
