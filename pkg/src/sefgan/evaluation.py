"""Enhancement inference, SI-SDR scoring, likelihood histograms, and
real-time-factor benchmarking."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch

from . import DegenerateSignalError, ShapeError
from .data import ManifestEntry, pad_for_squeeze, synthesize_mixture
from .flow import SpeechFlow

RESIDUAL_FLOOR = 1e-12


def enhance(
    model: SpeechFlow,
    noisy: np.ndarray,
    temperature: float = 1.0,
    seed: int | None = None,
    device: str = "cpu",
) -> np.ndarray:
    """Generate enhanced audio from a noisy waveform.

    Draws the latent from N(0, temperature^2 I) (temperature 0 gives the
    deterministic mode path), runs the inverse flow conditioned on the noisy
    input, and trims internal padding so the output length matches the input.
    """
    if temperature < 0:
        raise ValueError("temperature must be >= 0")
    noisy = np.asarray(noisy, dtype=np.float32)
    padded, n = pad_for_squeeze(noisy, model.squeeze_factor)
    y = torch.from_numpy(padded).unsqueeze(0).to(device)
    if temperature == 0.0:
        z = torch.zeros_like(y)
    else:
        gen = None
        if seed is not None:
            gen = torch.Generator(device="cpu").manual_seed(seed)
        z = temperature * torch.randn(y.shape, generator=gen).to(device)
    was_training = model.training
    model.eval()
    with torch.no_grad():
        est = model.inverse(z, model.build_cond_stack(y))
    if was_training:
        model.train()
    return est[0, :n].cpu().numpy()


def si_sdr(ref: np.ndarray, est: np.ndarray) -> float:
    """Scale-invariant signal-to-distortion ratio in dB.

    The estimate is projected onto the reference; returns ``inf`` when the
    residual energy falls below 1e-12 of the projected-target energy.
    """
    ref = np.asarray(ref, dtype=np.float64)
    est = np.asarray(est, dtype=np.float64)
    if ref.shape != est.shape:
        raise ShapeError(
            f"si_sdr needs equal lengths, got {ref.shape} vs {est.shape}"
        )
    ref_energy = float(np.dot(ref, ref))
    if ref_energy == 0.0:
        raise DegenerateSignalError("si_sdr reference has zero energy")
    alpha = float(np.dot(est, ref)) / ref_energy
    target = alpha * ref
    residual = est - target
    target_energy = float(np.dot(target, target))
    residual_energy = float(np.dot(residual, residual))
    if residual_energy < RESIDUAL_FLOOR * target_energy:
        return math.inf
    if target_energy == 0.0:
        return -math.inf
    return 10.0 * math.log10(target_energy / residual_energy)


def cap_si_sdr(value: float, cap_db: float = 100.0) -> float:
    """Clamp the infinite sentinel for aggregation only."""
    if math.isinf(value):
        return cap_db if value > 0 else -cap_db
    return value


@dataclass
class FileMetrics:
    utt_id: str
    snr_db: float
    si_sdr_noisy: float
    si_sdr_enhanced: float
    nll_per_dim: float


@dataclass
class MetricsReport:
    per_file: list[FileMetrics]
    aggregate: dict
    metadata: dict


def aggregate_metrics(rows: list[FileMetrics], cap_db: float = 100.0) -> dict:
    """Means and standard deviations recomputed from the per-file rows."""
    out = {}
    for name in ("si_sdr_noisy", "si_sdr_enhanced", "nll_per_dim"):
        values = [cap_si_sdr(getattr(r, name), cap_db) for r in rows]
        out[f"{name}_mean"] = float(np.mean(values))
        out[f"{name}_std"] = float(np.std(values))
    out["n_files"] = len(rows)
    return out


def evaluate_dataset(
    model: SpeechFlow,
    entries: list[ManifestEntry],
    root: str | Path,
    temperature: float = 1.0,
    seed: int | None = 0,
    device: str = "cpu",
    target_peak: float = 0.95,
    cap_db: float = 100.0,
    model_hash: str = "",
) -> MetricsReport:
    """Per-file enhancement metrics plus their aggregate."""
    rows = []
    for i, entry in enumerate(entries):
        clean, noisy = synthesize_mixture(entry, root, target_peak)
        file_seed = None if seed is None else seed + i
        est = enhance(model, noisy, temperature, seed=file_seed, device=device)
        nll = _utterance_nll(model, clean, noisy, device)
        rows.append(
            FileMetrics(
                utt_id=entry.utt_id,
                snr_db=entry.snr_db,
                si_sdr_noisy=si_sdr(clean, noisy),
                si_sdr_enhanced=si_sdr(clean, est),
                nll_per_dim=nll,
            )
        )
    metadata = {
        "model_hash": model_hash,
        "temperature": temperature,
        "seed": seed,
        "timestamp": datetime.now(timezone.utc).isoformat(),
    }
    return MetricsReport(
        per_file=rows,
        aggregate=aggregate_metrics(rows, cap_db),
        metadata=metadata,
    )


def _utterance_nll(
    model: SpeechFlow, clean: np.ndarray, noisy: np.ndarray, device: str
) -> float:
    s = model.squeeze_factor
    clean_p, _ = pad_for_squeeze(np.asarray(clean, np.float32), s)
    noisy_p, _ = pad_for_squeeze(np.asarray(noisy, np.float32), s)
    with torch.no_grad():
        nll = model.log_likelihood(
            torch.from_numpy(clean_p).unsqueeze(0).to(device),
            torch.from_numpy(noisy_p).unsqueeze(0).to(device),
        )
    return float(nll.item())


@dataclass
class HistogramResult:
    values: list[float]
    bin_edges: np.ndarray
    counts: np.ndarray
    bin_width: float

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))


def nll_histogram(
    model: SpeechFlow,
    entries: list[ManifestEntry],
    root: str | Path,
    bin_width: float = 0.05,
    device: str = "cpu",
    target_peak: float = 0.95,
) -> HistogramResult:
    """Per-utterance NLL/dim distribution over clean/noisy pairs."""
    values = []
    for entry in entries:
        clean, noisy = synthesize_mixture(entry, root, target_peak)
        values.append(_utterance_nll(model, clean, noisy, device))
    lo = math.floor(min(values) / bin_width) * bin_width
    hi = math.ceil(max(values) / bin_width) * bin_width
    if hi <= lo:
        hi = lo + bin_width
    edges = np.arange(lo, hi + bin_width / 2, bin_width)
    counts, edges = np.histogram(values, bins=edges)
    return HistogramResult(
        values=values, bin_edges=edges, counts=counts, bin_width=bin_width
    )


@dataclass
class RtfReport:
    files: int
    audio_seconds: float
    wall_seconds: float
    rtf: float
    device: str
    param_count: int


def benchmark_rtf(
    model: SpeechFlow,
    files: list[np.ndarray],
    temperature: float = 1.0,
    seed: int | None = 0,
    device: str = "cpu",
    warmup: int = 2,
    sample_rate: int = 16000,
) -> RtfReport:
    """Wall-clock enhancement time over audio duration, serially timed.

    The first ``warmup`` passes are discarded before timing starts.
    """
    if not files:
        raise ValueError("benchmark_rtf needs at least one file")
    for _ in range(warmup):
        enhance(model, files[0], temperature, seed=seed, device=device)
    start = time.perf_counter()
    for i, audio in enumerate(files):
        enhance(model, audio, temperature,
                seed=None if seed is None else seed + i, device=device)
    wall = time.perf_counter() - start
    audio_seconds = sum(len(f) for f in files) / sample_rate
    return RtfReport(
        files=len(files),
        audio_seconds=audio_seconds,
        wall_seconds=wall,
        rtf=wall / audio_seconds,
        device=device,
        param_count=model.param_count(),
    )


def write_metrics_report(report: MetricsReport, path: str | Path) -> None:
    """Line-delimited records: per-file rows, then aggregate, then metadata."""
    with open(path, "w", encoding="utf-8") as fh:
        for row in report.per_file:
            fh.write(json.dumps({"kind": "file", **asdict(row)}) + "\n")
        fh.write(json.dumps({"kind": "aggregate", **report.aggregate}) + "\n")
        fh.write(json.dumps({"kind": "metadata", **report.metadata}) + "\n")


def format_metrics_table(report: MetricsReport) -> str:
    lines = [
        f"{'utt_id':<16}{'snr_db':>8}{'sisdr_in':>10}{'sisdr_out':>10}{'nll':>10}",
    ]
    for row in report.per_file:
        lines.append(
            f"{row.utt_id:<16}{row.snr_db:>8.2f}"
            f"{cap_si_sdr(row.si_sdr_noisy):>10.2f}"
            f"{cap_si_sdr(row.si_sdr_enhanced):>10.2f}"
            f"{row.nll_per_dim:>10.4f}"
        )
    agg = report.aggregate
    lines.append(
        f"{'mean':<16}{'':>8}{agg['si_sdr_noisy_mean']:>10.2f}"
        f"{agg['si_sdr_enhanced_mean']:>10.2f}{agg['nll_per_dim_mean']:>10.4f}"
    )
    return "\n".join(lines)
