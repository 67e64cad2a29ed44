"""Mixture synthesis, manifests, segmentation, and WAV I/O.

The pipeline is corpus-agnostic: a manifest lists (clean, noise, offset,
SNR, split, seed) records and synthesis is a pure function of those records,
so replaying a manifest reproduces a dataset bit for bit. A small synthetic
corpus generator (tonal/chirp "speech" plus filtered-noise backgrounds)
makes the whole test suite self-contained.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np
from scipy.io import wavfile
from scipy.signal import butter, lfilter

from . import DataError, DegenerateSignalError, ShapeError

SAMPLE_RATE = 16000
SNR_RANGE_DB = (0.0, 20.0)

# Field order of manifest records; stable across versions.
MANIFEST_FIELDS = (
    "utt_id",
    "clean_path",
    "noise_path",
    "noise_offset",
    "snr_db",
    "split",
    "seed",
)

SPLITS = ("train", "val", "test")


@dataclass
class ManifestEntry:
    utt_id: str
    clean_path: str
    noise_path: str
    noise_offset: int
    snr_db: float
    split: str
    seed: int

    def to_record(self) -> dict:
        return {name: getattr(self, name) for name in MANIFEST_FIELDS}

    @classmethod
    def from_record(cls, record: dict) -> "ManifestEntry":
        missing = set(MANIFEST_FIELDS) - set(record)
        extra = set(record) - set(MANIFEST_FIELDS)
        if missing or extra:
            raise DataError(
                f"malformed manifest record (missing {sorted(missing)}, "
                f"unexpected {sorted(extra)})"
            )
        return cls(**record)


def read_wav(path: str | Path) -> np.ndarray:
    """Load mono 16 kHz 16-bit PCM audio as float32 in [-1, 1)."""
    try:
        rate, samples = wavfile.read(path)
    except FileNotFoundError:
        raise DataError(f"audio file not found: {path}") from None
    except Exception as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if rate != SAMPLE_RATE:
        raise DataError(f"{path}: sample rate {rate} Hz, expected {SAMPLE_RATE}")
    if samples.ndim != 1:
        raise DataError(f"{path}: expected mono audio, got {samples.ndim} channels")
    if samples.dtype != np.int16:
        raise DataError(f"{path}: expected 16-bit PCM, got {samples.dtype}")
    return samples.astype(np.float32) / 32768.0


def write_wav(path: str | Path, samples: np.ndarray) -> None:
    """Write float audio as mono 16 kHz 16-bit PCM."""
    pcm = np.clip(np.round(np.asarray(samples, dtype=np.float64) * 32767.0),
                  -32768, 32767).astype(np.int16)
    wavfile.write(path, SAMPLE_RATE, pcm)


def pad_for_squeeze(w: np.ndarray, factor: int) -> tuple[np.ndarray, int]:
    """Trailing zero-pad to a multiple of ``factor``; returns (padded, n)."""
    n = len(w)
    if n == 0:
        raise ShapeError("cannot pad an empty waveform")
    pad = (-n) % factor
    if pad:
        w = np.concatenate([w, np.zeros(pad, dtype=w.dtype)])
    return w, n


def scale_noise_for_snr(clean: np.ndarray, noise: np.ndarray, snr_db: float) -> float:
    """Gain g so that mixing clean + g*noise measures exactly ``snr_db``."""
    if clean.shape != noise.shape:
        raise ShapeError(
            f"clean ({clean.shape}) and noise ({noise.shape}) lengths differ"
        )
    e_clean = float(np.sum(np.asarray(clean, dtype=np.float64) ** 2))
    e_noise = float(np.sum(np.asarray(noise, dtype=np.float64) ** 2))
    if e_clean == 0.0:
        raise DegenerateSignalError("clean signal has zero energy")
    if e_noise == 0.0:
        raise DegenerateSignalError("noise signal has zero energy")
    return math.sqrt(e_clean / (e_noise * 10.0 ** (snr_db / 10.0)))


def measure_snr(clean: np.ndarray, noisy: np.ndarray) -> float:
    """SNR in dB implied by treating ``noisy - clean`` as the noise."""
    clean = np.asarray(clean, dtype=np.float64)
    residual = np.asarray(noisy, dtype=np.float64) - clean
    e_noise = float(np.sum(residual**2))
    if e_noise == 0.0:
        raise DegenerateSignalError("no noise component to measure")
    return 10.0 * math.log10(float(np.sum(clean**2)) / e_noise)


def crop_noise(noise: np.ndarray, offset: int, length: int) -> np.ndarray:
    """Take ``length`` samples starting at ``offset``, looping if short."""
    if len(noise) == 0:
        raise DegenerateSignalError("empty noise signal")
    idx = (offset + np.arange(length)) % len(noise)
    return noise[idx]


def synthesize_mixture(
    entry: ManifestEntry,
    root: str | Path = ".",
    target_peak: float = 0.95,
) -> tuple[np.ndarray, np.ndarray]:
    """Materialize one manifest entry as (clean, noisy) float32 waveforms.

    The noise is cropped (looping if shorter than the clean file), scaled to
    the requested SNR, and added; one joint peak normalization is applied to
    both outputs so the SNR relation is preserved.
    """
    root = Path(root)
    clean = read_wav(root / entry.clean_path).astype(np.float64)
    noise = read_wav(root / entry.noise_path).astype(np.float64)
    noise_seg = crop_noise(noise, entry.noise_offset, len(clean))
    gain = scale_noise_for_snr(clean, noise_seg, entry.snr_db)
    noisy = clean + gain * noise_seg
    peak = max(float(np.max(np.abs(clean))), float(np.max(np.abs(noisy))))
    scale = target_peak / peak
    return (clean * scale).astype(np.float32), (noisy * scale).astype(np.float32)


def sample_snr(rng: np.random.Generator) -> float:
    """Draw an SNR uniformly from the configured range."""
    return float(rng.uniform(*SNR_RANGE_DB))


def write_manifest(entries: Iterable[ManifestEntry], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for entry in entries:
            fh.write(json.dumps(entry.to_record()) + "\n")


def read_manifest(path: str | Path) -> list[ManifestEntry]:
    entries = []
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    record = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise DataError(f"{path}:{line_no}: invalid record: {exc}")
                entries.append(ManifestEntry.from_record(record))
    except FileNotFoundError:
        raise DataError(f"manifest not found: {path}") from None
    seeds = [e.seed for e in entries]
    if len(set(seeds)) != len(seeds):
        raise DataError(f"{path}: duplicate seeds in manifest")
    return entries


def select_split(entries: list[ManifestEntry], name: str) -> list[ManifestEntry]:
    """Filter a manifest by split; ``test_low`` is the lower third of the
    SNR range within the test split."""
    if name in SPLITS:
        return [e for e in entries if e.split == name]
    if name == "test_low":
        cutoff = SNR_RANGE_DB[0] + (SNR_RANGE_DB[1] - SNR_RANGE_DB[0]) / 3.0
        return [e for e in entries if e.split == "test" and e.snr_db <= cutoff]
    raise DataError(f"unknown split {name!r}")


class SegmentResult(NamedTuple):
    segments: list[np.ndarray]
    padded: bool


def segment_waveform(
    w: np.ndarray,
    segment_samples: int,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> SegmentResult:
    """Cut a waveform into fixed-length non-overlapping segments.

    Training mode drops the leftover tail by randomly placing the crop grid
    (seeded rng required unless the length divides evenly); eval mode keeps
    everything and zero-pads the final partial segment. Utterances shorter
    than one segment are zero-padded in both modes. Segmentation runs along
    the last axis, so stacked parallel signals crop identically.
    """
    n = w.shape[-1]
    seg = segment_samples

    def zero_padded(chunk: np.ndarray) -> np.ndarray:
        full = np.zeros((*w.shape[:-1], seg), dtype=w.dtype)
        full[..., : chunk.shape[-1]] = chunk
        return full

    if n <= seg:
        return SegmentResult([zero_padded(w)], padded=n < seg)
    if mode == "train":
        count = n // seg
        slack = n - count * seg
        start = 0
        if slack:
            if rng is None:
                raise ValueError("training segmentation needs an rng for crop placement")
            start = int(rng.integers(0, slack + 1))
        return SegmentResult(
            [w[..., start + i * seg : start + (i + 1) * seg] for i in range(count)],
            padded=False,
        )
    if mode == "eval":
        count = math.ceil(n / seg)
        segments = []
        for i in range(count):
            chunk = w[..., i * seg : (i + 1) * seg]
            if chunk.shape[-1] < seg:
                chunk = zero_padded(chunk)
            segments.append(chunk)
        return SegmentResult(segments, padded=n % seg != 0)
    raise ValueError(f"unknown segmentation mode {mode!r}")


def _tone_utterance(rng: np.random.Generator, n: int) -> np.ndarray:
    """Synthetic 'speech': a chirped harmonic stack with a slow envelope."""
    t = np.arange(n) / SAMPLE_RATE
    f0 = rng.uniform(90.0, 280.0)
    chirp = rng.uniform(-0.2, 0.2)
    inst_f0 = f0 * (1.0 + chirp * t / max(t[-1], 1e-9))
    phase0 = np.cumsum(2.0 * np.pi * inst_f0 / SAMPLE_RATE)
    x = np.zeros(n)
    for k in range(1, int(rng.integers(3, 6))):
        amp = rng.uniform(0.3, 1.0) / k
        x += amp * np.sin(k * phase0 + rng.uniform(0, 2 * np.pi))
    # Syllable-like amplitude modulation plus fade in/out.
    env = 0.55 + 0.45 * np.sin(2 * np.pi * rng.uniform(2.0, 5.0) * t + rng.uniform(0, 2 * np.pi))
    ramp = min(n // 20, 400)
    env[:ramp] *= np.linspace(0.0, 1.0, ramp)
    env[-ramp:] *= np.linspace(1.0, 0.0, ramp)
    x *= env
    return (0.5 * x / np.max(np.abs(x))).astype(np.float32)


def _filtered_noise(rng: np.random.Generator, n: int) -> np.ndarray:
    """Synthetic background: white noise through a random band-pass.

    The band sits mostly above the tonal utterances' harmonics so that
    desk-scale denoising is well-posed, with skirts leaking into the speech
    band.
    """
    low = rng.uniform(1500.0, 2500.0)
    high = rng.uniform(4000.0, 6500.0)
    b, a = butter(4, [low / (SAMPLE_RATE / 2), high / (SAMPLE_RATE / 2)],
                  btype="band")
    x = lfilter(b, a, rng.standard_normal(n))
    return (0.5 * x / np.max(np.abs(x))).astype(np.float32)


def make_desk_corpus(
    out_dir: str | Path,
    n_train: int = 10,
    n_val: int = 3,
    n_test: int = 5,
    duration_s: float = 1.0,
    n_noises: int = 3,
    seed: int = 0,
) -> Path:
    """Generate a self-contained synthetic corpus plus manifest.

    Returns the manifest path; all audio paths inside it are relative to
    ``out_dir``.
    """
    out_dir = Path(out_dir)
    (out_dir / "clean").mkdir(parents=True, exist_ok=True)
    (out_dir / "noise").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    n_samples = int(duration_s * SAMPLE_RATE)

    noise_paths = []
    for i in range(n_noises):
        path = f"noise/noise_{i:02d}.wav"
        write_wav(out_dir / path, _filtered_noise(rng, 2 * n_samples))
        noise_paths.append(path)

    entries = []
    counts = {"train": n_train, "val": n_val, "test": n_test}
    seed_counter = 0
    for split, count in counts.items():
        for i in range(count):
            clean_path = f"clean/{split}_{i:02d}.wav"
            write_wav(out_dir / clean_path, _tone_utterance(rng, n_samples))
            entries.append(
                ManifestEntry(
                    utt_id=f"{split}_{i:02d}",
                    clean_path=clean_path,
                    noise_path=noise_paths[int(rng.integers(0, n_noises))],
                    noise_offset=int(rng.integers(0, 2 * n_samples)),
                    snr_db=sample_snr(rng),
                    split=split,
                    seed=seed_counter,
                )
            )
            seed_counter += 1

    manifest_path = out_dir / "manifest.jsonl"
    write_manifest(entries, manifest_path)
    return manifest_path


def mix_dataset(
    entries: list[ManifestEntry],
    root: str | Path,
    out_dir: str | Path,
    target_peak: float = 0.95,
) -> list[dict]:
    """Materialize a manifest to clean/noisy WAV pairs on disk.

    Returns one report row per entry with the measured SNR.
    """
    out_dir = Path(out_dir)
    (out_dir / "clean").mkdir(parents=True, exist_ok=True)
    (out_dir / "noisy").mkdir(parents=True, exist_ok=True)
    rows = []
    for entry in entries:
        clean, noisy = synthesize_mixture(entry, root, target_peak)
        write_wav(out_dir / "clean" / f"{entry.utt_id}.wav", clean)
        write_wav(out_dir / "noisy" / f"{entry.utt_id}.wav", noisy)
        rows.append(
            {
                "utt_id": entry.utt_id,
                "split": entry.split,
                "requested_snr_db": entry.snr_db,
                "measured_snr_db": measure_snr(clean, noisy),
            }
        )
    return rows
