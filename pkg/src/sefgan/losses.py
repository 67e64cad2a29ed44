"""Training objectives: likelihood, adversarial, feature matching, spectral.

All functions are pure and differentiable where gradients are needed.
Scalar reductions for likelihood terms are accumulated in float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import torch
from torch import Tensor

from . import ConfigError, DegenerateSignalError, NumericalError, ShapeError

LOG_TWO_PI = math.log(2.0 * math.pi)

DEFAULT_RESOLUTIONS: tuple[tuple[int, int, int], ...] = (
    (1024, 120, 600),
    (2048, 240, 1200),
    (512, 50, 240),
)


@dataclass
class LossReport:
    """A total together with its itemized (already weighted) components.

    ``total`` keeps its autograd graph; ``components`` are detached floats
    whose sum equals ``total`` up to float conversion.
    """

    total: Tensor
    components: dict[str, float] = field(default_factory=dict)


def nll_loss(z: Tensor, logdet: Tensor | float) -> Tensor:
    """Negative log-likelihood per dimension, in nats.

    ``z`` has the latent on its last axis; a standard Gaussian prior gives
    -log p(z) = (||z||^2 + N log 2pi) / 2, and ``logdet`` (broadcast over
    leading axes) is subtracted before normalizing by N.
    """
    if not torch.isfinite(z).all():
        raise NumericalError("non-finite latent passed to nll_loss")
    n = z.shape[-1]
    logdet_t = torch.as_tensor(logdet, dtype=torch.float64, device=z.device)
    if not torch.isfinite(logdet_t).all():
        raise NumericalError("non-finite logdet passed to nll_loss")
    quad = z.double().pow(2).sum(dim=-1)
    return (0.5 * (quad + n * LOG_TWO_PI) - logdet_t) / n


def lsgan_losses(real_scores: Tensor, fake_scores: Tensor) -> tuple[Tensor, Tensor]:
    """Least-squares criterion for one discriminator's score maps.

    Returns ``(adv_d, adv_g)`` where the discriminator pushes real scores to
    1 and fake to 0, and the generator pushes fake scores to 1.
    """
    adv_d = (real_scores - 1.0).pow(2).mean() + fake_scores.pow(2).mean()
    adv_g = (fake_scores - 1.0).pow(2).mean()
    return adv_d, adv_g


def _as_feature_groups(feats) -> list[list[Tensor]]:
    if len(feats) == 0:
        raise ConfigError("feature matching received an empty feature set")
    if isinstance(feats[0], Tensor):
        return [list(feats)]
    return [list(group) for group in feats]


def feature_matching(real_feats, fake_feats) -> Tensor:
    """Mean absolute difference of intermediate discriminator activations.

    Accepts a single discriminator's feature list or a list of lists for an
    ensemble; averages over layers within each discriminator, then over
    discriminators.
    """
    real_groups = _as_feature_groups(real_feats)
    fake_groups = _as_feature_groups(fake_feats)
    if len(real_groups) != len(fake_groups):
        raise ConfigError(
            f"feature matching got {len(real_groups)} real vs "
            f"{len(fake_groups)} fake discriminators"
        )
    per_disc = []
    for real_group, fake_group in zip(real_groups, fake_groups):
        if len(real_group) != len(fake_group):
            raise ConfigError("feature matching layer structure mismatch")
        layer_means = []
        for r, f in zip(real_group, fake_group):
            if r.shape != f.shape:
                raise ConfigError(
                    f"feature matching shape mismatch: {tuple(r.shape)} vs "
                    f"{tuple(f.shape)}"
                )
            layer_means.append((r - f).abs().mean())
        per_disc.append(torch.stack(layer_means).mean())
    return torch.stack(per_disc).mean()


def stft_magnitudes(x: Tensor, fft_size: int, hop: int, win_length: int) -> Tensor:
    """|STFT| with a Hann window of ``win_length`` zero-padded to ``fft_size``.

    Frames start at multiples of ``hop`` with no centering, so frame i covers
    samples [i*hop, i*hop + fft_size).
    """
    if x.dim() == 1:
        x = x.unsqueeze(0)
    if x.size(-1) < fft_size:
        raise ShapeError(
            f"signal of {x.size(-1)} samples is shorter than fft_size "
            f"{fft_size}; no STFT frame fits"
        )
    window = torch.hann_window(win_length, dtype=x.dtype, device=x.device)
    spec = torch.stft(
        x,
        n_fft=fft_size,
        hop_length=hop,
        win_length=win_length,
        window=window,
        center=False,
        return_complex=True,
    )
    return spec.abs()


def spectral_convergence(ref_mag: Tensor, est_mag: Tensor) -> Tensor:
    """||R - E||_F / ||R||_F, averaged over the batch."""
    ref_norm = ref_mag.flatten(1).norm(dim=1)
    if (ref_norm == 0).any():
        raise DegenerateSignalError("reference is silent at this resolution")
    return ((ref_mag - est_mag).flatten(1).norm(dim=1) / ref_norm).mean()


def log_magnitude_l1(
    ref_mag: Tensor, est_mag: Tensor, floor: float = 1e-7
) -> Tensor:
    return (
        torch.log(ref_mag.clamp(min=floor)) - torch.log(est_mag.clamp(min=floor))
    ).abs().mean()


def mrstft(
    ref: Tensor,
    est: Tensor,
    resolutions: Sequence[tuple[int, int, int]] = DEFAULT_RESOLUTIONS,
    log_floor: float = 1e-7,
) -> Tensor:
    """Multi-resolution STFT loss: spectral convergence + log-magnitude L1,
    averaged over the configured resolutions."""
    if ref.shape != est.shape:
        raise ShapeError(
            f"mrstft needs equal lengths, got {tuple(ref.shape)} vs "
            f"{tuple(est.shape)}"
        )
    terms = []
    for fft_size, hop, win_length in resolutions:
        ref_mag = stft_magnitudes(ref, fft_size, hop, win_length)
        est_mag = stft_magnitudes(est, fft_size, hop, win_length)
        terms.append(
            spectral_convergence(ref_mag, est_mag)
            + log_magnitude_l1(ref_mag, est_mag, log_floor)
        )
    return torch.stack(terms).mean()


def mel_filterbank(
    n_mels: int, fft_size: int, sample_rate: int, dtype=torch.float32
) -> Tensor:
    """Triangular mel filters, [n_mels x (fft_size // 2 + 1)]."""

    def hz_to_mel(f):
        return 2595.0 * math.log10(1.0 + f / 700.0)

    def mel_to_hz(m):
        return 700.0 * (10.0 ** (m / 2595.0) - 1.0)

    n_bins = fft_size // 2 + 1
    mel_points = torch.linspace(0.0, hz_to_mel(sample_rate / 2), n_mels + 2)
    hz_points = torch.tensor([mel_to_hz(m.item()) for m in mel_points])
    bins = hz_points / (sample_rate / 2) * (n_bins - 1)
    fb = torch.zeros(n_mels, n_bins, dtype=dtype)
    for m in range(n_mels):
        lo, center, hi = bins[m], bins[m + 1], bins[m + 2]
        for k in range(n_bins):
            if lo <= k <= center and center > lo:
                fb[m, k] = (k - lo) / (center - lo)
            elif center < k <= hi and hi > center:
                fb[m, k] = (hi - k) / (hi - center)
    return fb


def mel_distance(
    ref: Tensor,
    est: Tensor,
    fft_size: int = 1024,
    hop: int = 256,
    n_mels: int = 64,
    sample_rate: int = 16000,
    log_floor: float = 1e-7,
) -> Tensor:
    """L1 distance between log-mel spectrograms (alternative recon loss)."""
    ref_mag = stft_magnitudes(ref, fft_size, hop, fft_size)
    est_mag = stft_magnitudes(est, fft_size, hop, fft_size)
    fb = mel_filterbank(n_mels, fft_size, sample_rate, dtype=ref_mag.dtype)
    ref_mel = torch.einsum("mk,bkt->bmt", fb, ref_mag)
    est_mel = torch.einsum("mk,bkt->bmt", fb, est_mag)
    return log_magnitude_l1(ref_mel, est_mel, log_floor)


def sisdr_loss(ref: Tensor, est: Tensor, eps: float = 1e-8) -> Tensor:
    """Negative scale-invariant SDR in dB (alternative recon loss)."""
    if ref.dim() == 1:
        ref, est = ref.unsqueeze(0), est.unsqueeze(0)
    alpha = (est * ref).sum(-1, keepdim=True) / (ref.pow(2).sum(-1, keepdim=True) + eps)
    target = alpha * ref
    residual = est - target
    ratio = target.pow(2).sum(-1) / (residual.pow(2).sum(-1) + eps)
    return -(10.0 * torch.log10(ratio + eps)).mean()


def reconstruction_terms(
    ref: Tensor,
    est: Tensor,
    kind: str = "mrstft",
    resolutions: Sequence[tuple[int, int, int]] = DEFAULT_RESOLUTIONS,
    log_floor: float = 1e-7,
) -> dict[str, Tensor]:
    """Itemized reconstruction terms for the requested variant."""
    if kind == "mrstft":
        return {"mrstft": mrstft(ref, est, resolutions, log_floor)}
    if kind == "mel":
        return {"mel": mel_distance(ref, est, log_floor=log_floor)}
    if kind == "sisdr":
        return {"sisdr": sisdr_loss(ref, est)}
    if kind == "mrstft+sisdr":
        return {
            "mrstft": mrstft(ref, est, resolutions, log_floor),
            "sisdr": sisdr_loss(ref, est),
        }
    raise ConfigError(f"unknown reconstruction loss {kind!r}")


def reconstruction_loss(
    ref: Tensor,
    est: Tensor,
    kind: str = "mrstft",
    resolutions: Sequence[tuple[int, int, int]] = DEFAULT_RESOLUTIONS,
    log_floor: float = 1e-7,
) -> Tensor:
    terms = reconstruction_terms(ref, est, kind, resolutions, log_floor)
    return sum(terms.values())


def generator_loss(
    disc_real: Sequence,
    disc_fake: Sequence,
    ref: Tensor,
    est: Tensor,
    fm_weight: float = 2.0,
    rec_weight: float = 1.0,
    recon: str = "mrstft",
    resolutions: Sequence[tuple[int, int, int]] = DEFAULT_RESOLUTIONS,
    log_floor: float = 1e-7,
) -> LossReport:
    """Composite generator objective: adversarial + feature matching + recon.

    ``disc_real``/``disc_fake`` are parallel per-discriminator outputs with
    ``score`` and ``features`` attributes. Components in the report are the
    weighted contributions, so their sum equals the total.
    """
    if len(disc_real) != len(disc_fake):
        raise ConfigError(
            f"generator_loss got {len(disc_real)} real vs {len(disc_fake)} "
            "fake discriminator outputs"
        )
    adv_g = sum(
        lsgan_losses(r.score, f.score)[1] for r, f in zip(disc_real, disc_fake)
    )
    fm = feature_matching(
        [r.features for r in disc_real], [f.features for f in disc_fake]
    )
    rec_terms = reconstruction_terms(ref, est, recon, resolutions, log_floor)
    total = adv_g + fm_weight * fm + rec_weight * sum(rec_terms.values())
    components = {
        "adv_g": float(adv_g.detach()),
        "fm": float(fm_weight * fm.detach()),
    }
    for name, term in rec_terms.items():
        components[name] = float(rec_weight * term.detach())
    return LossReport(total=total, components=components)


def discriminator_loss(outputs_real: Sequence, outputs_fake: Sequence) -> Tensor:
    """Sum of least-squares discriminator losses over the ensemble."""
    if len(outputs_real) != len(outputs_fake):
        raise ConfigError(
            f"discriminator_loss got {len(outputs_real)} real vs "
            f"{len(outputs_fake)} fake outputs"
        )
    return sum(
        lsgan_losses(r.score, f.score)[0]
        for r, f in zip(outputs_real, outputs_fake)
    )


def hybrid_loss(
    gen_report: LossReport, nll_value: Tensor | float, weight: float
) -> Tensor:
    """Generator total plus ``weight`` times the likelihood term."""
    return gen_report.total + weight * torch.as_tensor(nll_value)
