"""Attack success rate, transfer success rate, and perturbation SNR.

The exclusion-set bookkeeping matters as much as the ratios: clean
misclassifications by the source never enter an attack set, and clean
misclassifications by the transfer target are removed from the transfer
denominator. Reports carry the raw counts so every ratio can be re-derived.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .audio import Waveform

INF_SNR = math.inf


@dataclass(frozen=True)
class EvalRecord:
    clip_id: str
    clean_label: str
    source_model_id: str
    target_model_id: str
    clean_prediction_on_target: str
    adv_prediction_on_target: str


@dataclass(frozen=True)
class TransferCell:
    source_model_id: str
    target_model_id: str
    tsr: float
    n_numerator: int
    n_denominator: int

    def __post_init__(self):
        if self.n_denominator > 0:
            expected = self.n_numerator / self.n_denominator
            if abs(self.tsr - expected) > 1e-12:
                raise ValueError("tsr must equal n_numerator / n_denominator")


def asr(adv_set, source_model_errors: set[str], total_spoof_count: int) -> float:
    """Fraction of eligible (correctly classified) spoof clips whose attack succeeded."""
    denominator = total_spoof_count - len(source_model_errors)
    if denominator <= 0:
        raise ValueError("no eligible clips: source misclassified every spoof sample")
    if len(adv_set) != denominator:
        raise ValueError(
            f"attack set covers {len(adv_set)} clips but {denominator} are eligible"
        )
    numerator = sum(1 for ex in adv_set if ex.success_on_source)
    return numerator / denominator


def tsr_from_records(source_model_id: str, target_model_id: str,
                     records: list[EvalRecord], target_label: str) -> TransferCell:
    """Transfer success from per-clip clean/adversarial predictions on the target.

    records must cover exactly S (the source-successful examples). Clips whose
    clean original the target already misclassifies are excluded from the
    denominator; the numerator counts remaining clips pushed to target_label.
    """
    if not records:
        raise ValueError("empty source-success set")
    kept = [r for r in records if r.clean_prediction_on_target == r.clean_label]
    if not kept:
        raise ValueError(
            f"target {target_model_id} misclassifies every clean original")
    numerator = sum(1 for r in kept if r.adv_prediction_on_target == target_label)
    return TransferCell(source_model_id, target_model_id,
                        numerator / len(kept), numerator, len(kept))


def snr_db(clean: Waveform, adv: Waveform) -> float:
    """Amplitude-ratio SNR: 10*log10(||clean|| / ||adv - clean||), in dB.

    This is the benchmark's headline perturbation metric. Note it is
    10*log10 of an amplitude (not power) ratio, half the conventional dB
    figure; standard_snr_db provides the conventional one.
    """
    r = _residual(clean, adv)
    clean64 = clean.samples.astype(np.float64)
    signal = math.sqrt(float(np.sum(clean64 * clean64)))
    if signal == 0.0:
        raise ValueError("clean signal has zero energy")
    noise = math.sqrt(float(np.sum(r * r)))
    if noise == 0.0:
        return INF_SNR
    return 10.0 * math.log10(signal / noise)


def standard_snr_db(clean: Waveform, adv: Waveform) -> float:
    """Conventional power-ratio SNR: 10*log10(sum(clean^2) / sum(r^2)), in dB."""
    r = _residual(clean, adv)
    clean64 = clean.samples.astype(np.float64)
    signal = float(np.sum(clean64 * clean64))
    if signal == 0.0:
        raise ValueError("clean signal has zero energy")
    noise = float(np.sum(r * r))
    if noise == 0.0:
        return INF_SNR
    return 10.0 * math.log10(signal / noise)


def _residual(clean: Waveform, adv: Waveform) -> np.ndarray:
    if len(clean) != len(adv):
        raise ValueError(f"length mismatch: {len(clean)} vs {len(adv)}")
    return adv.samples.astype(np.float64) - clean.samples.astype(np.float64)


def format_snr(value: float) -> str:
    """Serialized SNR: finite values to 4 decimals, the infinite sentinel as 'inf'."""
    if math.isinf(value):
        return "inf"
    return f"{value:.4f}"
