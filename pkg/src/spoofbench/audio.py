"""Waveforms, WAV file I/O, the synthetic two-class corpus, and length transforms.

The two length transforms (prefix clipping and self-padding) are the only
ways waveforms move between models with different input sizes; models never
resize their input themselves.
"""

from __future__ import annotations

import csv
import wave as _wave
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import LengthError, MalformedWavError, UnsupportedWavError

DEFAULT_SAMPLE_RATE = 16000

# Synthetic corpus shape constants. Bona fide clips are saturated harmonic
# tones (3-5 partials of one fundamental, all below 2 kHz); spoof clips add
# two artifacts on top of the same construction: a mild amplitude
# quantization of the tone (a time-domain cue) and a low-level band-limited
# noise burst in 3-5 kHz (a spectral cue). The artifacts are small relative
# to the carrier so sign-step attacks with alpha ~1e-3 cross the class
# boundary within a few steps, and the saturation keeps the clean RMS high
# so those small perturbations score a large amplitude-ratio SNR.
SYNTH_PEAK = 0.94
SYNTH_DRIVE = 4.0
SYNTH_NOISE_RMS = (0.0006, 0.0018)
SYNTH_QUANT_STEP = 1.0 / 512.0
SYNTH_BURST_BAND_HZ = (3000.0, 5000.0)
SYNTH_BURST_OVER_FLOOR = (1.1, 1.5)
SYNTH_F0_RANGE_HZ = (90.0, 240.0)
SYNTH_HARMONIC_CEILING_HZ = 1950.0
SYNTH_CARRIER_LOWPASS_HZ = (2000.0, 2900.0)
SYNTH_AMPLITUDE_BOUND = 0.95


class Label(Enum):
    BONAFIDE = "bonafide"
    SPOOF = "spoof"


class Split(Enum):
    TRAIN = "train"
    TEST = "test"


@dataclass(frozen=True)
class Waveform:
    """Mono audio: float samples in nominal [-1, 1] plus a sample rate.

    Stored as float32 unless float64 is passed explicitly (the wide-precision
    gradient verification path needs probe displacements below float32
    resolution).
    """

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        given = np.asarray(self.samples)
        dtype = np.float64 if given.dtype == np.float64 else np.float32
        samples = given.astype(dtype)
        if samples.ndim != 1 or samples.size == 0:
            raise ValueError("waveform must be a non-empty 1-D array")
        if not np.all(np.isfinite(samples)):
            raise ValueError("waveform samples must be finite")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        samples = samples.copy()
        samples.flags.writeable = False
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return self.samples.shape[0]


@dataclass(frozen=True)
class LabeledClip:
    id: str
    wave: Waveform
    label: Label


@dataclass(frozen=True)
class Corpus:
    clips: tuple[LabeledClip, ...]
    split: Split
    seed: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "clips", tuple(self.clips))
        ids = [c.id for c in self.clips]
        if len(set(ids)) != len(ids):
            raise ValueError("clip ids must be unique within a corpus")
        rates = {c.wave.sample_rate for c in self.clips}
        if len(rates) > 1:
            raise ValueError(f"corpus mixes sample rates: {sorted(rates)}")
        if self.split is Split.TRAIN and self.clips:
            if {c.label for c in self.clips} != {Label.BONAFIDE, Label.SPOOF}:
                raise ValueError("training corpus must contain both labels")

    def __len__(self) -> int:
        return len(self.clips)

    @property
    def sample_rate(self) -> int:
        return self.clips[0].wave.sample_rate

    def by_label(self, label: Label) -> list[LabeledClip]:
        return [c for c in self.clips if c.label is label]


def load_wav(path: str | Path) -> Waveform:
    """Read a mono 16-bit PCM RIFF/WAVE file, mapping int16 to [-1, 1)."""
    try:
        reader = _wave.open(str(path), "rb")
    except _wave.Error as exc:
        raise MalformedWavError(f"{path}: {exc}") from exc
    except EOFError as exc:
        raise MalformedWavError(f"{path}: truncated file") from exc
    with reader:
        if reader.getcomptype() != "NONE":
            raise UnsupportedWavError(
                f"{path}: compressed WAV ({reader.getcomptype()}) not supported"
            )
        if reader.getnchannels() != 1:
            raise UnsupportedWavError(
                f"{path}: expected mono, got {reader.getnchannels()} channels"
            )
        if reader.getsampwidth() != 2:
            raise UnsupportedWavError(
                f"{path}: expected 16-bit samples, got {8 * reader.getsampwidth()}-bit"
            )
        n = reader.getnframes()
        raw = reader.readframes(n)
        rate = reader.getframerate()
    data = np.frombuffer(raw, dtype="<i2")
    if data.size != n:
        raise MalformedWavError(f"{path}: frame count mismatch ({data.size} != {n})")
    return Waveform(data.astype(np.float32) / 32768.0, rate)


def save_wav(wave: Waveform, path: str | Path) -> None:
    """Write mono 16-bit PCM; out-of-range samples saturate, never wrap."""
    scaled = np.round(wave.samples.astype(np.float64) * 32768.0)
    ints = np.clip(scaled, -32768, 32767).astype("<i2")
    with _wave.open(str(path), "wb") as writer:
        writer.setnchannels(1)
        writer.setsampwidth(2)
        writer.setframerate(wave.sample_rate)
        writer.writeframes(ints.tobytes())


def clip_waveform(wave: Waveform, target_len: int) -> Waveform:
    """Keep the first target_len samples. Clipping never pads."""
    if target_len <= 0:
        raise LengthError(f"target_len must be positive, got {target_len}")
    if target_len > len(wave):
        raise LengthError(
            f"cannot clip {len(wave)} samples to {target_len}: clipping never pads"
        )
    if target_len == len(wave):
        return wave
    return Waveform(wave.samples[:target_len], wave.sample_rate)


def self_pad_waveform(wave: Waveform, target_len: int) -> Waveform:
    """Extend a waveform by appending its own prefix.

    Only paddings up to a doubling are supported; repeating the prefix more
    than once is refused rather than invented.
    """
    n = len(wave)
    if target_len <= n:
        raise LengthError(
            f"self-padding requires target_len > {n}, got {target_len}"
        )
    if target_len > 2 * n:
        raise LengthError(
            f"self-padding beyond 2x length unsupported ({n} -> {target_len})"
        )
    prefix = wave.samples[: target_len - n]
    return Waveform(np.concatenate([wave.samples, prefix]), wave.sample_rate)


def _clip_rng(seed: int, split: Split, label: Label, index: int) -> np.random.Generator:
    split_code = 0 if split is Split.TRAIN else 1
    label_code = 0 if label is Label.BONAFIDE else 1
    ss = np.random.SeedSequence([int(seed), split_code, label_code, int(index)])
    return np.random.Generator(np.random.PCG64(ss))


def _band_noise(rng: np.random.Generator, n: int, sample_rate: int,
                band: tuple[float, float], rms: float) -> np.ndarray:
    """White noise band-passed by zeroing DFT bins outside the band."""
    white = rng.standard_normal(n)
    spec = np.fft.rfft(white)
    freqs = np.fft.rfftfreq(n, d=1.0 / sample_rate)
    spec[(freqs < band[0]) | (freqs > band[1])] = 0.0
    shaped = np.fft.irfft(spec, n=n)
    scale = rms / max(np.sqrt(np.mean(shaped**2)), 1e-30)
    return shaped * scale


def _synth_clip(rng: np.random.Generator, clip_len: int, sample_rate: int,
                spoof: bool) -> np.ndarray:
    f0 = rng.uniform(*SYNTH_F0_RANGE_HZ)
    n_partials = int(rng.integers(3, 6))
    max_k = int(SYNTH_HARMONIC_CEILING_HZ // f0)
    ks = np.concatenate([[1], 1 + np.sort(
        rng.choice(np.arange(1, max_k), size=n_partials - 1, replace=False))])
    amps = rng.uniform(0.5, 1.0, size=n_partials) / np.sqrt(ks)
    # Schroeder-spread phases keep the multisine crest factor low, which
    # maximizes clean RMS under the fixed amplitude bound.
    power_frac = np.cumsum(amps**2) / np.sum(amps**2)
    phases = np.zeros(n_partials)
    for j in range(1, n_partials):
        phases[j] = phases[j - 1] - 2.0 * np.pi * power_frac[j - 1]
    t = np.arange(clip_len, dtype=np.float64) / sample_rate
    base = np.zeros(clip_len, dtype=np.float64)
    for k, a, p in zip(ks, amps, phases):
        base += a * np.sin(2.0 * np.pi * k * f0 * t + p)
    # Alternate saturation and low-passing: converges toward a band-limited
    # square-ish carrier with low crest factor. High clean RMS keeps the
    # amplitude-ratio SNR of small attack perturbations large, and the
    # low-pass leaves everything above ~2.8 kHz to the spoof artifacts alone.
    freqs = np.fft.rfftfreq(clip_len, d=1.0 / sample_rate)
    lo, hi = SYNTH_CARRIER_LOWPASS_HZ
    rolloff = np.clip((hi - freqs) / (hi - lo), 0.0, 1.0)
    lowpass_gain = 0.5 - 0.5 * np.cos(np.pi * rolloff)
    for _ in range(3):
        base = np.tanh(SYNTH_DRIVE * base / np.sqrt(np.mean(base**2)))
        base = np.fft.irfft(np.fft.rfft(base) * lowpass_gain, n=clip_len)
    base *= SYNTH_PEAK / np.max(np.abs(base))
    if spoof:
        base = np.round(base / SYNTH_QUANT_STEP) * SYNTH_QUANT_STEP
    # The broadband floor level varies clip to clip so that "how clean is the
    # floor" is not a class cue; the burst scales with the clip's own floor,
    # making the 3-5 kHz band-to-floor ratio the discriminative statistic.
    floor_rms = rng.uniform(*SYNTH_NOISE_RMS)
    x = base + rng.normal(0.0, floor_rms, size=clip_len)
    if spoof:
        burst_rms = floor_rms * rng.uniform(*SYNTH_BURST_OVER_FLOOR)
        x = x + _band_noise(rng, clip_len, sample_rate, SYNTH_BURST_BAND_HZ, burst_rms)
    return np.clip(x, -SYNTH_AMPLITUDE_BOUND, SYNTH_AMPLITUDE_BOUND)


def synth_corpus(n_per_class: int, clip_len: int, sample_rate: int, seed: int,
                 split: Split = Split.TRAIN) -> Corpus:
    """Deterministic synthetic two-class corpus.

    Pure function of its arguments: every clip draws from an RNG keyed on
    (seed, split, label, index), so corpora are reproducible bit-for-bit and
    train/test splits generated from one seed never share clips.
    """
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    clips = []
    for label in (Label.BONAFIDE, Label.SPOOF):
        for i in range(n_per_class):
            rng = _clip_rng(seed, split, label, i)
            samples = _synth_clip(rng, clip_len, sample_rate, label is Label.SPOOF)
            clip_id = f"{split.value}-{label.value}-{i:04d}"
            clips.append(LabeledClip(clip_id, Waveform(samples, sample_rate), label))
    return Corpus(tuple(clips), split, seed)


MANIFEST_HEADER = ["id", "path", "label", "split"]


def save_corpus(corpus: Corpus, out_dir: str | Path) -> Path:
    """Write clips as WAV files plus a `id,path,label,split` manifest CSV."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    wav_dir = out / "wav"
    wav_dir.mkdir(exist_ok=True)
    manifest = out / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_HEADER)
        for clip in corpus.clips:
            rel = f"wav/{clip.id}.wav"
            save_wav(clip.wave, out / rel)
            writer.writerow([clip.id, rel, clip.label.value, corpus.split.value])
    return manifest


def load_corpus(manifest_path: str | Path, split: Split,
                expected_rate: int = DEFAULT_SAMPLE_RATE) -> Corpus:
    """Ingest a user corpus from a manifest CSV; rows of other splits are skipped.

    Clips at sample rates other than expected_rate are rejected (resampling
    is out of scope).
    """
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    clips = []
    with open(manifest_path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != MANIFEST_HEADER:
            raise ValueError(
                f"manifest header must be {MANIFEST_HEADER}, got {reader.fieldnames}"
            )
        for row in reader:
            if row["split"] != split.value:
                continue
            wave = load_wav(base / row["path"])
            if wave.sample_rate != expected_rate:
                raise ValueError(
                    f"{row['path']}: sample rate {wave.sample_rate} != {expected_rate}; "
                    "resampling is not supported"
                )
            clips.append(LabeledClip(row["id"], wave, Label(row["label"])))
    return Corpus(tuple(clips), split, seed=None)
