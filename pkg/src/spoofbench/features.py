"""Input features and their waveform gradients.

Four feature families feed the classifiers: log power spectrograms (SPEC),
linear-filterbank cepstra (LFCC), mel-filterbank cepstra (MFCC), and the raw
waveform itself (WAVE). Cepstral features optionally carry delta and
delta-delta channels. Every stage of the forward pipeline has a hand-written
adjoint so that a loss gradient in feature space can be pulled back to the
individual audio samples, which is what the waveform-domain attacks need.

All stages are linear except the squared-magnitude spectrum and the log
compression, whose adjoints are derived explicitly below.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from pathlib import Path

import numpy as np

from .audio import Waveform
from .errors import ConfigError, LengthError

LOG_FLOOR = 1e-10
DELTA_WINDOW = 2
DEFAULT_N_FILTERS = 128
DEFAULT_WIN = 1024
DEFAULT_HOP = 512


class FeatureKind(Enum):
    LFCC = "LFCC"
    MFCC = "MFCC"
    SPEC = "SPEC"
    WAVE = "WAVE"


class FilterScale(Enum):
    LINEAR = "linear"
    MEL = "mel"


@dataclass(frozen=True)
class FeatureConfig:
    kind: FeatureKind
    sample_rate: int
    n_fft: int | None = None
    win_length: int | None = None
    hop_length: int | None = None
    n_filters: int | None = None
    n_coeffs: int | None = None
    with_deltas: bool = False
    name: str = ""

    def __post_init__(self):
        if self.kind is FeatureKind.WAVE:
            if any(v is not None for v in
                   (self.n_fft, self.win_length, self.hop_length,
                    self.n_filters, self.n_coeffs)) or self.with_deltas:
                raise ConfigError("WAVE takes no framing or filter parameters")
            return
        if self.n_fft is None or self.win_length is None or self.hop_length is None:
            raise ConfigError(f"{self.kind.value} requires n_fft/win_length/hop_length")
        if not (0 < self.hop_length <= self.win_length <= self.n_fft):
            raise ConfigError(
                f"need hop <= win <= n_fft, got {self.hop_length}/"
                f"{self.win_length}/{self.n_fft}"
            )
        if self.kind is FeatureKind.SPEC:
            if self.n_filters is not None or self.n_coeffs is not None or self.with_deltas:
                raise ConfigError("SPEC takes no filterbank/cepstral parameters")
        else:
            if self.n_filters is None or self.n_coeffs is None:
                raise ConfigError(f"{self.kind.value} requires n_filters and n_coeffs")
            if not (1 <= self.n_coeffs <= self.n_filters):
                raise ConfigError(
                    f"need 1 <= n_coeffs <= n_filters, got "
                    f"{self.n_coeffs}/{self.n_filters}"
                )

    @property
    def n_bins(self) -> int:
        return self.n_fft // 2 + 1

    def frame_count(self, n_samples: int) -> int:
        if n_samples < self.win_length:
            raise LengthError(
                f"waveform of {n_samples} samples shorter than one "
                f"{self.win_length}-sample window"
            )
        return 1 + (n_samples - self.win_length) // self.hop_length


VARIANT_NAMES = (
    "LFCC60", "LFCC70", "LFCC80",
    "MFCC30", "MFCC40", "MFCC80",
    "SPEC1024", "SPEC2048", "SPEC3072",
    "WAVE",
)


def variant_config(name: str, sample_rate: int = 16000) -> FeatureConfig:
    """Resolve one of the named feature variants to a full config."""
    if name == "WAVE":
        return FeatureConfig(FeatureKind.WAVE, sample_rate, name=name)
    for kind in (FeatureKind.LFCC, FeatureKind.MFCC):
        if name.startswith(kind.value):
            n_coeffs = int(name[len(kind.value):])
            return FeatureConfig(
                kind, sample_rate, n_fft=DEFAULT_WIN, win_length=DEFAULT_WIN,
                hop_length=DEFAULT_HOP, n_filters=DEFAULT_N_FILTERS,
                n_coeffs=n_coeffs, with_deltas=True, name=name,
            )
    if name.startswith("SPEC"):
        n_fft = int(name[4:])
        return FeatureConfig(
            FeatureKind.SPEC, sample_rate, n_fft=n_fft, win_length=DEFAULT_WIN,
            hop_length=DEFAULT_HOP, name=name,
        )
    raise ConfigError(f"unknown feature variant {name!r}")


@dataclass(frozen=True)
class FeatureTensor:
    """(channels x coefficients x frames) array plus the config that made it."""

    data: np.ndarray
    config: FeatureConfig

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValueError("feature tensor must have 3 axes")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("feature tensor contains non-finite values")


@dataclass(frozen=True)
class FilterBank:
    weights: np.ndarray
    scale: FilterScale


def hann_window(n: int) -> np.ndarray:
    """Symmetric Hann: w[k] = 0.5 - 0.5*cos(2*pi*k/(n-1))."""
    if n < 2:
        raise ValueError("window length must be >= 2")
    k = np.arange(n, dtype=np.float64)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * k / (n - 1))


def frame_signal(wave: Waveform, win_length: int, hop_length: int) -> np.ndarray:
    """Slice into overlapping frames; the tail that fills no full window is dropped."""
    return _frame_batch(wave.samples[None, :], win_length, hop_length)[0]


def _frame_batch(x: np.ndarray, win: int, hop: int) -> np.ndarray:
    n = x.shape[-1]
    if n < win:
        raise LengthError(f"waveform of {n} samples shorter than one {win}-sample window")
    n_frames = 1 + (n - win) // hop
    idx = hop * np.arange(n_frames)[:, None] + np.arange(win)[None, :]
    return x[..., idx]


def _unframe_batch(g_frames: np.ndarray, n: int, hop: int) -> np.ndarray:
    """Adjoint of framing: overlap-add frame gradients back onto samples."""
    batch, n_frames, win = g_frames.shape
    out = np.zeros((batch, n), dtype=g_frames.dtype)
    for f in range(n_frames):
        out[:, f * hop: f * hop + win] += g_frames[:, f]
    return out


def power_spectrum(frames: np.ndarray, n_fft: int, window: np.ndarray) -> np.ndarray:
    """Window each frame, zero-pad to n_fft, and keep squared-magnitude bins 0..n_fft/2."""
    if window.shape[0] != frames.shape[-1]:
        raise ValueError("window length must equal frame width")
    if frames.shape[-1] > n_fft:
        raise ValueError("frame width must not exceed n_fft")
    spec = np.fft.rfft(frames * window, n=n_fft, axis=-1)
    return spec.real**2 + spec.imag**2


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def _triangle_bank(centers_hz: np.ndarray, n_fft: int, sample_rate: int,
                   scale: FilterScale) -> FilterBank:
    # centers_hz has n_filters + 2 entries: [left edge, c_1 .. c_n, right edge].
    n_filters = centers_hz.shape[0] - 2
    bin_hz = np.arange(n_fft // 2 + 1, dtype=np.float64) * sample_rate / n_fft
    weights = np.zeros((n_filters, n_fft // 2 + 1), dtype=np.float64)
    for k in range(1, n_filters + 1):
        left, center, right = centers_hz[k - 1], centers_hz[k], centers_hz[k + 1]
        rising = (bin_hz - left) / (center - left)
        falling = (right - bin_hz) / (right - center)
        tri = np.minimum(rising, falling)
        row = np.maximum(tri, 0.0)
        peak = row.max()
        if peak <= 0.0:
            raise ConfigError(
                f"filter {k} has no spectral support: {n_filters} filters exceed "
                f"the resolution of n_fft={n_fft} at {sample_rate} Hz"
            )
        weights[k - 1] = row / peak
    return FilterBank(weights, scale)


def linear_filterbank(n_filters: int, n_fft: int, sample_rate: int) -> FilterBank:
    """Unit-peak triangles with centers equally spaced in Hz over (0, sr/2)."""
    if n_filters < 1:
        raise ConfigError("n_filters must be >= 1")
    centers = np.linspace(0.0, sample_rate / 2.0, n_filters + 2)
    return _triangle_bank(centers, n_fft, sample_rate, FilterScale.LINEAR)


def mel_filterbank(n_filters: int, n_fft: int, sample_rate: int) -> FilterBank:
    """As linear_filterbank but centers equally spaced on the mel scale."""
    if n_filters < 1:
        raise ConfigError("n_filters must be >= 1")
    mels = np.linspace(0.0, float(_hz_to_mel(sample_rate / 2.0)), n_filters + 2)
    return _triangle_bank(_mel_to_hz(mels), n_fft, sample_rate, FilterScale.MEL)


def dct2_matrix(n_filters: int, n_coeffs: int) -> np.ndarray:
    """Orthonormal DCT-II rows, truncated to the first n_coeffs."""
    if not 1 <= n_coeffs <= n_filters:
        raise ValueError("need 1 <= n_coeffs <= n_filters")
    j = np.arange(n_filters, dtype=np.float64)
    k = np.arange(n_coeffs, dtype=np.float64)[:, None]
    mat = np.cos(np.pi * (2.0 * j + 1.0) * k / (2.0 * n_filters))
    mat *= np.sqrt(2.0 / n_filters)
    mat[0] *= np.sqrt(0.5)
    return mat


def dct2(matrix: np.ndarray, n_coeffs: int) -> np.ndarray:
    """Orthonormal DCT-II along the filter axis, keeping the first n_coeffs."""
    return matrix @ dct2_matrix(matrix.shape[-1], n_coeffs).T


def delta_matrix(n_frames: int, window_n: int = DELTA_WINDOW) -> np.ndarray:
    """Time-regression matrix M with d = c @ M.T, using edge replication."""
    if window_n < 1 or n_frames < 1:
        raise ValueError("window_n and n_frames must be >= 1")
    denom = 2.0 * sum(n * n for n in range(1, window_n + 1))
    mat = np.zeros((n_frames, n_frames), dtype=np.float64)
    for t in range(n_frames):
        for n in range(1, window_n + 1):
            mat[t, min(t + n, n_frames - 1)] += n / denom
            mat[t, max(t - n, 0)] -= n / denom
    return mat


def delta(feature: np.ndarray, window_n: int = DELTA_WINDOW) -> np.ndarray:
    """Regression delta along the frame (last) axis."""
    return feature @ delta_matrix(feature.shape[-1], window_n).T


class _Plan:
    """Precomputed constants for one feature config (float64 masters)."""

    def __init__(self, config: FeatureConfig):
        self.config = config
        if config.kind is FeatureKind.WAVE:
            return
        self.window = hann_window(config.win_length)
        if config.kind is FeatureKind.LFCC:
            self.bank = linear_filterbank(
                config.n_filters, config.n_fft, config.sample_rate).weights
        elif config.kind is FeatureKind.MFCC:
            self.bank = mel_filterbank(
                config.n_filters, config.n_fft, config.sample_rate).weights
        else:
            self.bank = None
        if config.kind in (FeatureKind.LFCC, FeatureKind.MFCC):
            self.dct = dct2_matrix(config.n_filters, config.n_coeffs)


@lru_cache(maxsize=None)
def _plan(config: FeatureConfig) -> _Plan:
    return _Plan(config)


@lru_cache(maxsize=None)
def _delta_mat(n_frames: int) -> np.ndarray:
    return delta_matrix(n_frames, DELTA_WINDOW)


class _ExtractContext:
    """Intermediates kept by the forward pass for the adjoint sweep."""

    __slots__ = ("config", "n_samples", "dtype", "window", "bank", "dct",
                 "dmat", "spec", "power", "bank_out")

    def __init__(self, config, n_samples, dtype):
        self.config = config
        self.n_samples = n_samples
        self.dtype = dtype


def _extract_batch(x: np.ndarray, config: FeatureConfig):
    """Forward features for a (batch, n_samples) array; returns (data, ctx).

    data has shape (batch, channels, coefficients, frames). The context
    carries every intermediate needed by _extract_batch_backward.
    """
    dtype = x.dtype.type
    ctx = _ExtractContext(config, x.shape[-1], dtype)
    if config.kind is FeatureKind.WAVE:
        return x[:, None, None, :], ctx
    plan = _plan(config)
    ctx.window = plan.window.astype(dtype)
    frames = _frame_batch(x, config.win_length, config.hop_length)
    spec = np.fft.rfft(frames * ctx.window, n=config.n_fft, axis=-1)
    power = spec.real**2 + spec.imag**2
    ctx.spec = spec
    ctx.power = power
    if config.kind is FeatureKind.SPEC:
        data = np.log(power + dtype(LOG_FLOOR))
        return data.transpose(0, 2, 1)[:, None, :, :], ctx
    ctx.bank = plan.bank.astype(dtype)
    ctx.dct = plan.dct.astype(dtype)
    bank_out = power @ ctx.bank.T
    ctx.bank_out = bank_out
    cepstra = np.log(bank_out + dtype(LOG_FLOOR)) @ ctx.dct.T
    static = cepstra.transpose(0, 2, 1)
    if not config.with_deltas:
        return static[:, None, :, :], ctx
    ctx.dmat = _delta_mat(static.shape[-1]).astype(dtype)
    d1 = static @ ctx.dmat.T
    d2 = d1 @ ctx.dmat.T
    return np.stack([static, d1, d2], axis=1), ctx


def _extract_batch_backward(ctx: _ExtractContext, upstream: np.ndarray) -> np.ndarray:
    """Pull a feature-space gradient back to (batch, n_samples)."""
    config = ctx.config
    dtype = ctx.dtype
    if config.kind is FeatureKind.WAVE:
        return upstream[:, 0, 0, :].astype(dtype, copy=True)
    if config.kind is FeatureKind.SPEC:
        g_log = upstream[:, 0].transpose(0, 2, 1)
        g_power = g_log / (ctx.power + dtype(LOG_FLOOR))
    else:
        if config.with_deltas:
            g_static = (upstream[:, 0]
                        + upstream[:, 1] @ ctx.dmat
                        + upstream[:, 2] @ ctx.dmat @ ctx.dmat)
        else:
            g_static = upstream[:, 0]
        g_cepstra = g_static.transpose(0, 2, 1)
        g_logbank = g_cepstra @ ctx.dct
        g_bank = g_logbank / (ctx.bank_out + dtype(LOG_FLOOR))
        g_power = g_bank @ ctx.bank
    # Squared-magnitude DFT adjoint. With P_k = |X_k|^2 and real frames,
    # dL/dframe[n] = 2*Re(sum_k g_k X_k e^{i 2pi k n / N}); realized through
    # irfft by doubling the DC and Nyquist taps of Y = g * X.
    y = (g_power * ctx.spec).astype(np.complex64 if dtype == np.float32
                                    else np.complex128)
    y[..., 0] *= 2.0
    if config.n_fft % 2 == 0:
        y[..., -1] *= 2.0
    g_windowed = config.n_fft * np.fft.irfft(y, n=config.n_fft, axis=-1)
    g_frames = g_windowed[..., :config.win_length].astype(dtype) * ctx.window
    grad = _unframe_batch(g_frames, ctx.n_samples, config.hop_length)
    return grad


def extract(wave: Waveform, config: FeatureConfig) -> FeatureTensor:
    """Compute the configured feature for one waveform."""
    if config.sample_rate != wave.sample_rate:
        raise ConfigError(
            f"config expects {config.sample_rate} Hz, waveform is {wave.sample_rate} Hz"
        )
    data, _ = _extract_batch(wave.samples[None, :], config)
    return FeatureTensor(data[0], config)


def extract_backward(wave: Waveform, config: FeatureConfig,
                     upstream: np.ndarray) -> np.ndarray:
    """Gradient of <upstream, extract(wave)> with respect to the samples."""
    data, ctx = _extract_batch(wave.samples[None, :], config)
    if upstream.shape != data[0].shape:
        raise ValueError(
            f"upstream shape {upstream.shape} != feature shape {data[0].shape}"
        )
    return _extract_batch_backward(ctx, upstream[None].astype(data.dtype))[0]


def dump_feature(tensor: FeatureTensor, path: str | Path) -> None:
    """Self-describing binary dump: uint32 ndim, uint32 dims, float32 data (LE, row-major)."""
    data = np.ascontiguousarray(tensor.data, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(np.asarray([data.ndim], dtype="<u4").tobytes())
        fh.write(np.asarray(data.shape, dtype="<u4").tobytes())
        fh.write(data.tobytes())


def load_feature_dump(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        ndim = int(np.frombuffer(fh.read(4), dtype="<u4")[0])
        shape = tuple(np.frombuffer(fh.read(4 * ndim), dtype="<u4"))
        data = np.frombuffer(fh.read(), dtype="<f4").reshape(shape)
    return data.astype(np.float32)
