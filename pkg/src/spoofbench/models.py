"""Trainable spoof/bona-fide classifiers bound to one feature and input length.

Two small families: a 2D residual conv net for spectro-temporal features and
a 1D conv net for raw waveforms. Feature extraction runs inside the forward
pass, so the loss gradient reaches the individual audio samples; that is the
quantity the waveform attacks consume.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path

import numpy as np

from . import nn
from .audio import Corpus, Label, Split, Waveform, clip_waveform
from .errors import ConfigError, LengthError, NumericsError
from .features import (FeatureConfig, FeatureKind, _extract_batch,
                       _extract_batch_backward)

INPUT_LENGTHS = (40000, 48000, 64600)
LENGTH_CODES = {40000: "4", 48000: "48", 64600: "646"}

# Fixed multiplier on the head logits. Decisions stay argmax-identical; the
# scale sharpens confidences so iterative sign attacks settle within a few
# steps instead of accumulating perturbation over the whole iteration budget.
LOGIT_SCALE = 512.0

LABEL_INDEX = {Label.BONAFIDE: 0, Label.SPOOF: 1}
CHECKPOINT_MAGIC = b"STBM1"


class ModelFamily(Enum):
    CONV2D_RESIDUAL = "res"
    CONV1D_RAW = "raw"


@dataclass(frozen=True)
class ModelSpec:
    family: ModelFamily
    feature: FeatureConfig
    input_len: int
    width: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.family is ModelFamily.CONV2D_RESIDUAL:
            if self.feature.kind not in (FeatureKind.LFCC, FeatureKind.MFCC,
                                         FeatureKind.SPEC):
                raise ConfigError("2D residual family requires LFCC/MFCC/SPEC input")
        else:
            if self.feature.kind is not FeatureKind.WAVE:
                raise ConfigError("1D raw family requires WAVE input")
        if self.input_len <= 0:
            raise ConfigError("input_len must be positive")
        if self.width < 1:
            raise ConfigError("width must be >= 1")

    @property
    def model_id(self) -> str:
        feat = self.feature.name or self.feature.kind.value
        code = LENGTH_CODES.get(self.input_len, str(self.input_len))
        return f"{feat}+{self.family.value}{code}"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 16
    learning_rate: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if min(self.epochs, self.batch_size) < 1 or self.learning_rate <= 0:
            raise ConfigError("epochs, batch_size, learning_rate must be positive")


@dataclass
class TrainedModel:
    spec: ModelSpec
    net: nn.Sequential
    train_stats: tuple[float, float] | None = None

    @property
    def model_id(self) -> str:
        return self.spec.model_id

    @property
    def parameters(self) -> dict[str, np.ndarray]:
        return dict(self.net.named_params())


def _res_block_2d(width, rng):
    return nn.Residual(nn.Sequential([
        ("conv1", nn.Conv2d(width, width, 3, 1, 1, rng)),
        ("bn1", nn.BatchNorm(width)),
        ("relu", nn.ReLU()),
        ("conv2", nn.Conv2d(width, width, 3, 1, 1, rng)),
        ("bn2", nn.BatchNorm(width)),
    ]))


def _res_block_1d(width, rng):
    return nn.Residual(nn.Sequential([
        ("conv1", nn.Conv1d(width, width, 3, 1, 1, rng)),
        ("bn1", nn.BatchNorm(width)),
        ("relu", nn.ReLU()),
        ("conv2", nn.Conv1d(width, width, 3, 1, 1, rng)),
        ("bn2", nn.BatchNorm(width)),
    ]))


def _build_net(spec: ModelSpec) -> nn.Sequential:
    rng = np.random.default_rng(spec.seed)
    w = spec.width
    if spec.family is ModelFamily.CONV2D_RESIDUAL:
        in_ch = 3 if spec.feature.with_deltas else 1
        coeffs = spec.feature.n_coeffs or spec.feature.n_bins
        # SPEC maps carry 513-1537 frequency rows at ~8-16 Hz resolution,
        # where a small net can latch onto per-bin noise texture; averaging
        # the grid down before any convolution forces it onto band envelopes
        # and brings the map to the same size class as the cepstral inputs.
        # Cepstral inputs are normalized per coefficient row (rows live on
        # wildly different scales); spectrogram bins share one global norm.
        layers: list
        if spec.feature.kind is FeatureKind.SPEC:
            # Smooth energy stem (square-pool-log instead of a rectifier):
            # on fine-binned spectrograms a rectified stem yields rugged,
            # poorly aligned waveform gradients and erratic attackability.
            layers = [
                ("in_norm", nn.BatchNorm(in_ch)),
                ("pre_pool", nn.AvgPool2d((4, 2))),
                ("stem_conv", nn.Conv2d(in_ch, w, 3, (2, 2), 1, rng)),
                ("stem_sq", nn.Square()),
                ("stem_pool", nn.AvgPool2d((2, 2))),
                ("stem_log", nn.LogEps(1e-6)),
                ("stem_bn", nn.BatchNorm(w)),
            ]
        else:
            layers = [
                ("in_norm", nn.FeatureNorm(in_ch, coeffs)),
                ("stem_conv", nn.Conv2d(in_ch, w, 3, (2, 2), 1, rng)),
                ("stem_bn", nn.BatchNorm(w)),
                ("stem_relu", nn.ReLU()),
                ("stem_pool", nn.AvgPool2d((2, 2))),
            ]
        layers += [
            ("block1", _res_block_2d(w, rng)),
            ("down1", nn.AvgPool2d(2)),
            ("block2", _res_block_2d(w, rng)),
            ("down2", nn.AvgPool2d(2)),
            ("block3", _res_block_2d(w, rng)),
            ("gap", nn.GlobalAvgPool2d()),
            ("head", nn.Linear(w, 2, rng)),
            ("scale", nn.Scale(LOGIT_SCALE)),
        ]
        return nn.Sequential(layers)
    # Energy-detector front end: learned filters followed by a smooth
    # square-pool-log envelope. Smoothness keeps waveform gradients aligned
    # with the band content the filters respond to, which rectifier fronts
    # destroy; the residual stack then works on log-energy trajectories.
    return nn.Sequential([
        ("bands", nn.SpectralSplit(2900.0, 3100.0, spec.feature.sample_rate)),
        ("front_conv", nn.Conv1d(2, w, 16, 4, 6, rng)),
        ("front_sq", nn.Square()),
        ("front_pool", nn.AvgPool1d(8)),
        ("front_log", nn.LogEps(1e-6)),
        ("front_bn", nn.BatchNorm(w)),
        ("block1", _res_block_1d(w, rng)),
        ("down1", nn.AvgPool1d(2)),
        ("block2", _res_block_1d(w, rng)),
        ("down2", nn.AvgPool1d(2)),
        ("block3", _res_block_1d(w, rng)),
        ("pool", nn.GlobalMaxAvgPool1d()),
        ("head", nn.Linear(2 * w, 2, rng)),
        ("scale", nn.Scale(LOGIT_SCALE)),
    ])


def init_model(spec: ModelSpec) -> TrainedModel:
    """Fresh model with fan-in-scaled uniform parameters drawn from spec.seed."""
    return TrainedModel(spec, _build_net(spec))


def count_parameters(model: TrainedModel, trainable_only: bool = True) -> int:
    skip = {"running_mean", "running_var"} if trainable_only else set()
    return sum(v.size for k, v in model.net.named_params()
               if k.rsplit(".", 1)[-1] not in skip)


def _clone(model: TrainedModel) -> TrainedModel:
    fresh = init_model(model.spec)
    for (_, src), (_, dst) in zip(model.net.named_params(), fresh.net.named_params()):
        dst[...] = src
    return TrainedModel(fresh.spec, fresh.net, model.train_stats)


def _check_wave(model: TrainedModel, wave: Waveform):
    if len(wave) != model.spec.input_len:
        raise LengthError(
            f"{model.model_id} expects {model.spec.input_len} samples, got "
            f"{len(wave)}; apply a length transform first"
        )


def _forward_batch(model: TrainedModel, x: np.ndarray, train: bool = False):
    feats, ctx = _extract_batch(x, model.spec.feature)
    if model.spec.family is ModelFamily.CONV1D_RAW:
        net_in = feats[:, 0]                      # (B, 1, L)
    else:
        net_in = feats
    logits = model.net.forward(net_in, train=train)
    return logits, ctx, net_in.shape


def forward(model: TrainedModel, wave: Waveform) -> np.ndarray:
    """Inference-mode logits for one waveform; class 0 bona fide, class 1 spoof."""
    _check_wave(model, wave)
    logits, _, _ = _forward_batch(model, wave.samples[None, :].astype(np.float32))
    return logits[0]


def _loss_grad_batch(model: TrainedModel, x: np.ndarray, target_idx: np.ndarray,
                     need_param_grads: bool = False):
    """Per-sample losses and waveform gradients, inference-mode network."""
    logits, ctx, net_shape = _forward_batch(model, x, train=False)
    loss_vec, dlogits = nn.softmax_cross_entropy(logits, target_idx)
    d_net_in = model.net.backward(dlogits, need_param_grads=need_param_grads)
    if model.spec.family is ModelFamily.CONV1D_RAW:
        d_feats = d_net_in[:, None]
    else:
        d_feats = d_net_in
    grad = _extract_batch_backward(ctx, d_feats)
    return loss_vec, grad, logits


def loss_and_wave_grad(model: TrainedModel, wave: Waveform, target: Label,
                       dtype=np.float32) -> tuple[float, np.ndarray]:
    """Cross-entropy against the target label and its exact sample gradient.

    dtype selects the computation precision; float64 is used by the
    finite-difference verification path.
    """
    _check_wave(model, wave)
    x = wave.samples[None, :].astype(dtype)
    t = np.array([LABEL_INDEX[target]])
    loss_vec, grad, _ = _loss_grad_batch(model, x, t)
    return float(loss_vec[0]), grad[0]


def _feature_cache(model: TrainedModel, waves: list[np.ndarray],
                   chunk: int = 32) -> np.ndarray:
    parts = []
    for i in range(0, len(waves), chunk):
        x = np.stack(waves[i:i + chunk]).astype(np.float32)
        feats, _ = _extract_batch(x, model.spec.feature)
        if model.spec.family is ModelFamily.CONV1D_RAW:
            feats = feats[:, 0]
        parts.append(feats)
    return np.concatenate(parts, axis=0)


def _accuracy_from_features(model: TrainedModel, feats: np.ndarray,
                            labels: np.ndarray, chunk: int = 32):
    preds = []
    for i in range(0, feats.shape[0], chunk):
        logits = model.net.forward(feats[i:i + chunk], train=False)
        preds.append(logits.argmax(axis=1))
    preds = np.concatenate(preds)
    return float((preds == labels).mean()), preds


def train(model: TrainedModel, corpus: Corpus, cfg: TrainConfig,
          heldout: Corpus | None = None) -> TrainedModel:
    """Mini-batch momentum SGD on cross-entropy; deterministic given (cfg.seed, corpus).

    Clips longer than the model input are clipped to the model's input length
    on load. train_stats records (train accuracy, heldout accuracy); when no
    heldout corpus is given the train accuracy is reported for both.
    """
    if corpus.split is not Split.TRAIN:
        raise ValueError("train() requires a corpus with split=TRAIN")
    if len(corpus) == 0 or len({c.label for c in corpus.clips}) < 2:
        raise ValueError("training corpus must be non-empty with both classes")
    trained = _clone(model)
    input_len = trained.spec.input_len
    waves = [clip_waveform(c.wave, input_len).samples for c in corpus.clips]
    labels = np.array([LABEL_INDEX[c.label] for c in corpus.clips])
    feats = _feature_cache(trained, waves)
    rng = np.random.default_rng(cfg.seed)
    opt = nn.Adam(trained.net, cfg.learning_rate)
    n = feats.shape[0]
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            logits = trained.net.forward(feats[idx], train=True)
            loss_vec, dlogits = nn.softmax_cross_entropy(logits, labels[idx])
            if not np.isfinite(loss_vec).all():
                raise NumericsError(
                    f"{trained.model_id}: non-finite training loss")
            trained.net.backward(dlogits / np.float32(len(idx)))
            opt.step()
    train_acc, _ = _accuracy_from_features(trained, feats, labels)
    if heldout is not None:
        test_acc, _ = evaluate_clipped(trained, heldout)
    else:
        test_acc = train_acc
    trained.train_stats = (train_acc, test_acc)
    return trained


def evaluate(model: TrainedModel, corpus: Corpus) -> tuple[float, set[str]]:
    """Accuracy and the set of misclassified clip ids; lengths must match exactly."""
    if len(corpus) == 0:
        raise ValueError("cannot evaluate an empty corpus")
    for c in corpus.clips:
        _check_wave(model, c.wave)
    waves = [c.wave.samples for c in corpus.clips]
    labels = np.array([LABEL_INDEX[c.label] for c in corpus.clips])
    feats = _feature_cache(model, waves)
    acc, preds = _accuracy_from_features(model, feats, labels)
    errors = {c.id for c, p, l in zip(corpus.clips, preds, labels) if p != l}
    return acc, errors


def evaluate_clipped(model: TrainedModel, corpus: Corpus) -> tuple[float, set[str]]:
    """evaluate() after clipping each clip to the model's input length."""
    clipped = Corpus(
        tuple(type(c)(c.id, clip_waveform(c.wave, model.spec.input_len), c.label)
              for c in corpus.clips),
        corpus.split, corpus.seed)
    return evaluate(model, clipped)


def save_checkpoint(model: TrainedModel, path: str | Path) -> None:
    """Binary checkpoint: magic, count, then (name, dims, float32 LE) records."""
    entries = list(model.net.named_params())
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(entries)))
        for name, arr in entries:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path: str | Path, spec: ModelSpec) -> TrainedModel:
    """Rebuild the architecture from spec and load arrays, validating shapes."""
    model = init_model(spec)
    expected = dict(model.net.named_params())
    with open(path, "rb") as fh:
        if fh.read(5) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint (bad magic)")
        (count,) = struct.unpack("<I", fh.read(4))
        seen = set()
        for _ in range(count):
            (name_len,) = struct.unpack("<I", fh.read(4))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            size = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(fh.read(4 * size), dtype="<f4").reshape(shape)
            if name not in expected:
                raise ValueError(f"{path}: unexpected parameter {name!r}")
            if expected[name].shape != data.shape:
                raise ValueError(
                    f"{path}: {name} has shape {data.shape}, spec wants "
                    f"{expected[name].shape}")
            expected[name][...] = data.astype(np.float32)
            seen.add(name)
    missing = set(expected) - seen
    if missing:
        raise ValueError(f"{path}: missing parameters {sorted(missing)}")
    return model
