"""Targeted waveform attacks: iterative sign-gradient descent, single-model
and ensemble variants, plus attack-set generation over eligible spoof clips.

Each iteration steps every sample by -alpha * sign(gradient of the
cross-entropy toward the target class), then projects back into the
epsilon-box around the original intersected with [-1, 1]. All iterations
always run (no early success exit); the loop only stops early at an exact
fixed point, where the remaining iterations provably cannot change anything.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio import Corpus, Label, Waveform, load_wav, save_wav
from .errors import LengthError, NumericsError
from .metrics import format_snr, snr_db
from .models import LABEL_INDEX, TrainedModel, _loss_grad_batch

ATTACK_CHUNK = 32


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float
    alpha: float
    iterations: int
    target_label: Label = Label.BONAFIDE

    def __post_init__(self):
        if not 0 < self.alpha <= self.epsilon:
            raise ValueError("need 0 < alpha <= epsilon")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")


@dataclass(frozen=True)
class AdversarialExample:
    source_id: str
    source_model_id: str
    wave: Waveform
    success_on_source: bool
    snr_db: float
    member_success: dict[str, bool] = field(default_factory=dict)


def _sign(g: np.ndarray) -> np.ndarray:
    # sign(0) = 0: zero-gradient coordinates stay untouched.
    return np.sign(g)


def _attack_batch(members: list[TrainedModel], x0: np.ndarray,
                  cfg: AttackConfig) -> np.ndarray:
    """Run the iterative attack on a (batch, n) array; returns the adversaries."""
    dtype = x0.dtype
    lo = np.maximum(x0 - dtype.type(cfg.epsilon), dtype.type(-1.0))
    hi = np.minimum(x0 + dtype.type(cfg.epsilon), dtype.type(1.0))
    target = np.full(x0.shape[0], LABEL_INDEX[cfg.target_label])
    x = x0.copy()
    for _ in range(cfg.iterations):
        grad = None
        for model in members:
            _, g, _ = _loss_grad_batch(model, x, target)
            grad = g if grad is None else grad + g
        if not np.all(np.isfinite(grad)):
            raise NumericsError("non-finite attack gradient")
        stepped = x - dtype.type(cfg.alpha) * _sign(grad)
        nxt = np.clip(stepped, lo, hi)
        if np.array_equal(nxt, x):
            # exact fixed point: every later iteration would reproduce x
            break
        x = nxt
    return x


def _predictions(model: TrainedModel, x: np.ndarray) -> np.ndarray:
    from .models import _forward_batch
    preds = []
    for i in range(0, x.shape[0], ATTACK_CHUNK):
        logits, _, _ = _forward_batch(model, x[i:i + ATTACK_CHUNK])
        preds.append(logits.argmax(axis=1))
    return np.concatenate(preds)


def _examples_from_batch(members: list[TrainedModel], ids: list[str],
                         x0: np.ndarray, x_adv: np.ndarray, cfg: AttackConfig,
                         sample_rate: int, source_label: str) -> list[AdversarialExample]:
    target_idx = LABEL_INDEX[cfg.target_label]
    member_preds = {m.model_id: _predictions(m, x_adv) for m in members}
    out = []
    for row, clip_id in enumerate(ids):
        clean = Waveform(x0[row], sample_rate)
        adv = Waveform(x_adv[row], sample_rate)
        member_success = {mid: bool(preds[row] == target_idx)
                          for mid, preds in member_preds.items()}
        out.append(AdversarialExample(
            source_id=clip_id,
            source_model_id=source_label,
            wave=adv,
            success_on_source=all(member_success.values()),
            snr_db=snr_db(clean, adv),
            member_success=member_success,
        ))
    return out


def ifgsm(model: TrainedModel, wave: Waveform, cfg: AttackConfig) -> AdversarialExample:
    """Single-model targeted attack on one waveform."""
    if len(wave) != model.spec.input_len:
        raise LengthError(
            f"{model.model_id} expects {model.spec.input_len} samples, got {len(wave)}")
    x0 = wave.samples[None, :].astype(np.float32)
    x_adv = _attack_batch([model], x0, cfg)
    return _examples_from_batch(
        [model], ["<single>"], x0, x_adv, cfg, wave.sample_rate, model.model_id)[0]


def ensemble_id(members: list[TrainedModel]) -> str:
    return "ens(" + "&".join(m.model_id for m in members) + ")"


def ifgsm_ensemble(members: list[TrainedModel], wave: Waveform,
                   cfg: AttackConfig) -> AdversarialExample:
    """Attack driven by the unweighted sum of the member models' gradients.

    With a single member this reduces exactly to ifgsm. Success on source
    requires fooling every member; per-member outcomes are recorded.
    """
    if not members:
        raise ValueError("ensemble needs at least one member")
    lengths = {m.spec.input_len for m in members}
    if len(lengths) != 1:
        raise LengthError(f"ensemble members disagree on input length: {sorted(lengths)}")
    if len(wave) != lengths.pop():
        raise LengthError("waveform length does not match ensemble input length")
    x0 = wave.samples[None, :].astype(np.float32)
    x_adv = _attack_batch(members, x0, cfg)
    return _examples_from_batch(
        members, ["<single>"], x0, x_adv, cfg, wave.sample_rate,
        ensemble_id(members))[0]


def generate_attack_set(source: TrainedModel | list[TrainedModel], corpus: Corpus,
                        cfg: AttackConfig) -> list[AdversarialExample]:
    """Attack every spoof clip that all source members classify correctly.

    Clips are processed in id order and in fixed-size chunks, so the result
    is independent of how callers schedule the work. Raises if no spoof clip
    is eligible.
    """
    members = [source] if isinstance(source, TrainedModel) else list(source)
    source_label = (members[0].model_id if len(members) == 1
                    else ensemble_id(members))
    spoof = sorted(corpus.by_label(Label.SPOOF), key=lambda c: c.id)
    if not spoof:
        raise ValueError("corpus has no spoof clips to attack")
    for clip in spoof:
        if len(clip.wave) != members[0].spec.input_len:
            raise LengthError(
                f"clip {clip.id} has {len(clip.wave)} samples, source expects "
                f"{members[0].spec.input_len}; apply a length transform first")
    x_all = np.stack([c.wave.samples for c in spoof]).astype(np.float32)
    spoof_idx = LABEL_INDEX[Label.SPOOF]
    correct = np.ones(len(spoof), dtype=bool)
    for model in members:
        correct &= _predictions(model, x_all) == spoof_idx
    if not correct.any():
        raise ValueError(
            f"{source_label} misclassifies every spoof clip; nothing to attack")
    eligible = [i for i, ok in enumerate(correct) if ok]
    out: list[AdversarialExample] = []
    for start in range(0, len(eligible), ATTACK_CHUNK):
        rows = eligible[start:start + ATTACK_CHUNK]
        x0 = x_all[rows]
        x_adv = _attack_batch(members, x0, cfg)
        out.extend(_examples_from_batch(
            members, [spoof[i].id for i in rows], x0, x_adv, cfg,
            corpus.sample_rate, source_label))
    return out


MANIFEST_HEADER = ["source_id", "source_model", "epsilon", "alpha", "iterations",
                   "success", "snr_db", "path"]


def save_attack_set(examples: list[AdversarialExample], cfg: AttackConfig,
                    out_dir: str | Path) -> Path:
    """Persist adversarial waveforms as WAV files plus a manifest CSV."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    wav_dir = out / "wav"
    wav_dir.mkdir(exist_ok=True)
    manifest = out / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_HEADER)
        for ex in examples:
            rel = f"wav/{ex.source_id}.wav"
            save_wav(ex.wave, out / rel)
            writer.writerow([
                ex.source_id, ex.source_model_id, repr(cfg.epsilon), repr(cfg.alpha),
                cfg.iterations, int(ex.success_on_source), format_snr(ex.snr_db), rel,
            ])
    return manifest


def load_attack_manifest(manifest_path: str | Path) -> list[dict]:
    manifest_path = Path(manifest_path)
    with open(manifest_path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != MANIFEST_HEADER:
            raise ValueError(f"bad attack manifest header: {reader.fieldnames}")
        return [dict(row) for row in reader]
