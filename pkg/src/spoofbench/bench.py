"""Config-driven orchestration: train the model matrix, generate attack sets,
run same-length and cross-length transfer evaluation, and emit report tables.

Every task seeds its own RNG from a hash of (config seed, task name), so
results do not depend on scheduling or the number of worker processes, and a
re-run with the same config reproduces every file byte for byte.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import attacks as atk
from . import models as mdl
from .audio import (Corpus, Label, Split, Waveform, clip_waveform, load_corpus,
                    self_pad_waveform, synth_corpus)
from .errors import ConfigError, NumericsError
from .features import VARIANT_NAMES, variant_config
from .metrics import TransferCell, format_snr
from .models import (LABEL_INDEX, ModelFamily, ModelSpec, TrainConfig,
                     TrainedModel, count_parameters)

STANDARD_LENGTHS = (40000, 48000, 64600)
FAMILY_OF_VARIANT = {"LFCC": "LFCCs", "MFCC": "MFCCs", "SPEC": "SPECs", "WAVE": "WAVEs"}


def derive_seed(master_seed: int, *parts: str) -> int:
    """Stable per-task seed: independent of scheduling and task order."""
    digest = hashlib.sha256(
        (f"{master_seed}|" + "|".join(parts)).encode()).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass(frozen=True)
class CorpusSpec:
    synthetic: bool
    n_per_class: int = 200
    n_test_per_class: int = 200
    clip_len: int = 64600
    sample_rate: int = 16000
    seed: int | None = None
    manifest: str | None = None


@dataclass(frozen=True)
class EnsembleSpec:
    epsilon: float = 0.1
    alpha: float = 0.002
    iterations: int = 60
    members: str | tuple[tuple[str, ...], ...] = "auto"


@dataclass(frozen=True)
class ExperimentConfig:
    corpus: CorpusSpec
    feature_variants: tuple[str, ...]
    input_lengths: tuple[int, ...]
    attack: atk.AttackConfig
    ensemble_attack: EnsembleSpec
    train: TrainConfig
    output_dir: str
    seed: int = 7

    def __post_init__(self):
        for name in self.feature_variants:
            if name not in VARIANT_NAMES:
                raise ConfigError(f"unknown feature variant {name!r}; "
                                  f"choose from {VARIANT_NAMES}")
        for length in self.input_lengths:
            if length not in STANDARD_LENGTHS:
                raise ConfigError(
                    f"input length {length} not in {STANDARD_LENGTHS}")
        if not self.feature_variants or not self.input_lengths:
            raise ConfigError("need at least one feature variant and input length")

    def corpus_seed(self) -> int:
        return self.corpus.seed if self.corpus.seed is not None else self.seed

    def model_names(self) -> list[str]:
        out = []
        for length in self.input_lengths:
            for variant in self.feature_variants:
                fam = ModelFamily.CONV1D_RAW if variant == "WAVE" \
                    else ModelFamily.CONV2D_RESIDUAL
                out.append(self.model_spec(variant, length, fam).model_id)
        return out

    def model_spec(self, variant: str, length: int,
                   family: ModelFamily | None = None) -> ModelSpec:
        if family is None:
            family = ModelFamily.CONV1D_RAW if variant == "WAVE" \
                else ModelFamily.CONV2D_RESIDUAL
        feature = variant_config(variant, self.corpus.sample_rate)
        probe = ModelSpec(family, feature, length, seed=0)
        return ModelSpec(family, feature, length,
                         seed=derive_seed(self.seed, "init", probe.model_id))

    def ensemble_member_lists(self) -> list[list[str]]:
        spec = self.ensemble_attack
        if spec.members != "auto":
            return [list(group) for group in spec.members]
        lengths = sorted(self.input_lengths)
        chosen = [lengths[-1]] if len(lengths) == 1 else [lengths[-1], lengths[0]]
        groups = []
        for length in chosen:
            code = mdl.LENGTH_CODES[length]
            group = [m for m in self.model_names() if m.endswith(f"{code}")
                     and m.split("+")[1] in (f"res{code}", f"raw{code}")]
            if len(group) >= 2:
                groups.append(group)
        return groups


_ALLOWED_KEYS = {
    "": {"corpus", "feature_variants", "input_lengths", "attack",
         "ensemble_attack", "train", "output_dir", "seed"},
    "corpus": {"synthetic", "manifest"},
    "corpus.synthetic": {"seed", "n_per_class", "n_test_per_class",
                         "clip_len", "sample_rate"},
    "attack": {"epsilon", "alpha", "iterations"},
    "ensemble_attack": {"epsilon", "alpha", "iterations", "members"},
    "train": {"epochs", "batch_size", "learning_rate"},
}


def _check_keys(obj: dict, scope: str):
    allowed = _ALLOWED_KEYS[scope]
    unknown = set(obj) - allowed
    if unknown:
        where = scope or "top level"
        raise ConfigError(f"unknown config key(s) {sorted(unknown)} at {where}; "
                          f"allowed: {sorted(allowed)}")


def config_from_dict(raw: dict) -> ExperimentConfig:
    _check_keys(raw, "")
    seed = int(raw.get("seed", 7))
    corpus_raw = raw.get("corpus", {"synthetic": {}})
    _check_keys(corpus_raw, "corpus")
    if "manifest" in corpus_raw and "synthetic" in corpus_raw:
        raise ConfigError("corpus: give either synthetic or manifest, not both")
    if "manifest" in corpus_raw:
        corpus = CorpusSpec(synthetic=False, manifest=str(corpus_raw["manifest"]))
    else:
        syn = corpus_raw.get("synthetic", {})
        _check_keys(syn, "corpus.synthetic")
        corpus = CorpusSpec(
            synthetic=True,
            n_per_class=int(syn.get("n_per_class", 200)),
            n_test_per_class=int(syn.get("n_test_per_class",
                                         syn.get("n_per_class", 200))),
            clip_len=int(syn.get("clip_len", 64600)),
            sample_rate=int(syn.get("sample_rate", 16000)),
            seed=int(syn["seed"]) if "seed" in syn else None,
        )
    attack_raw = raw.get("attack", {})
    _check_keys(attack_raw, "attack")
    attack = atk.AttackConfig(
        epsilon=float(attack_raw.get("epsilon", 0.08)),
        alpha=float(attack_raw.get("alpha", 0.001)),
        iterations=int(attack_raw.get("iterations", 40)),
    )
    ens_raw = raw.get("ensemble_attack", {})
    _check_keys(ens_raw, "ensemble_attack")
    members = ens_raw.get("members", "auto")
    if members != "auto":
        if not isinstance(members, list) or not all(
                isinstance(g, list) for g in members):
            raise ConfigError("ensemble_attack.members must be 'auto' or a "
                              "list of model-id lists")
        members = tuple(tuple(str(m) for m in g) for g in members)
    ensemble = EnsembleSpec(
        epsilon=float(ens_raw.get("epsilon", 0.1)),
        alpha=float(ens_raw.get("alpha", 0.002)),
        iterations=int(ens_raw.get("iterations", 60)),
        members=members,
    )
    train_raw = raw.get("train", {})
    _check_keys(train_raw, "train")
    train = TrainConfig(
        epochs=int(train_raw.get("epochs", 10)),
        batch_size=int(train_raw.get("batch_size", 16)),
        learning_rate=float(train_raw.get("learning_rate", 1e-3)),
        seed=0,
    )
    return ExperimentConfig(
        corpus=corpus,
        feature_variants=tuple(raw.get("feature_variants",
                                       ("LFCC70", "MFCC40", "SPEC2048", "WAVE"))),
        input_lengths=tuple(int(x) for x in raw.get("input_lengths",
                                                    STANDARD_LENGTHS)),
        attack=attack,
        ensemble_attack=ensemble,
        train=train,
        output_dir=str(raw.get("output_dir", "bench-out")),
        seed=seed,
    )


def load_config(path: str | Path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return config_from_dict(raw)


def config_digest(cfg: ExperimentConfig) -> str:
    blob = json.dumps(asdict(cfg), sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


_corpus_cache: dict = {}


def get_corpora(cfg: ExperimentConfig) -> tuple[Corpus, Corpus]:
    """(train, test) corpora; memoized per process since generation is pure."""
    key = (cfg.corpus, cfg.corpus_seed())
    if key not in _corpus_cache:
        if cfg.corpus.synthetic:
            seed = cfg.corpus_seed()
            train_c = synth_corpus(cfg.corpus.n_per_class, cfg.corpus.clip_len,
                                   cfg.corpus.sample_rate, seed, Split.TRAIN)
            test_c = synth_corpus(cfg.corpus.n_test_per_class, cfg.corpus.clip_len,
                                  cfg.corpus.sample_rate, seed, Split.TEST)
        else:
            train_c = load_corpus(cfg.corpus.manifest, Split.TRAIN)
            test_c = load_corpus(cfg.corpus.manifest, Split.TEST)
        _corpus_cache[key] = (train_c, test_c)
    return _corpus_cache[key]


def corpus_at_length(corpus: Corpus, length: int) -> Corpus:
    clips = tuple(
        type(c)(c.id, clip_waveform(c.wave, length), c.label) for c in corpus.clips)
    return Corpus(clips, corpus.split, corpus.seed)


# ---------------------------------------------------------------- training

def _train_task(cfg: ExperimentConfig, variant: str, length: int) -> dict:
    spec = cfg.model_spec(variant, length)
    train_c, test_c = get_corpora(cfg)
    train_cfg = TrainConfig(
        epochs=cfg.train.epochs, batch_size=cfg.train.batch_size,
        learning_rate=cfg.train.learning_rate,
        seed=derive_seed(cfg.seed, "train", spec.model_id))
    model = mdl.init_model(spec)
    try:
        model = mdl.train(model, train_c, train_cfg, heldout=test_c)
        failure = None
    except NumericsError as exc:
        failure = str(exc)
    out_dir = Path(cfg.output_dir) / "models"
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = out_dir / f"{spec.model_id}.stbm"
    mdl.save_checkpoint(model, ckpt)
    return {
        "model_id": spec.model_id,
        "variant": variant,
        "input_len": length,
        "family": spec.family.value,
        "init_seed": spec.seed,
        "train_seed": train_cfg.seed,
        "train_acc": None if failure else model.train_stats[0],
        "test_acc": None if failure else model.train_stats[1],
        "param_count": count_parameters(model),
        "checkpoint": f"models/{spec.model_id}.stbm",
        "failure": failure,
    }


def _run_worker(args):
    kind, cfg_dict, payload = args
    cfg = config_from_dict(cfg_dict)
    if kind == "train":
        return _train_task(cfg, *payload)
    if kind == "attack":
        return _attack_task(cfg, *payload)
    raise ValueError(kind)


def _config_as_raw(cfg: ExperimentConfig) -> dict:
    corpus = ({"manifest": cfg.corpus.manifest} if not cfg.corpus.synthetic
              else {"synthetic": {
                  "seed": cfg.corpus_seed(),
                  "n_per_class": cfg.corpus.n_per_class,
                  "n_test_per_class": cfg.corpus.n_test_per_class,
                  "clip_len": cfg.corpus.clip_len,
                  "sample_rate": cfg.corpus.sample_rate}})
    members = cfg.ensemble_attack.members
    if members != "auto":
        members = [list(g) for g in members]
    return {
        "corpus": corpus,
        "feature_variants": list(cfg.feature_variants),
        "input_lengths": list(cfg.input_lengths),
        "attack": {"epsilon": cfg.attack.epsilon, "alpha": cfg.attack.alpha,
                   "iterations": cfg.attack.iterations},
        "ensemble_attack": {"epsilon": cfg.ensemble_attack.epsilon,
                            "alpha": cfg.ensemble_attack.alpha,
                            "iterations": cfg.ensemble_attack.iterations,
                            "members": members},
        "train": {"epochs": cfg.train.epochs, "batch_size": cfg.train.batch_size,
                  "learning_rate": cfg.train.learning_rate},
        "output_dir": cfg.output_dir,
        "seed": cfg.seed,
    }


def _map_tasks(cfg: ExperimentConfig, kind: str, payloads: list[tuple],
               jobs: int) -> list:
    """Run pure tasks in deterministic order, optionally on a process pool."""
    if jobs <= 1:
        if kind == "train":
            return [_train_task(cfg, *p) for p in payloads]
        return [_attack_task(cfg, *p) for p in payloads]
    raw = _config_as_raw(cfg)
    args = [(kind, raw, p) for p in payloads]
    import multiprocessing as mp
    ctx = mp.get_context("spawn")
    with ProcessPoolExecutor(max_workers=jobs, mp_context=ctx) as pool:
        return list(pool.map(_run_worker, args))


def run_training_matrix(cfg: ExperimentConfig, jobs: int = 1) -> dict:
    """Train one model per (feature variant x input length); persist everything.

    A model whose training diverges is recorded as failed without aborting
    the rest of the matrix.
    """
    payloads = [(variant, length)
                for length in cfg.input_lengths for variant in cfg.feature_variants]
    rows = _map_tasks(cfg, "train", payloads, jobs)
    registry = {row["model_id"]: row for row in rows}
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved.json").write_text(
        json.dumps(_config_as_raw(cfg), indent=2, sort_keys=True) + "\n")
    (out / "models" / "registry.json").write_text(
        json.dumps(registry, indent=2, sort_keys=True) + "\n")
    _write_accuracy_tables(cfg, registry)
    return registry


def _write_accuracy_tables(cfg: ExperimentConfig, registry: dict):
    reports = Path(cfg.output_dir) / "reports"
    reports.mkdir(parents=True, exist_ok=True)
    rows = sorted(registry.values(), key=lambda r: (r["variant"], r["input_len"]))
    csv_buf = io.StringIO()
    writer = csv.writer(csv_buf)
    writer.writerow(["model_id", "variant", "input_len", "train_acc", "test_acc",
                     "param_count", "failure"])
    for row in rows:
        writer.writerow([
            row["model_id"], row["variant"], row["input_len"],
            _fmt_acc(row["train_acc"]), _fmt_acc(row["test_acc"]),
            row["param_count"], row["failure"] or ""])
    families: dict[str, list] = {}
    for row in rows:
        if row["failure"]:
            continue
        families.setdefault(FAMILY_OF_VARIANT[_family_key(row["variant"])],
                            []).append(row)
    writer.writerow([])
    writer.writerow(["family", "", "", "mean_train_acc", "mean_test_acc", "n_models", ""])
    fam_rows = []
    for fam in ("LFCCs", "MFCCs", "SPECs", "WAVEs"):
        members = families.get(fam, [])
        if not members:
            continue
        fam_rows.append((fam,
                         np.mean([m["train_acc"] for m in members]),
                         np.mean([m["test_acc"] for m in members]),
                         len(members)))
        writer.writerow([fam, "", "", f"{fam_rows[-1][1]:.4f}",
                         f"{fam_rows[-1][2]:.4f}", len(members), ""])
    (reports / "accuracy.csv").write_text(csv_buf.getvalue())
    md = ["| model | train acc | test acc | params |",
          "|---|---|---|---|"]
    for row in rows:
        md.append(f"| {row['model_id']} | {_fmt_acc(row['train_acc'])} | "
                  f"{_fmt_acc(row['test_acc'])} | {row['param_count']} |")
    md += ["", "| family | mean train acc | mean test acc | models |",
           "|---|---|---|---|"]
    for fam, tr, te, n in fam_rows:
        md.append(f"| {fam} | {tr:.4f} | {te:.4f} | {n} |")
    (reports / "accuracy.md").write_text("\n".join(md) + "\n")


def _family_key(variant: str) -> str:
    return "WAVE" if variant == "WAVE" else variant[:4]


def _fmt_acc(value) -> str:
    return "" if value is None else f"{value:.4f}"


def load_registry_models(cfg: ExperimentConfig) -> dict[str, TrainedModel]:
    reg_path = Path(cfg.output_dir) / "models" / "registry.json"
    if not reg_path.exists():
        raise ConfigError(f"{reg_path} not found: run the train stage first")
    registry = json.loads(reg_path.read_text())
    out = {}
    for model_id, row in registry.items():
        if row["failure"]:
            continue
        spec = cfg.model_spec(row["variant"], row["input_len"])
        model = mdl.load_checkpoint(Path(cfg.output_dir) / row["checkpoint"], spec)
        model.train_stats = (row["train_acc"], row["test_acc"])
        out[model_id] = model
    return out


# ---------------------------------------------------------------- attacks

def _set_dirname(source_label: str) -> str:
    if source_label.startswith("ens("):
        inner = source_label[4:-1].split("&")
        code = inner[0].split("+")[1].lstrip("resraw")
        return f"ens{code}"
    return source_label.replace("+", "_")


def _attack_task(cfg: ExperimentConfig, member_ids: tuple[str, ...],
                 attack_kind: str) -> dict:
    models = load_registry_models(cfg)
    members = [models[m] for m in member_ids]
    length = members[0].spec.input_len
    _, test_c = get_corpora(cfg)
    corpus = corpus_at_length(test_c, length)
    if attack_kind == "ensemble":
        a_cfg = atk.AttackConfig(cfg.ensemble_attack.epsilon,
                                 cfg.ensemble_attack.alpha,
                                 cfg.ensemble_attack.iterations)
        source_label = atk.ensemble_id(members)
    else:
        a_cfg = cfg.attack
        source_label = members[0].model_id
    examples = atk.generate_attack_set(
        members[0] if len(members) == 1 else members, corpus, a_cfg)
    set_name = _set_dirname(source_label)
    set_dir = Path(cfg.output_dir) / "attacks" / set_name
    atk.save_attack_set(examples, a_cfg, set_dir)
    np.save(set_dir / "waves.npy",
            np.stack([ex.wave.samples for ex in examples]).astype(np.float32))
    spoof_total = len(corpus.by_label(Label.SPOOF))
    successes = [ex.success_on_source for ex in examples]
    finite_snrs = [ex.snr_db for ex in examples if np.isfinite(ex.snr_db)]
    return {
        "set_name": set_name,
        "source": source_label,
        "members": list(member_ids),
        "kind": attack_kind,
        "input_len": length,
        "epsilon": a_cfg.epsilon,
        "alpha": a_cfg.alpha,
        "iterations": a_cfg.iterations,
        "n_spoof": spoof_total,
        "n_eligible": len(examples),
        "n_success": int(np.sum(successes)),
        "asr": float(np.mean(successes)),
        "mean_snr_amp_db": float(np.mean(finite_snrs)) if finite_snrs else None,
        "source_ids": [ex.source_id for ex in examples],
        "success_flags": [bool(s) for s in successes],
        "member_success": [ex.member_success for ex in examples],
        "snr_amp_db": [format_snr(ex.snr_db) for ex in examples],
    }


def run_attack_phase(cfg: ExperimentConfig, jobs: int = 1) -> dict:
    """One attack set per trained model, plus the configured ensembles."""
    models = load_registry_models(cfg)
    payloads: list[tuple] = []
    for model_id in cfg.model_names():
        if model_id in models:
            payloads.append(((model_id,), "ifgsm"))
    for group in cfg.ensemble_member_lists():
        missing = [m for m in group if m not in models]
        if missing:
            raise ConfigError(f"ensemble member(s) not trained: {missing}")
        payloads.append((tuple(group), "ensemble"))
    results = _map_tasks(cfg, "attack", payloads, jobs)
    index = {row["set_name"]: row for row in results}
    out = Path(cfg.output_dir) / "attacks"
    out.mkdir(parents=True, exist_ok=True)
    (out / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
    return index


def load_attack_store(cfg: ExperimentConfig) -> dict:
    index_path = Path(cfg.output_dir) / "attacks" / "index.json"
    if not index_path.exists():
        raise ConfigError(f"{index_path} not found: run the attack stage first")
    index = json.loads(index_path.read_text())
    for entry in index.values():
        waves = np.load(Path(cfg.output_dir) / "attacks" / entry["set_name"]
                        / "waves.npy")
        entry["waves"] = waves
    return index


# ---------------------------------------------------------------- transfer

@dataclass
class TransferReport:
    title: str
    target_ids: list[str]
    rows: list[dict]                     # source, asr, snr columns, cells
    family_averages: list[dict] = field(default_factory=list)
    provenance: dict = field(default_factory=dict)


def _predict_labelled(model: TrainedModel, waves: np.ndarray) -> np.ndarray:
    return atk._predictions(model, waves)


def _clean_cache_key(target_id: str, length: int, transform: str) -> tuple:
    return (target_id, length, transform)


def _transfer_cells(cfg: ExperimentConfig, entry: dict, models: dict,
                    target_ids: list[str], transform) -> dict:
    """One report row: evaluate entry's successful set against each target.

    transform maps (waves_array, clean_corpus) -> (adv_at_target_len,
    clean_at_target_len); clean originals get the identical transform so the
    target's clean-error exclusion happens at its own input length.
    """
    _, test_c = get_corpora(cfg)
    spoof_by_id = {c.id: c for c in test_c.by_label(Label.SPOOF)}
    success_rows = [i for i, ok in enumerate(entry["success_flags"]) if ok]
    cells = []
    n_success = len(success_rows)
    for target_id in target_ids:
        target = models[target_id]
        if n_success == 0:
            cells.append({"source": entry["source"], "target": target_id,
                          "tsr": None, "n_numerator": 0, "n_denominator": 0,
                          "n_success_set": 0, "n_clean_errors": 0})
            continue
        adv, clean = transform(entry, success_rows, spoof_by_id, target)
        clean_pred = _predict_labelled(target, clean)
        adv_pred = _predict_labelled(target, adv)
        keep = clean_pred == LABEL_INDEX[Label.SPOOF]
        n_den = int(keep.sum())
        if n_den == 0:
            cells.append({"source": entry["source"], "target": target_id,
                          "tsr": None, "n_numerator": 0, "n_denominator": 0,
                          "n_success_set": n_success,
                          "n_clean_errors": n_success})
            continue
        n_num = int((adv_pred[keep] == LABEL_INDEX[Label.BONAFIDE]).sum())
        cell = TransferCell(entry["source"], target_id, n_num / n_den, n_num, n_den)
        cells.append({"source": cell.source_model_id, "target": cell.target_model_id,
                      "tsr": cell.tsr, "n_numerator": cell.n_numerator,
                      "n_denominator": cell.n_denominator,
                      "n_success_set": n_success,
                      "n_clean_errors": n_success - n_den})
    snrs = [float(s) for s in entry["snr_amp_db"] if s != "inf"]
    return {
        "source": entry["source"],
        "set_name": entry["set_name"],
        "asr": entry["asr"],
        "n_eligible": entry["n_eligible"],
        "mean_snr_amp_db": float(np.mean(snrs)) if snrs else None,
        "mean_snr_power_db": 2 * float(np.mean(snrs)) if snrs else None,
        "cells": cells,
    }


def _same_length_transform(entry, success_rows, spoof_by_id, target):
    adv = entry["waves"][success_rows]
    clean = np.stack([
        clip_waveform(spoof_by_id[entry["source_ids"][i]].wave,
                      target.spec.input_len).samples
        for i in success_rows]).astype(np.float32)
    return adv, clean


def _length_transform(kind: str):
    def apply(entry, success_rows, spoof_by_id, target):
        target_len = target.spec.input_len
        adv_rows = []
        clean_rows = []
        sr = 16000
        for i in success_rows:
            wave = Waveform(entry["waves"][i], sr)
            clean_full = spoof_by_id[entry["source_ids"][i]].wave
            clean_src = clip_waveform(clean_full, len(wave))
            if kind == "clip":
                adv_rows.append(clip_waveform(wave, target_len).samples)
                clean_rows.append(clip_waveform(clean_src, target_len).samples)
            else:
                adv_rows.append(self_pad_waveform(wave, target_len).samples)
                clean_rows.append(self_pad_waveform(clean_src, target_len).samples)
        return (np.stack(adv_rows).astype(np.float32),
                np.stack(clean_rows).astype(np.float32))
    return apply


def _family_pair_averages(rows: list[dict]) -> list[dict]:
    """Mean TSR over cells grouped by (source family, target family)."""
    buckets: dict[tuple[str, str], list[float]] = {}
    for row in rows:
        if row["source"].startswith("ens("):
            src_fam = "ensemble"
        else:
            src_fam = FAMILY_OF_VARIANT[_family_key(row["source"].split("+")[0])]
        for cell in row["cells"]:
            if cell["tsr"] is None:
                continue
            tgt_fam = FAMILY_OF_VARIANT[_family_key(cell["target"].split("+")[0])]
            buckets.setdefault((src_fam, tgt_fam), []).append(cell["tsr"])
    return [{"source_family": s, "target_family": t,
             "mean_tsr": float(np.mean(v)), "n_cells": len(v)}
            for (s, t), v in sorted(buckets.items())]


def run_transfer_matrix(cfg: ExperimentConfig, jobs: int = 1) -> list[TransferReport]:
    """Same-length transfer: every attack set against every model of its length."""
    models = load_registry_models(cfg)
    store = load_attack_store(cfg)
    reports = []
    for length in sorted(cfg.input_lengths, reverse=True):
        target_ids = [m for m in cfg.model_names()
                      if m in models and models[m].spec.input_len == length]
        entries = [e for e in store.values() if e["input_len"] == length]
        entries.sort(key=lambda e: (e["kind"] == "ensemble",
                                    target_ids.index(e["source"])
                                    if e["source"] in target_ids else 0))
        if not entries or not target_ids:
            continue
        rows = [_transfer_cells(cfg, e, models, target_ids,
                                _same_length_transform) for e in entries]
        report = TransferReport(
            title=f"transfer_{mdl.LENGTH_CODES[length]}",
            target_ids=target_ids,
            rows=rows,
            family_averages=_family_pair_averages(rows),
            provenance=_provenance(cfg),
        )
        reports.append(report)
        _persist_report(cfg, report)
    return reports


def run_length_transfer(cfg: ExperimentConfig, jobs: int = 1) -> list[TransferReport]:
    """Cross-length transfer: clip long-source sets down, self-pad short ones up."""
    models = load_registry_models(cfg)
    store = load_attack_store(cfg)
    lengths = sorted(cfg.input_lengths)
    if len(lengths) < 2:
        raise ConfigError("length transfer needs at least two input lengths")
    reports = []
    jobs_spec = [("clip", max(lengths), [l for l in lengths if l != max(lengths)]),
                 ("pad", min(lengths), [l for l in lengths if l != min(lengths)])]
    for kind, src_len, tgt_lens in jobs_spec:
        entries = [e for e in store.values() if e["input_len"] == src_len]
        entries.sort(key=lambda e: (e["kind"] == "ensemble", e["set_name"]))
        target_ids = [m for m in cfg.model_names() if m in models
                      and models[m].spec.input_len in tgt_lens]
        target_ids.sort(key=lambda m: (-models[m].spec.input_len,
                                       cfg.model_names().index(m)))
        if not entries or not target_ids:
            continue
        rows = [_transfer_cells(cfg, e, models, target_ids,
                                _length_transform(kind)) for e in entries]
        report = TransferReport(
            title=f"length_{kind}",
            target_ids=target_ids,
            rows=rows,
            family_averages=_family_pair_averages(rows),
            provenance=_provenance(cfg),
        )
        reports.append(report)
        _persist_report(cfg, report)
    return reports


def _provenance(cfg: ExperimentConfig) -> dict:
    return {"config_digest": config_digest(cfg), "seed": cfg.seed,
            "corpus_seed": cfg.corpus_seed()}


def _persist_report(cfg: ExperimentConfig, report: TransferReport):
    reports_dir = Path(cfg.output_dir) / "reports"
    reports_dir.mkdir(parents=True, exist_ok=True)
    payload = {
        "title": report.title,
        "target_ids": report.target_ids,
        "rows": report.rows,
        "family_averages": report.family_averages,
        "provenance": report.provenance,
    }
    (reports_dir / f"{report.title}.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n")


def load_reports(cfg: ExperimentConfig) -> list[TransferReport]:
    reports_dir = Path(cfg.output_dir) / "reports"
    out = []
    for path in sorted(reports_dir.glob("*.json")):
        data = json.loads(path.read_text())
        out.append(TransferReport(
            title=data["title"], target_ids=data["target_ids"],
            rows=data["rows"], family_averages=data["family_averages"],
            provenance=data["provenance"]))
    return out


def _fmt_tsr(value) -> str:
    return "" if value is None else f"{value:.4f}"


def emit_report(report: TransferReport, out_dir: str | Path,
                formats: tuple[str, ...] = ("csv", "markdown")) -> list[Path]:
    """Render a transfer report deterministically as CSV and/or markdown."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if "csv" in formats:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["source", "target", "tsr", "n_numerator", "n_denominator",
                         "n_success_set", "n_clean_errors_on_target",
                         "source_asr", "source_mean_snr_amp_db",
                         "source_mean_snr_power_db"])
        for row in report.rows:
            for cell in row["cells"]:
                writer.writerow([
                    row["source"], cell["target"], _fmt_tsr(cell["tsr"]),
                    cell["n_numerator"], cell["n_denominator"],
                    cell["n_success_set"], cell["n_clean_errors"],
                    f"{row['asr']:.4f}",
                    _fmt_tsr(row["mean_snr_amp_db"]),
                    _fmt_tsr(row["mean_snr_power_db"]),
                ])
        writer.writerow([])
        writer.writerow(["source_family", "target_family", "mean_tsr", "n_cells",
                         "", "", "", "", "", ""])
        for fam in report.family_averages:
            writer.writerow([fam["source_family"], fam["target_family"],
                             f"{fam['mean_tsr']:.4f}", fam["n_cells"],
                             "", "", "", "", "", ""])
        path = out_dir / f"{report.title}.csv"
        path.write_text(buf.getvalue())
        written.append(path)
    if "markdown" in formats:
        lines = [f"# {report.title}", ""]
        header = (["source", "ASR", "SNR amp dB (headline)", "SNR power dB (standard)"]
                  + report.target_ids)
        lines.append("| " + " | ".join(header) + " |")
        lines.append("|" + "---|" * len(header))
        for row in report.rows:
            cells = {c["target"]: _fmt_tsr(c["tsr"]) for c in row["cells"]}
            lines.append("| " + " | ".join(
                [row["source"], f"{row['asr']:.4f}",
                 _fmt_tsr(row["mean_snr_amp_db"]),
                 _fmt_tsr(row["mean_snr_power_db"])]
                + [cells.get(t, "") for t in report.target_ids]) + " |")
        if report.family_averages:
            lines += ["", "| source family | target family | mean TSR | cells |",
                      "|---|---|---|---|"]
            for fam in report.family_averages:
                lines.append(f"| {fam['source_family']} | {fam['target_family']} | "
                             f"{fam['mean_tsr']:.4f} | {fam['n_cells']} |")
        lines.append("")
        path = out_dir / f"{report.title}.md"
        path.write_text("\n".join(lines))
        written.append(path)
    return written


def run_all(cfg: ExperimentConfig, jobs: int = 1,
            formats: tuple[str, ...] = ("csv", "markdown")) -> dict:
    """Full pipeline: train, attack, same-length + cross-length transfer, reports."""
    registry = run_training_matrix(cfg, jobs=jobs)
    store = run_attack_phase(cfg, jobs=jobs)
    reports = run_transfer_matrix(cfg, jobs=jobs)
    if len(cfg.input_lengths) > 1:
        reports += run_length_transfer(cfg, jobs=jobs)
    reports_dir = Path(cfg.output_dir) / "reports"
    for report in reports:
        emit_report(report, reports_dir, formats)
    summary = {
        "config_digest": config_digest(cfg),
        "models": {mid: {"train_acc": row["train_acc"], "test_acc": row["test_acc"],
                         "failure": row["failure"]}
                   for mid, row in sorted(registry.items())},
        "attacks": {name: {"asr": e["asr"], "n_eligible": e["n_eligible"],
                           "mean_snr_amp_db": e["mean_snr_amp_db"]}
                    for name, e in sorted(store.items())},
        "reports": [r.title for r in reports],
    }
    (Path(cfg.output_dir) / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary
