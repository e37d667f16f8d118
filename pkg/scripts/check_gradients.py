#!/usr/bin/env python3
"""Spot-check analytic waveform gradients against central finite differences
for one model of each default (feature, family) type. Wide-precision probe,
h = 1e-4, random coordinates."""

import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from spoofbench import models as mdl  # noqa: E402
from spoofbench.audio import Label, Waveform, synth_corpus, Split  # noqa: E402
from spoofbench.features import variant_config  # noqa: E402

TYPES = [
    ("LFCC70", mdl.ModelFamily.CONV2D_RESIDUAL),
    ("MFCC40", mdl.ModelFamily.CONV2D_RESIDUAL),
    ("SPEC2048", mdl.ModelFamily.CONV2D_RESIDUAL),
    ("WAVE", mdl.ModelFamily.CONV1D_RAW),
]


def main():
    rng = np.random.default_rng(202)
    clip = synth_corpus(1, 40000, 16000, seed=3, split=Split.TEST).clips[0]
    x = clip.wave.samples.astype(np.float64)
    h = 1e-4
    for name, family in TYPES:
        spec = mdl.ModelSpec(family, variant_config(name), 40000, seed=11)
        model = mdl.init_model(spec)
        _, grad = mdl.loss_and_wave_grad(
            model, Waveform(x, 16000), Label.BONAFIDE, dtype=np.float64)
        worst = 0.0
        for coord in rng.choice(len(x), 16, replace=False):
            xp, xm = x.copy(), x.copy()
            xp[coord] += h
            xm[coord] -= h
            lp, _ = mdl.loss_and_wave_grad(
                model, Waveform(xp, 16000), Label.BONAFIDE, dtype=np.float64)
            lm, _ = mdl.loss_and_wave_grad(
                model, Waveform(xm, 16000), Label.BONAFIDE, dtype=np.float64)
            fd = (lp - lm) / (2 * h)
            rel = abs(fd - grad[coord]) / max(abs(fd), abs(grad[coord]), 1e-10)
            worst = max(worst, rel)
        print(f"{spec.model_id}: worst relative error {worst:.2e}")


if __name__ == "__main__":
    main()
