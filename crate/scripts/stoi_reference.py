"""Writes STOI reference fixtures: float32 WAV pairs plus pystoi scores.

Usage: python3 scripts/stoi_reference.py crates/core/tests/fixtures/stoi
"""
import json
import sys
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import lfilter
from pystoi import stoi

FS = 16000
DUR = 1.5


def speech_like(rng):
    n = int(FS * DUR)
    t = np.arange(n) / FS
    f0 = 110 + 60 * rng.random() + 15 * np.sin(2 * np.pi * 0.7 * t)
    phase = 2 * np.pi * np.cumsum(f0) / FS
    x = sum(np.sin(k * phase) / k for k in range(1, 25))
    # Formant-ish colouring and a 4 Hz syllable envelope with pauses.
    x = lfilter([1.0], [1.0, -1.3, 0.6], x)
    env = np.clip(np.sin(2 * np.pi * (3.5 + rng.random()) * t + rng.random() * 6), 0, None) ** 1.5
    env[int(0.6 * n):int(0.7 * n)] = 0
    x = x * env
    return 0.5 * x / np.max(np.abs(x))


def at_snr(x, d, snr):
    g = np.sqrt(np.sum(x ** 2) / (np.sum(d ** 2) * 10 ** (snr / 10)))
    return x + g * d


def main(out):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(20240601)
    cleans = [speech_like(rng) for _ in range(3)]
    n = cleans[0].size
    white = rng.standard_normal(n)
    brown = np.cumsum(rng.standard_normal(n))
    brown -= np.convolve(brown, np.ones(400) / 400, mode="same")
    cases = [
        (0, "white_m5", at_snr(cleans[0], white, -5)),
        (0, "white_5", at_snr(cleans[0], white, 5)),
        (0, "lowpass", lfilter([0.25, 0.25, 0.25, 0.25], [1.0], cleans[0])),
        (1, "brown_0", at_snr(cleans[1], brown, 0)),
        (1, "clipped", np.clip(cleans[1], -0.1, 0.1)),
        (1, "white_10", at_snr(cleans[1], white, 10)),
        (2, "echo", cleans[2] + 0.6 * np.roll(cleans[2], 1600)),
        (2, "white_m10", at_snr(cleans[2], white, -10)),
        (2, "babble", at_snr(cleans[2], cleans[0] + cleans[1], 0)),
        (2, "scaled_noisy", 0.1 * at_snr(cleans[2], brown, 5)),
    ]
    for i, c in enumerate(cleans):
        wavfile.write(out / f"clean_{i}.wav", FS, c.astype(np.float32))
    entries = []
    for ci, name, y in cases:
        y32 = y.astype(np.float32)
        wavfile.write(out / f"{name}.wav", FS, y32)
        x32 = cleans[ci].astype(np.float32)
        score = stoi(x32.astype(np.float64), y32.astype(np.float64), FS, extended=False)
        entries.append({"clean": f"clean_{ci}.wav", "degraded": f"{name}.wav", "stoi": float(score)})
    (out / "reference.json").write_text(json.dumps(entries, indent=1) + "\n")


if __name__ == "__main__":
    main(sys.argv[1])
