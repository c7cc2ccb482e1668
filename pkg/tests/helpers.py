"""Shared fixtures for training-level tests: small synthetic beat sets."""

import numpy as np

from ecgkit.beats import BeatDataset, BeatRecord, normalize_beat, stratified_split


def pulse_beat(rng, length, center, width=3, noise=0.05):
    x = rng.normal(scale=noise, size=length)
    lo = max(0, center - width)
    hi = min(length, center + width)
    x[lo:hi] += 1.0
    return normalize_beat(x)


def toy_two_class(n_per_class=20, length=64, seed=0, train_fraction=0.8):
    """Linearly separable two-class beats: a pulse on the left or the right."""
    rng = np.random.default_rng(seed)
    beats = []
    for label in (0, 1):
        center = length // 4 if label == 0 else 3 * length // 4
        for _ in range(n_per_class):
            beats.append(BeatRecord(pulse_beat(rng, length, center), label,
                                    source="toy"))
    dataset = BeatDataset(beats)
    stratified_split(dataset, train_fraction, seed=seed)
    return dataset
