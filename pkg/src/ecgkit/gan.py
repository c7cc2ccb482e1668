"""Recurrent GAN for minority-class beat synthesis.

One generator/discriminator pair is trained per underrepresented class on
that class's real beats only. Trained generators then produce candidate
beats which are kept only when the discriminator scores them at or above a
confidence threshold, and the accepted beats top the training split up to
the majority-class count. Validation and test splits are never touched.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tk
from .beats import CLASS_NAMES, BeatDataset, BeatRecord
from .errors import AugmentError, ConfigError
from .tensor import Tensor
from .training import AdamW

MIN_REAL_BEATS = 32

# hard cap on candidate draws per requested beat; keeps synthesis finite
# even when the discriminator rejects almost everything
ATTEMPT_BUDGET_FACTOR = 50


@dataclass
class GanTrainConfig:
    """Hyperparameters shared by the generator and discriminator.

    noise_len defaults to the beat length so the noise sequence and the
    produced beat cover the same number of time steps.
    """

    beat_len: int = 187
    noise_len: int = None
    noise_dim: int = 1
    epochs: int = 200
    batch_size: int = 32
    g_lr: float = 2e-4
    d_lr: float = 2e-4
    tau: float = 0.5
    hidden: int = 32
    dense_width: int = 64
    dropout: float = 0.2
    balance_ratio: float = 1.0

    def __post_init__(self):
        if self.noise_len is None:
            self.noise_len = self.beat_len
        if self.beat_len < 2:
            raise ConfigError(f"beat length must be >= 2, got {self.beat_len}")
        if self.noise_len < 1 or self.noise_dim < 1:
            raise ConfigError("noise sequence needs positive length and width")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        if self.g_lr <= 0 or self.d_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if not 0.0 < self.tau < 1.0:
            raise ConfigError(
                f"acceptance threshold must lie in (0, 1), got {self.tau}")
        if self.hidden < 1 or self.dense_width < 1:
            raise ConfigError("hidden and dense widths must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if not 0.0 < self.balance_ratio <= 1.0:
            raise ConfigError(
                f"balance ratio must lie in (0, 1], got {self.balance_ratio}")


def sample_noise(config, n, rng):
    shape = (n, config.noise_len, config.noise_dim)
    return rng.standard_normal(shape).astype(np.float32)


def _uniform_param(rng, shape, bound):
    values = rng.uniform(-bound, bound, size=shape).astype(np.float32)
    return Tensor(values, requires_grad=True)


def _lstm_gates(rng, in_dim, hidden):
    bound = 1.0 / math.sqrt(hidden)
    bias = np.zeros(4 * hidden, dtype=np.float32)
    bias[hidden:2 * hidden] = 1.0   # forget gate starts open
    return {
        "w_ih": _uniform_param(rng, (4 * hidden, in_dim), bound),
        "w_hh": _uniform_param(rng, (4 * hidden, hidden), bound),
        "b": Tensor(bias, requires_grad=True),
    }


def _dense_pair(rng, out_dim, in_dim):
    bound = 1.0 / math.sqrt(in_dim)
    weight = _uniform_param(rng, (out_dim, in_dim), bound)
    bias = Tensor(np.zeros(out_dim, dtype=np.float32), requires_grad=True)
    return weight, bias


class _RecurrentNet:
    """Shared trunk: bidirectional LSTM encoder, time-mean summary, then a
    hidden dense layer with LeakyReLU and dropout."""

    def __init__(self, config, rng, in_dim, out_dim):
        self.config = config
        self.params = {}
        for direction in ("fwd", "bwd"):
            gates = _lstm_gates(rng, in_dim, config.hidden)
            for key, value in gates.items():
                self.params[f"lstm.{direction}.{key}"] = value
        self.params["fc.w"], self.params["fc.b"] = _dense_pair(
            rng, config.dense_width, 2 * config.hidden)
        self.params["out.w"], self.params["out.b"] = _dense_pair(
            rng, out_dim, config.dense_width)

    def _encode(self, sequence, training, rng):
        layer = [{
            "fwd": {key: self.params[f"lstm.fwd.{key}"]
                    for key in ("w_ih", "w_hh", "b")},
            "bwd": {key: self.params[f"lstm.bwd.{key}"]
                    for key in ("w_ih", "w_hh", "b")},
        }]
        h = tk.bilstm(sequence, layer, self.config.hidden)
        summary = h.mean(axis=1)
        hidden = tk.leaky_relu(
            tk.dense(summary, self.params["fc.w"], self.params["fc.b"]))
        hidden = tk.dropout(hidden, self.config.dropout, training, rng)
        return tk.dense(hidden, self.params["out.w"], self.params["out.b"])


class GeneratorNet(_RecurrentNet):
    """Maps a noise sequence to one beat in [0, 1] per row."""

    def __init__(self, config, rng, label=None):
        super().__init__(config, rng, config.noise_dim, config.beat_len)
        self.label = label

    def forward(self, noise, training=False, rng=None):
        return tk.sigmoid(self._encode(noise, training, rng))

    def generate(self, n, rng):
        """Draw n beats as a float32 array [n, beat_len]."""
        noise = sample_noise(self.config, n, rng)
        with tk.no_grad():
            out = self.forward(Tensor(noise), training=False)
        return out.data


class DiscriminatorNet(_RecurrentNet):
    """Scores beats with an authenticity estimate in (0, 1)."""

    def __init__(self, config, rng):
        super().__init__(config, rng, 1, 1)

    def forward(self, beats, training=False, rng=None):
        batch, length = beats.data.shape
        sequence = tk.reshape(beats, (batch, length, 1))
        logits = self._encode(sequence, training, rng)
        return tk.reshape(tk.sigmoid(logits), (batch,))

    def score(self, beats):
        """Authenticity scores for a float array [n, beat_len]."""
        with tk.no_grad():
            out = self.forward(Tensor(np.asarray(beats, dtype=np.float32)),
                               training=False)
        return out.data


def discriminator_loss(real_scores, fake_scores):
    """Negated log-likelihood of calling real beats real and fakes fake."""
    real_term = tk.log(tk.clamp_min(real_scores, 1e-12)).mean()
    flipped = tk.add(1.0, tk.neg(fake_scores))
    fake_term = tk.log(tk.clamp_min(flipped, 1e-12)).mean()
    return tk.neg(tk.add(real_term, fake_term))


def generator_loss(fake_scores):
    """Non-saturating objective: push the discriminator's score on fakes up
    by descending -log D(fake) instead of ascending log(1 - D(fake))."""
    return tk.neg(tk.log(tk.clamp_min(fake_scores, 1e-12)).mean())


def _validate_minority_beats(beats, config):
    if not beats:
        raise ConfigError("no beats supplied for adversarial training")
    labels = sorted({beat.label for beat in beats})
    if len(labels) > 1:
        names = ", ".join(CLASS_NAMES[label] for label in labels)
        raise ConfigError(
            f"adversarial training takes a single class, got beats from {names}")
    if len(beats) < MIN_REAL_BEATS:
        raise ConfigError(
            f"adversarial training needs at least {MIN_REAL_BEATS} real "
            f"beats, got {len(beats)}")
    if len(beats) < config.batch_size:
        raise ConfigError(
            f"{len(beats)} beats cannot fill a batch of {config.batch_size}")
    lengths = {len(beat.samples) for beat in beats}
    if lengths != {config.beat_len}:
        raise ConfigError(
            f"beats of length {sorted(lengths)} do not match the configured "
            f"beat length {config.beat_len}")


def gan_train(minority_beats, config=None, seed=17):
    """Adversarially train a generator/discriminator pair on one class.

    Each step first updates the discriminator on a real batch plus detached
    fakes, then updates the generator against the refreshed discriminator.
    Returns (generator, discriminator, history) where history holds one
    ("D", loss) and one ("G", loss) entry per step, in update order.
    """
    config = config if config is not None else GanTrainConfig()
    beats = list(minority_beats)
    _validate_minority_beats(beats, config)
    label = beats[0].label

    real = np.stack([beat.samples for beat in beats]).astype(np.float32)
    rng = np.random.default_rng(seed)
    generator = GeneratorNet(config, rng, label=label)
    discriminator = DiscriminatorNet(config, rng)
    g_opt = AdamW(generator.params, config.g_lr)
    d_opt = AdamW(discriminator.params, config.d_lr)

    history = []
    steps_per_epoch = len(beats) // config.batch_size
    batch = config.batch_size
    for _ in range(config.epochs):
        order = rng.permutation(len(beats))
        for step in range(steps_per_epoch):
            rows = order[step * batch:(step + 1) * batch]
            real_batch = Tensor(real[rows])

            # discriminator update; fakes are detached so only D moves
            noise = sample_noise(config, batch, rng)
            with tk.no_grad():
                fake_data = generator.forward(
                    Tensor(noise), training=True, rng=rng).data
            d_real = discriminator.forward(real_batch, training=True, rng=rng)
            d_fake = discriminator.forward(
                Tensor(fake_data), training=True, rng=rng)
            loss_d = discriminator_loss(d_real, d_fake)
            d_opt.zero_grad()
            loss_d.backward()
            d_opt.step()
            history.append(("D", float(loss_d.item())))

            # generator update through the frozen-for-this-step discriminator
            noise = sample_noise(config, batch, rng)
            fake = generator.forward(Tensor(noise), training=True, rng=rng)
            scores = discriminator.forward(fake, training=True, rng=rng)
            loss_g = generator_loss(scores)
            g_opt.zero_grad()
            d_opt.zero_grad()
            loss_g.backward()
            g_opt.step()
            history.append(("G", float(loss_g.item())))
    return generator, discriminator, history


def synthesize(generator, discriminator, n_needed, tau=0.5, seed=17):
    """Draw candidate beats and keep those scoring at least tau.

    Stops once n_needed beats are accepted; gives up with an AugmentError
    after examining ATTEMPT_BUDGET_FACTOR * n_needed candidates.
    """
    if n_needed < 1:
        raise ConfigError(f"requested beat count must be >= 1, got {n_needed}")
    if not 0.0 <= tau <= 1.0:
        raise ConfigError(f"acceptance threshold must lie in [0, 1], got {tau}")
    if generator.label is None:
        raise ConfigError("generator carries no class label; train it on "
                          "labelled beats first")

    rng = np.random.default_rng(seed)
    budget = ATTEMPT_BUDGET_FACTOR * n_needed
    chunk = min(max(generator.config.batch_size, 32), 256)
    accepted = []
    attempts = 0
    while len(accepted) < n_needed and attempts < budget:
        draws = min(chunk, budget - attempts)
        candidates = generator.generate(draws, rng)
        scores = discriminator.score(candidates)
        for row, confidence in zip(candidates, scores):
            attempts += 1
            if confidence >= tau:
                accepted.append(BeatRecord(row, generator.label,
                                           source="synthetic",
                                           split_tag="train"))
                if len(accepted) == n_needed:
                    break
            if attempts >= budget:
                break
    if len(accepted) < n_needed:
        rate = len(accepted) / attempts
        raise AugmentError(
            f"gave up after {attempts} candidate draws with "
            f"{len(accepted)}/{n_needed} beats accepted "
            f"(acceptance rate {rate:.1%}); lower tau or train longer")
    return accepted


def balance_dataset(dataset, generators, tau=0.5, seed=17, balance_ratio=1.0):
    """Top every deficient class in the train split up to the balance target.

    The target is the majority-class train count scaled by balance_ratio.
    generators maps class label to a (generator, discriminator) pair; a
    class below target without one is an error. Classes absent from the
    train split entirely are left alone. Returns a new dataset sharing the
    original BeatRecord objects; the input order is preserved and synthetic
    beats are appended at the end.
    """
    if not 0.0 < balance_ratio <= 1.0:
        raise ConfigError(
            f"balance ratio must lie in (0, 1], got {balance_ratio}")
    counts = dataset.counts_for_split("train")
    majority = max(counts.values())
    if majority == 0:
        raise ConfigError("dataset has no beats tagged train")
    target = int(round(majority * balance_ratio))

    deficits = {}
    for label, count in sorted(counts.items()):
        if 0 < count < target:
            if label not in generators:
                raise ConfigError(
                    f"class {CLASS_NAMES[label]} has {count} train beats, "
                    f"below the target {target}, and no generator")
            deficits[label] = target - count
    if not deficits:
        return dataset

    synthetic = []
    for label, needed in deficits.items():
        generator, discriminator = generators[label]
        synthetic.extend(synthesize(generator, discriminator, needed,
                                    tau=tau, seed=[seed, label]))
    return BeatDataset(list(dataset.beats) + synthetic,
                       rng_seed=dataset.rng_seed)


def class_count_report(dataset, split_tag="train"):
    """Per-class counts and percentages for one split."""
    counts = dataset.counts_for_split(split_tag)
    total = sum(counts.values())
    report = {}
    for label in sorted(counts):
        count = counts[label]
        percent = 100.0 * count / total if total else 0.0
        report[CLASS_NAMES[label]] = {"count": count, "percent": percent}
    return report


def balance_summary(before, after, split_tag="train"):
    """Pre/post augmentation class distribution, ready for serialization."""
    return {"before": class_count_report(before, split_tag),
            "after": class_count_report(after, split_tag)}
