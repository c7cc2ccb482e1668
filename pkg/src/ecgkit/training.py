"""Training recipe: focal loss, decoupled-decay Adam, plateau scheduler,
early stopping, and the per-architecture run configurations.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tk
from .errors import ConfigError, NumericalError, ParseError, UsageError
from .tensor import Tensor

# batch size and learning rate per architecture; shared epoch budget 50 and
# early-stop patience 8
TABLE1 = {
    "cnn": {"batch_size": 128, "lr": 1.15e-3},
    "cnn_lstm": {"batch_size": 96, "lr": 1.0e-3},
    "cnn_lstm_attn": {"batch_size": 96, "lr": 1.0e-3},
    "resnet1d": {"batch_size": 96, "lr": 1.22e-3},
}
DEFAULT_EPOCHS = 50
DEFAULT_EARLY_STOP = 8


@dataclass
class FocalLossConfig:
    alpha: float = 1.0
    gamma: float = 2.0

    def __post_init__(self):
        if self.gamma < 0:
            raise ConfigError(f"focusing exponent must be >= 0, "
                              f"got {self.gamma}")
        if self.alpha <= 0:
            raise ConfigError(f"loss weight must be > 0, got {self.alpha}")


def focal_loss(probabilities, targets, config=None):
    """Mean of -alpha * (1 - p_t)^gamma * log(p_t) over the batch.

    Expects class probabilities (rows summing to 1), not logits; p_t is
    clamped to 1e-12 before the log.  gamma=0 recovers plain cross-entropy.
    """
    if config is None:
        config = FocalLossConfig()
    if probabilities.data.ndim != 2:
        raise UsageError(f"probabilities must be [batch, classes], "
                         f"got {probabilities.data.shape}")
    n_classes = probabilities.data.shape[1]
    targets = np.asarray(targets, dtype=np.int64)
    if targets.ndim != 1 or len(targets) != len(probabilities.data):
        raise UsageError("targets must be one class id per batch row")
    if targets.size and (targets.min() < 0 or targets.max() >= n_classes):
        raise UsageError(
            f"targets must lie in 0..{n_classes - 1}, got range "
            f"[{targets.min()}, {targets.max()}]")
    row_sums = probabilities.data.sum(axis=1)
    if np.abs(row_sums - 1.0).max() > 1e-6:
        raise UsageError("probability rows must sum to 1; pass softmax "
                         "output, not logits")
    p_t = tk.clamp_min(tk.gather_rows(probabilities, targets), 1e-12)
    nll = tk.neg(tk.log(p_t))
    if config.gamma == 0.0:
        scaled = nll
    else:
        modulator = tk.pow_const(tk.add(tk.neg(p_t), 1.0), config.gamma)
        scaled = tk.mul(modulator, nll)
    if config.alpha != 1.0:
        scaled = tk.mul(scaled, config.alpha)
    return scaled.mean()


class AdamW:
    """Bias-corrected adaptive optimizer with decoupled weight decay.

    Parameters whose grad is unset are skipped entirely; a non-finite
    gradient aborts the step with the offending parameter's name.
    """

    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=1e-4):
        if lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        self.params = dict(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self._m = {name: np.zeros_like(p.data)
                   for name, p in self.params.items()}
        self._v = {name: np.zeros_like(p.data)
                   for name, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if not np.isfinite(g).all():
                raise NumericalError(
                    f"non-finite gradient in parameter {name!r}")
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                # decoupled decay acts on the pre-step weights
                p.data -= self.lr * self.weight_decay * p.data
            p.data -= self.lr * update


class PlateauScheduler:
    """Halve the learning rate after `patience` consecutive epochs without
    validation-loss improvement; never below min_lr."""

    def __init__(self, optimizer, factor=0.5, patience=3, min_lr=1e-6,
                 threshold=1e-8):
        if not 0.0 < factor < 1.0:
            raise ConfigError(f"decay factor must lie in (0, 1), got {factor}")
        if patience < 1:
            raise ConfigError(f"patience must be >= 1, got {patience}")
        self.optimizer = optimizer
        self.factor = factor
        self.patience = patience
        self.min_lr = min_lr
        self.threshold = threshold
        self.best = np.inf
        self.stagnant = 0

    @property
    def lr(self):
        return self.optimizer.lr

    def step(self, val_loss):
        if val_loss < self.best - self.threshold:
            self.best = val_loss
            self.stagnant = 0
            return self.optimizer.lr
        self.stagnant += 1
        if self.stagnant >= self.patience:
            self.optimizer.lr = max(self.optimizer.lr * self.factor,
                                    self.min_lr)
            self.stagnant = 0
        return self.optimizer.lr


@dataclass
class TrainRunConfig:
    arch: str
    batch_size: int
    lr: float
    epochs: int = DEFAULT_EPOCHS
    early_stop_patience: int = DEFAULT_EARLY_STOP
    seed: int = 17
    weight_decay: float = 1e-4
    focal: FocalLossConfig = field(default_factory=FocalLossConfig)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be > 0, got {self.lr}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")

    @classmethod
    def for_arch(cls, arch, **overrides):
        if arch not in TABLE1:
            raise ConfigError(f"no default run configuration for {arch!r}")
        merged = dict(TABLE1[arch])
        merged.update(overrides)
        return cls(arch=arch, **merged)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    train_acc: float
    val_acc: float


class TrainingHistory:
    CSV_HEADER = ["epoch", "train_loss", "val_loss", "train_acc", "val_acc"]

    def __init__(self, records=None):
        self.records = list(records) if records else []

    def __len__(self):
        return len(self.records)

    def __eq__(self, other):
        return isinstance(other, TrainingHistory) and \
            self.records == other.records

    def append(self, record):
        self.records.append(record)

    def val_losses(self):
        return [r.val_loss for r in self.records]

    def best_epoch(self):
        if not self.records:
            raise UsageError("history is empty")
        return min(self.records, key=lambda r: r.val_loss).epoch

    def to_csv(self, path):
        path = Path(path)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.CSV_HEADER)
            for r in self.records:
                writer.writerow([r.epoch, repr(r.train_loss),
                                 repr(r.val_loss), repr(r.train_acc),
                                 repr(r.val_acc)])
        return path

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != cls.CSV_HEADER:
                raise ParseError(f"{path}: unexpected history header "
                                 f"{header}", line=1)
            records = []
            for line_no, row in enumerate(reader, start=2):
                if not row:
                    continue
                try:
                    records.append(EpochRecord(
                        int(row[0]), float(row[1]), float(row[2]),
                        float(row[3]), float(row[4])))
                except (ValueError, IndexError):
                    raise ParseError(f"{path}: bad history row",
                                     line=line_no) from None
        return cls(records)


def evaluate_split(model, X, y, focal_config, batch_size=256):
    """Eval-mode loss and accuracy over one split."""
    total_loss = 0.0
    correct = 0
    n = len(X)
    with tk.no_grad():
        for start in range(0, n, batch_size):
            xb = X[start:start + batch_size]
            yb = y[start:start + batch_size]
            logits = model.forward(
                Tensor(xb.reshape(len(xb), 1, -1)), training=False)
            probs = tk.softmax(logits, axis=-1)
            loss = focal_loss(probs, yb, focal_config)
            total_loss += loss.item() * len(xb)
            correct += int((np.argmax(logits.data, axis=1) == yb).sum())
    return total_loss / n, correct / n


def train(model, dataset, run_config):
    """Mini-batch training with plateau scheduling and early stopping.

    The dataset must carry train/val split tags.  The model is updated in
    place and ends holding the weights of its best validation epoch.
    """
    X_train, y_train = dataset.matrix("train")
    X_val, y_val = dataset.matrix("val")
    if len(X_train) == 0:
        raise ConfigError("training split is empty; run the splitter first")
    if len(X_val) == 0:
        raise ConfigError("validation split is empty; run the splitter first")
    rng = np.random.default_rng(run_config.seed)
    optimizer = AdamW(model.parameters(), lr=run_config.lr,
                      weight_decay=run_config.weight_decay)
    scheduler = PlateauScheduler(optimizer)
    history = TrainingHistory()
    best_val = np.inf
    best_state = None
    stagnant = 0
    n = len(X_train)
    for epoch in range(1, run_config.epochs + 1):
        order = rng.permutation(n)
        epoch_loss = 0.0
        epoch_correct = 0
        for start in range(0, n, run_config.batch_size):
            idx = order[start:start + run_config.batch_size]
            xb = X_train[idx]
            yb = y_train[idx]
            logits = model.forward(Tensor(xb.reshape(len(xb), 1, -1)),
                                   training=True, rng=rng)
            probs = tk.softmax(logits, axis=-1)
            loss = focal_loss(probs, yb, run_config.focal)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_loss += loss.item() * len(xb)
            epoch_correct += int((np.argmax(logits.data, axis=1) == yb).sum())
        val_loss, val_acc = evaluate_split(model, X_val, y_val,
                                           run_config.focal)
        history.append(EpochRecord(epoch, epoch_loss / n, val_loss,
                                   epoch_correct / n, val_acc))
        scheduler.step(val_loss)
        if val_loss < best_val - 1e-8:
            best_val = val_loss
            best_state = {k: v.copy()
                          for k, v in model.state_arrays().items()}
            stagnant = 0
        else:
            stagnant += 1
            if stagnant >= run_config.early_stop_patience:
                break
    if best_state is not None:
        model.load_state_arrays(best_state)
    return model, history
