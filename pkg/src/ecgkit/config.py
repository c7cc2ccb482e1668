"""Pipeline configuration, seed derivation, and run bookkeeping.

Config files are strict JSON: every key must belong to the documented
schema, and anything the file leaves out falls back to the published
per-architecture training defaults. A resolved config hashes canonically
so reordered keys produce the same fingerprint.
"""

import hashlib
import json
import os
import tempfile
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from .beats import DEFAULT_BEAT_LEN
from .ensemble import STRATEGIES
from .errors import ConfigError
from .gan import GanTrainConfig
from .training import FocalLossConfig, TABLE1, TrainRunConfig

ARCH_KEYS = tuple(sorted(TABLE1))

_TOP_LEVEL_TYPES = {
    "records_dir": (str, type(None)),
    "beats_csv": (str, type(None)),
    "test_csv": (str, type(None)),
    "beat_len": (int,),
    "lead": (str, type(None)),
    "seed": (int,),
    "train_fraction": (float, int),
    "out_dir": (str,),
    "strategy": (str,),
    "ensemble_manifest": (str, type(None)),
}

_ARCH_FIELD_TYPES = {
    "batch_size": (int,),
    "lr": (float, int),
    "epochs": (int,),
    "early_stop_patience": (int,),
    "weight_decay": (float, int),
    "focal_alpha": (float, int),
    "focal_gamma": (float, int),
    "seed": (int,),
}

_GAN_FIELD_TYPES = {
    "beat_len": (int,),
    "noise_len": (int,),
    "noise_dim": (int,),
    "epochs": (int,),
    "batch_size": (int,),
    "g_lr": (float, int),
    "d_lr": (float, int),
    "tau": (float, int),
    "hidden": (int,),
    "dense_width": (int,),
    "dropout": (float, int),
    "balance_ratio": (float, int),
}


def _check_type(key, value, allowed):
    if isinstance(value, bool) or not isinstance(value, allowed):
        names = "/".join("null" if t is type(None) else t.__name__
                         for t in allowed)
        raise ConfigError(f"config key {key!r} expects {names}, "
                          f"got {value!r}")
    return value


def _check_section(name, payload, field_types):
    if not isinstance(payload, dict):
        raise ConfigError(f"config section {name!r} must be an object, "
                          f"got {payload!r}")
    unknown = set(payload) - set(field_types)
    if unknown:
        raise ConfigError(f"unknown config key {sorted(unknown)[0]!r} "
                          f"in section {name!r}")
    for key, value in payload.items():
        _check_type(f"{name}.{key}", value, field_types[key])
    return payload


@dataclass
class PipelineConfig:
    records_dir: str = None
    beats_csv: str = None
    test_csv: str = None
    beat_len: int = DEFAULT_BEAT_LEN
    lead: str = None
    seed: int = 17
    train_fraction: float = 0.85
    out_dir: str = "out"
    strategy: str = "top2_weighted"
    ensemble_manifest: str = None
    train_configs: dict = field(default_factory=dict)
    gan: GanTrainConfig = field(default_factory=GanTrainConfig)

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}; expected "
                              f"one of {', '.join(STRATEGIES)}")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError(f"train fraction must lie in (0, 1), got "
                              f"{self.train_fraction}")
        if self.beat_len < 3:
            raise ConfigError(f"beat length must be >= 3, got {self.beat_len}")
        for arch in ARCH_KEYS:
            self.train_configs.setdefault(arch,
                                          TrainRunConfig.for_arch(arch))

    def to_dict(self):
        """Fully resolved plain dict; the canonical hashing input."""
        out = {
            "records_dir": self.records_dir,
            "beats_csv": self.beats_csv,
            "test_csv": self.test_csv,
            "beat_len": self.beat_len,
            "lead": self.lead,
            "seed": self.seed,
            "train_fraction": self.train_fraction,
            "out_dir": self.out_dir,
            "strategy": self.strategy,
            "ensemble_manifest": self.ensemble_manifest,
        }
        for arch in ARCH_KEYS:
            cfg = self.train_configs[arch]
            out[arch] = {
                "batch_size": cfg.batch_size,
                "lr": cfg.lr,
                "epochs": cfg.epochs,
                "early_stop_patience": cfg.early_stop_patience,
                "weight_decay": cfg.weight_decay,
                "focal_alpha": cfg.focal.alpha,
                "focal_gamma": cfg.focal.gamma,
                "seed": cfg.seed,
            }
        gan = self.gan
        out["gan"] = {key: getattr(gan, key) for key in _GAN_FIELD_TYPES}
        return out


def _train_config_from(arch, payload):
    payload = dict(payload)
    focal_kwargs = {}
    if "focal_alpha" in payload:
        focal_kwargs["alpha"] = float(payload.pop("focal_alpha"))
    if "focal_gamma" in payload:
        focal_kwargs["gamma"] = float(payload.pop("focal_gamma"))
    if focal_kwargs:
        payload["focal"] = FocalLossConfig(**focal_kwargs)
    if "lr" in payload:
        payload["lr"] = float(payload["lr"])
    if "weight_decay" in payload:
        payload["weight_decay"] = float(payload["weight_decay"])
    return TrainRunConfig.for_arch(arch, **payload)


def config_from_payload(payload):
    """Validate a parsed JSON object against the schema and resolve it."""
    if not isinstance(payload, dict):
        raise ConfigError(f"config root must be an object, got {payload!r}")
    known = set(_TOP_LEVEL_TYPES) | set(ARCH_KEYS) | {"gan"}
    unknown = sorted(set(payload) - known)
    if unknown:
        raise ConfigError(f"unknown config key {unknown[0]!r}")

    kwargs = {}
    for key, allowed in _TOP_LEVEL_TYPES.items():
        if key in payload:
            kwargs[key] = _check_type(key, payload[key], allowed)
    if "train_fraction" in kwargs:
        kwargs["train_fraction"] = float(kwargs["train_fraction"])

    train_configs = {}
    for arch in ARCH_KEYS:
        if arch in payload:
            section = _check_section(arch, payload[arch], _ARCH_FIELD_TYPES)
            train_configs[arch] = _train_config_from(arch, section)
    gan_payload = {}
    if "gan" in payload:
        gan_payload = dict(_check_section("gan", payload["gan"],
                                          _GAN_FIELD_TYPES))
        for key in ("g_lr", "d_lr", "tau", "dropout", "balance_ratio"):
            if key in gan_payload:
                gan_payload[key] = float(gan_payload[key])
    return PipelineConfig(train_configs=train_configs,
                          gan=GanTrainConfig(**gan_payload), **kwargs)


def load_config(path):
    """Read, validate, and resolve a config file.

    An empty file means "all defaults". Referenced input paths must exist.
    """
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if not text.strip():
        payload = {}
    else:
        try:
            payload = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: "
                              f"{exc}") from None
    config = config_from_payload(payload)
    for key in ("records_dir", "beats_csv", "test_csv", "ensemble_manifest"):
        value = getattr(config, key)
        if value is not None and not Path(value).exists():
            raise ConfigError(f"config key {key!r} references missing path "
                              f"{value!r}")
    return config


def config_hash(config):
    """Canonical fingerprint, identical for reordered-but-equal configs."""
    payload = config.to_dict() if isinstance(config, PipelineConfig) \
        else config
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


_MASK64 = (1 << 64) - 1


def _splitmix64(state):
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seed(master_seed, stage):
    """Fan a master seed out to one 64-bit seed per named stage."""
    state = master_seed & _MASK64
    for byte in stage.encode("utf-8"):
        state = _splitmix64(state ^ byte)
    return _splitmix64(state)


def thread_cap():
    """Worker ceiling for internal pools; ECGKIT_THREADS overrides the
    sequential default."""
    raw = os.environ.get("ECGKIT_THREADS")
    if raw is None:
        return 1
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"ECGKIT_THREADS must be an integer, got {raw!r}") \
            from None
    if value < 1:
        raise ConfigError(f"ECGKIT_THREADS must be >= 1, got {value}")
    return value


@dataclass
class RunManifest:
    """What a run produced, stamped with its configuration fingerprint."""

    command: str
    config_hash: str
    version: str
    started_at: str
    finished_at: str = ""
    files: list = field(default_factory=list)

    @staticmethod
    def now():
        return datetime.now(timezone.utc).isoformat()

    def add_files(self, paths):
        self.files.extend(str(p) for p in paths)

    def write(self, path):
        """Atomic: the manifest appears complete or not at all."""
        self.finished_at = self.now()
        payload = {"command": self.command,
                   "config_hash": self.config_hash,
                   "version": self.version,
                   "started_at": self.started_at,
                   "finished_at": self.finished_at,
                   "files": sorted(self.files)}
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, temp_name = tempfile.mkstemp(dir=path.parent,
                                         prefix=".manifest-")
        try:
            with os.fdopen(fd, "w") as handle:
                json.dump(payload, handle, indent=2)
                handle.write("\n")
            os.replace(temp_name, path)
        except BaseException:
            if os.path.exists(temp_name):
                os.unlink(temp_name)
            raise
        return path

    @classmethod
    def load(cls, path):
        with open(path) as handle:
            payload = json.load(handle)
        return cls(command=payload["command"],
                   config_hash=payload["config_hash"],
                   version=payload["version"],
                   started_at=payload["started_at"],
                   finished_at=payload["finished_at"],
                   files=payload["files"])
