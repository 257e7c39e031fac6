import dataclasses
import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, ClassVar

from src.errors import ConfigError, FormatError

DATA_DIR = "data"
OUTPUT_DIR = "output"

# Special token ids shared by the tokenizer, corruption and the model.
PAD_ID = 0
MASK_ID = 1
NUM_SPECIAL_TOKENS = 2


class Modality(str, Enum):
    TEXT = "text"
    AUDIO = "audio"

    @property
    def tag(self) -> int:
        return 0 if self is Modality.TEXT else 1

    @property
    def other(self) -> "Modality":
        return Modality.AUDIO if self is Modality.TEXT else Modality.TEXT


AUDIO_FEATURE_DIM = 160
N_MELS = 80
SAMPLE_RATE_HZ = 16000
FRAME_WIDTH_MS = 50.0
FRAME_STEP_MS = 12.5

# Full-size model; accepted via config but never trained at that size here.
LARGE_PRESET = {
    "model": {
        "d": 768,
        "n_heads": 12,
        "n_uni_layers": 3,
        "n_cross_layers": 3,
        "max_text_len": 256,
        "max_audio_len": 1000,
    },
    "text_cap": 256,
    "audio_cap": 1000,
    "learning_rate": 2e-5,
    "batch_size": 8,
    "idae_corruption": {"segment_len_range": [20, 50]},
    "cdae_corruption": {"segment_len_range": [20, 50]},
}

# Desk scale is what the dataclass defaults already describe.
DESK_PRESET: dict = {}
PRESETS = {"desk": DESK_PRESET, "large": LARGE_PRESET}

TRAIN_MODES = ("full", "no_idae", "no_idp", "no_paired", "paired_only", "late_fusion")
# Modes that keep no translation store (unimodal pre-training only).
STORELESS_MODES = ("late_fusion",)
FINETUNE_TASKS = ("classify", "regress", "speaker")
TEXT_TRANSLATIONS = ("expected_embedding", "hidden_state")
REPRESENTATIONS = ("cross", "unimodal")


class ConfigMixin:
    """from_dict / to_dict for nested dataclass configs; unknown keys are rejected."""

    _nested: ClassVar[dict[str, type]] = {}

    @classmethod
    def from_dict(cls, data: dict[str, Any] | None, where: str = ""):
        data = dict(data or {})
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config key(s) {', '.join(where + k for k in unknown)}")
        defaults = {f.name: f for f in dataclasses.fields(cls)}
        for name, sub_cls in cls._nested.items():
            if name in data and not isinstance(data[name], sub_cls):
                if not isinstance(data[name], dict):
                    raise ConfigError(f"{where}{name} must be an object")
                # Partial nested objects are merged over the field's own default.
                base = defaults[name].default_factory().to_dict()
                base.update(data[name])
                data[name] = sub_cls.from_dict(base, where=f"{where}{name}.")
        try:
            obj = cls(**data)
        except TypeError as exc:
            raise ConfigError(f"{where or cls.__name__}: {exc}") from exc
        obj.validate()
        return obj

    def to_dict(self) -> dict[str, Any]:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    def validate(self) -> None:
        pass


@dataclass
class ModelConfig(ConfigMixin):
    d: int = 64
    n_heads: int = 4
    n_uni_layers: int = 2
    n_cross_layers: int = 2
    vocab_size: int = 64
    audio_feature_dim: int = AUDIO_FEATURE_DIM
    max_text_len: int = 16
    max_audio_len: int = 64
    ffn_multiplier: int = 4
    layer_norm_eps: float = 1e-5
    init_std: float = 0.02
    # Which continuous state the audio->text translation emits.
    text_translation: str = "expected_embedding"

    def validate(self) -> None:
        for name in ("d", "n_heads", "n_uni_layers", "n_cross_layers", "vocab_size",
                     "max_text_len", "max_audio_len", "ffn_multiplier"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name} must be >= 1, got {getattr(self, name)}")
        if self.d % self.n_heads:
            raise ConfigError(f"model.d={self.d} is not divisible by model.n_heads={self.n_heads}")
        if self.audio_feature_dim != AUDIO_FEATURE_DIM:
            raise ConfigError(f"model.audio_feature_dim must be {AUDIO_FEATURE_DIM}")
        if self.vocab_size <= NUM_SPECIAL_TOKENS:
            raise ConfigError("model.vocab_size leaves no room for non-special tokens")
        if self.text_translation not in TEXT_TRANSLATIONS:
            raise ConfigError(f"model.text_translation must be one of {TEXT_TRANSLATIONS}")


@dataclass
class CorruptionPolicy(ConfigMixin):
    select_prob: float = 0.15
    mask_share: float = 0.8
    random_share: float = 0.1
    keep_share: float = 0.1
    segment_len_range: tuple[int, int] = (20, 50)
    # Force this many selections when the Bernoulli draw selects none (only if select_prob > 0).
    min_selected: int = 0

    def __post_init__(self):
        self.segment_len_range = tuple(int(v) for v in self.segment_len_range)

    def validate(self) -> None:
        for name in ("select_prob", "mask_share", "random_share", "keep_share"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"corruption.{name} must be in [0, 1], got {value}")
        total = self.mask_share + self.random_share + self.keep_share
        if abs(total - 1.0) > 1e-9:
            raise ConfigError(f"corruption shares must sum to 1, got {total}")
        lo, hi = self.segment_len_range
        if lo < 1 or hi < lo:
            raise ConfigError(f"corruption.segment_len_range is empty: {self.segment_len_range}")
        if self.min_selected < 0:
            raise ConfigError("corruption.min_selected must be >= 0")

    @classmethod
    def idae(cls, **overrides) -> "CorruptionPolicy":
        return cls(**{"select_prob": 0.15, "mask_share": 0.8, "random_share": 0.1, "keep_share": 0.1, **overrides})

    @classmethod
    def cdae(cls, **overrides) -> "CorruptionPolicy":
        return cls(**{"select_prob": 0.30, "mask_share": 0.6, "random_share": 0.2, "keep_share": 0.2, **overrides})


def _desk_idae() -> CorruptionPolicy:
    return CorruptionPolicy.idae(segment_len_range=(4, 8), min_selected=1)


def _desk_cdae() -> CorruptionPolicy:
    return CorruptionPolicy.cdae(segment_len_range=(4, 8), min_selected=1)


@dataclass
class TrainConfig(ConfigMixin):
    corpus_dir: str = DATA_DIR
    output_dir: str = OUTPUT_DIR
    epochs: int = 30  # K
    warmup_epochs: int = 5  # T
    batch_size: int = 8
    learning_rate: float = 1e-3
    warmup_fraction: float = 0.1
    seed: int = 0
    mode: str = "full"
    checkpoint_every: int = 1
    model: ModelConfig = field(default_factory=ModelConfig)
    idae_corruption: CorruptionPolicy = field(default_factory=_desk_idae)
    cdae_corruption: CorruptionPolicy = field(default_factory=_desk_cdae)
    translation_noise_prob: float = 0.30
    # Also train the refresh step on paired data (modes that refresh translations).
    refine_paired: bool = True
    text_cap: int = 16
    audio_cap: int = 64
    loss_on_all_positions: bool = False
    grad_clip: float = 1.0
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    unpaired_fraction: float = 1.0
    resume_checkpoint: str | None = None
    resume_store: str | None = None
    stop_after_epoch: int | None = None
    show_progress: bool = True

    _nested: ClassVar[dict[str, type]] = {
        "model": ModelConfig,
        "idae_corruption": CorruptionPolicy,
        "cdae_corruption": CorruptionPolicy,
    }

    def __post_init__(self):
        self.adam_betas = tuple(float(b) for b in self.adam_betas)

    def validate(self) -> None:
        if self.warmup_epochs < 1 or self.epochs < 1:
            raise ConfigError("epochs (K) and warmup_epochs (T) must both be >= 1")
        if self.mode not in TRAIN_MODES:
            raise ConfigError(f"mode must be exactly one of {TRAIN_MODES}, got {self.mode!r}")
        if self.batch_size < 1 or self.checkpoint_every < 1:
            raise ConfigError("batch_size and checkpoint_every must be >= 1")
        if not 0.0 <= self.warmup_fraction <= 1.0:
            raise ConfigError("warmup_fraction must be in [0, 1]")
        if not 0.0 <= self.translation_noise_prob <= 1.0:
            raise ConfigError("translation_noise_prob must be in [0, 1]")
        if not 0.0 < self.unpaired_fraction <= 1.0:
            raise ConfigError("unpaired_fraction must be in (0, 1]")
        if not 1 <= self.text_cap <= self.model.max_text_len:
            raise ConfigError(f"text_cap={self.text_cap} must be in [1, model.max_text_len={self.model.max_text_len}]")
        if not 1 <= self.audio_cap <= self.model.max_audio_len:
            raise ConfigError(f"audio_cap={self.audio_cap} must be in [1, model.max_audio_len={self.model.max_audio_len}]")
        if self.mode in STORELESS_MODES:
            if self.resume_store is not None:
                raise ConfigError(f"mode {self.mode!r} keeps no translation store; drop resume_store")
        elif (self.resume_checkpoint is None) != (self.resume_store is None):
            raise ConfigError("resume_checkpoint and resume_store must be given together")


@dataclass
class FinetuneConfig(ConfigMixin):
    task: str = "classify"
    corpus_dir: str = DATA_DIR
    output_dir: str = OUTPUT_DIR
    # None trains from a seeded random init (the no-pre-training baseline).
    pretrained_checkpoint: str | None = None
    model: ModelConfig = field(default_factory=ModelConfig)
    epochs: int = 10
    batch_size: int = 8
    learning_rate: float = 1e-3
    warmup_fraction: float = 0.1
    seed: int = 0
    use_text_outputs: bool = True
    use_audio_outputs: bool = True
    representation: str = "cross"
    # Manifest label to train on; None picks the task default (parity / mean_id / speaker).
    label: str | None = None
    grad_clip: float = 1.0
    train_split: str = "paired"
    eval_split: str = "test"
    max_trials: int = 2000
    show_progress: bool = True

    _nested: ClassVar[dict[str, type]] = {"model": ModelConfig}

    def validate(self) -> None:
        if self.task not in FINETUNE_TASKS:
            raise ConfigError(f"task must be one of {FINETUNE_TASKS}, got {self.task!r}")
        if self.representation not in REPRESENTATIONS:
            raise ConfigError(f"representation must be one of {REPRESENTATIONS}")
        if not (self.use_text_outputs or self.use_audio_outputs):
            raise ConfigError("at least one of use_text_outputs / use_audio_outputs must be on")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")


def parse_override(text: str) -> tuple[list[str], Any]:
    """Parse 'a.b.c=value'; value is JSON when it parses, else a plain string."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form dotted.key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def apply_overrides(data: dict[str, Any], overrides: list[str]) -> dict[str, Any]:
    data = json.loads(json.dumps(data))
    for text in overrides:
        path, value = parse_override(text)
        node = data
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {text!r} descends into a non-object key {part!r}")
        node[path[-1]] = value
    return data


def merge(base: dict[str, Any], update: dict[str, Any]) -> dict[str, Any]:
    """Recursive dict merge; `update` wins on leaves."""
    out = dict(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = merge(out[key], value)
        else:
            out[key] = value
    return out


def load_config(path: str | Path | None, cls, overrides: list[str] | None = None, preset: str | None = None):
    """Read a JSON config document over an optional named preset, apply dotted overrides,
    build and validate `cls`."""
    data: dict[str, Any] = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except OSError as exc:
            raise FormatError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise FormatError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise FormatError(f"config {path} must be a JSON object")
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        data = merge(PRESETS[preset], data)
    data = apply_overrides(data, overrides or [])
    return cls.from_dict(data)


def write_effective_config(config: ConfigMixin, output_dir: str | Path) -> Path:
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "effective_config.json"
    path.write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    return path
