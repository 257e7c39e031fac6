"""
Synthetic paired audio-text corpus generator.
Each token owns a fixed 160-dim "signature"; an utterance's audio is the
signature of every token repeated F frames, plus Gaussian noise and an
optional per-speaker offset. Ground-truth partners of the unpaired halves are
kept under the manifest's `hidden` key for evaluation oracles only.
Run as: python -m src.main synth-gen --config synth.json
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from src.config import AUDIO_FEATURE_DIM, NUM_SPECIAL_TOKENS, ConfigMixin
from src.errors import ConfigError, ContractError, FormatError
from src.evaluation.metrics import cosine_rows, nearest_tokens
from src.utils.corpus import MANIFEST, normalize
from src.utils.corpus import feature_stats as frame_stats
from src.utils.storage import read_features, read_json, write_features, write_json

logger = logging.getLogger(__name__)

CORPUS_FORMAT = "duomodal-corpus/1"
SPLITS = ("paired", "unpaired_text", "unpaired_audio", "test")
# Which modalities each split ships to training.
SPLIT_MODALITIES = {
    "paired": ("text", "audio"),
    "unpaired_text": ("text",),
    "unpaired_audio": ("audio",),
    "test": ("text", "audio"),
}
LABEL_RULES = ("parity", "mean_id", "speaker")
HIDDEN_AUDIO_DIR = "hidden/audio"
# Splits whose audio the training loader normalizes with; test audio is held out.
STATS_SPLITS = ("paired", "unpaired_audio")
MIN_SIGNATURE_DISTANCE = 1.0


@dataclass
class SynthSpec(ConfigMixin):
    vocab_size: int = 32  # V_s
    frames_per_token: int = 4  # F
    noise: float = 0.05  # sigma
    min_len: int = 5
    max_len: int = 12
    n_paired: int = 200
    n_unpaired_text: int = 1000
    n_unpaired_audio: int = 1000
    n_test: int = 100
    n_speakers: int = 4
    speaker_scale: float = 0.5
    signature_scale: float = 1.0
    label_rules: tuple[str, ...] = LABEL_RULES
    seed: int = 0
    output_dir: str = "data/synth"

    def __post_init__(self):
        self.label_rules = tuple(self.label_rules)

    def validate(self) -> None:
        if self.vocab_size < 2 or self.frames_per_token < 1:
            raise ConfigError("vocab_size must be >= 2 and frames_per_token >= 1")
        if not 1 <= self.min_len <= self.max_len:
            raise ConfigError(f"utterance length range [{self.min_len}, {self.max_len}] is empty")
        if self.noise < 0 or self.speaker_scale < 0 or self.signature_scale <= 0:
            raise ConfigError("noise and speaker_scale must be >= 0, signature_scale > 0")
        for name in ("n_paired", "n_unpaired_text", "n_unpaired_audio", "n_test", "n_speakers"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        unknown = sorted(set(self.label_rules) - set(LABEL_RULES))
        if unknown:
            raise ConfigError(f"unknown label rule(s) {unknown}; known: {LABEL_RULES}")
        if "speaker" in self.label_rules and self.n_speakers < 1:
            raise ConfigError("the speaker label rule needs n_speakers >= 1")

    @property
    def symbols(self) -> list[str]:
        return [f"t{i}" for i in range(self.vocab_size)]

    def split_sizes(self) -> dict[str, int]:
        return {
            "paired": self.n_paired,
            "unpaired_text": self.n_unpaired_text,
            "unpaired_audio": self.n_unpaired_audio,
            "test": self.n_test,
        }


def label_rule(tag: str, token_ids: list[int] | np.ndarray, vocab_size: int, speaker: int = 0) -> float | int:
    """Label of an utterance given as synthetic token indices (0-based, no special offset)."""
    ids = np.asarray(token_ids, dtype=np.int64)
    if tag == "parity":
        return int(ids.sum() % 2)
    if tag == "mean_id":
        return float(ids.mean() / vocab_size)
    if tag == "speaker":
        return int(speaker)
    raise ContractError(f"unknown label rule {tag!r}; known: {LABEL_RULES}")


def make_signatures(spec: SynthSpec) -> np.ndarray:
    """One row per token, rejection-sampled so every pair is more than 1.0 apart in L2."""
    rng = np.random.default_rng([spec.seed, 2])
    rows: list[np.ndarray] = []
    while len(rows) < spec.vocab_size:
        candidate = rng.normal(0.0, spec.signature_scale, size=AUDIO_FEATURE_DIM)
        if all(np.linalg.norm(candidate - row) > MIN_SIGNATURE_DISTANCE for row in rows):
            rows.append(candidate)
    return np.stack(rows).astype(np.float32)


def make_speaker_offsets(spec: SynthSpec) -> np.ndarray:
    rng = np.random.default_rng([spec.seed, 3])
    return rng.normal(0.0, spec.speaker_scale, size=(max(spec.n_speakers, 1), AUDIO_FEATURE_DIM)).astype(np.float32)


def _universe_size(spec: SynthSpec) -> float:
    return sum(float(spec.vocab_size) ** n for n in range(spec.min_len, spec.max_len + 1))


def draw_utterances(spec: SynthSpec) -> list[tuple[int, ...]]:
    """Distinct utterances for every split, in split order."""
    needed = sum(spec.split_sizes().values())
    if needed > _universe_size(spec):
        raise ContractError(
            f"{needed} distinct utterances requested but only {_universe_size(spec):.0f} exist; splits would overlap"
        )
    rng = np.random.default_rng([spec.seed, 0])
    seen: set[tuple[int, ...]] = set()
    utterances: list[tuple[int, ...]] = []
    max_attempts = 100 * needed + 1000
    for _ in range(max_attempts):
        if len(utterances) == needed:
            break
        length = int(rng.integers(spec.min_len, spec.max_len + 1))
        utt = tuple(int(t) for t in rng.integers(0, spec.vocab_size, size=length))
        if utt not in seen:
            seen.add(utt)
            utterances.append(utt)
    if len(utterances) < needed:
        raise ContractError(f"could only draw {len(utterances)} of {needed} distinct utterances")
    return utterances


def render_audio(utt: tuple[int, ...], signatures: np.ndarray, speaker_offset: np.ndarray | None,
                 spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    """Concatenated token signatures, each repeated F frames, plus noise."""
    features = np.repeat(signatures[list(utt)], spec.frames_per_token, axis=0)
    if speaker_offset is not None:
        features = features + speaker_offset
    if spec.noise > 0:
        features = features + rng.normal(0.0, spec.noise, size=features.shape)
    return features.astype(np.float32)


def generate(spec: SynthSpec, output_dir: str | Path | None = None) -> Path:
    """Write text/{split}.txt, audio/{split}/{id}.dmf, hidden partners and manifest.json.
    The manifest carries per-dimension feature stats over the paired and unpaired audio."""
    spec.validate()
    root = Path(output_dir or spec.output_dir)
    utterances = draw_utterances(spec)
    signatures = make_signatures(spec)
    offsets = make_speaker_offsets(spec) if "speaker" in spec.label_rules else None
    speaker_rng = np.random.default_rng([spec.seed, 4])
    speakers = speaker_rng.integers(0, max(spec.n_speakers, 1), size=len(utterances))
    symbols = spec.symbols

    splits: dict[str, dict] = {}
    labels: dict[str, dict] = {}
    hidden_text: dict[str, str] = {}
    training_audio: list[np.ndarray] = []
    next_id = 0
    for split in SPLITS:
        count = spec.split_sizes()[split]
        ids = list(range(next_id, next_id + count))
        next_id += count
        modalities = SPLIT_MODALITIES[split]
        splits[split] = {"ids": ids, "modalities": list(modalities)}
        lines = []
        for example_id in ids:
            utt = utterances[example_id]
            speaker = int(speakers[example_id])
            labels[str(example_id)] = {tag: label_rule(tag, utt, spec.vocab_size, speaker) for tag in spec.label_rules}
            text = " ".join(symbols[t] for t in utt)
            lines.append(text)
            rng = np.random.default_rng([spec.seed, 1, example_id])
            audio = render_audio(utt, signatures, None if offsets is None else offsets[speaker], spec, rng)
            if "audio" in modalities:
                write_features(root / "audio" / split / f"{example_id}.dmf", audio)
                if split in STATS_SPLITS:
                    training_audio.append(audio)
            else:
                write_features(root / HIDDEN_AUDIO_DIR / f"{example_id}.dmf", audio)
            if "text" not in modalities:
                hidden_text[str(example_id)] = text
        if "text" in modalities:
            path = root / "text" / f"{split}.txt"
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text("".join(line + "\n" for line in lines))

    manifest = {
        "format": CORPUS_FORMAT,
        "spec": spec.to_dict(),
        "vocab": symbols,
        "splits": splits,
        "labels": labels,
        "feature_stats": frame_stats(training_audio) if training_audio else None,
        # Evaluation oracles only; the training loader never reads this key.
        "hidden": {"audio_dir": HIDDEN_AUDIO_DIR, "text": hidden_text},
    }
    write_json(root / MANIFEST, manifest)
    logger.info("generated synthetic corpus in %s (%d utterances)", root, len(utterances))
    return root


def read_manifest(corpus_dir: str | Path) -> dict:
    manifest = read_json(Path(corpus_dir) / MANIFEST)
    if manifest.get("format") != CORPUS_FORMAT:
        raise FormatError(f"{corpus_dir}: not a {CORPUS_FORMAT} corpus (format={manifest.get('format')!r})")
    return manifest


def fidelity_oracle(translations: dict[tuple[int, str], np.ndarray], corpus_dir: str | Path,
                    token_table: np.ndarray | None = None,
                    feature_stats: dict | None = None) -> dict[str, float | None]:
    """Distance of stored translations to the hidden ground truth.

    `translations` maps (example id, "audio" | "text") to a-tilde / w-tilde.
    audio_l1: mean per-frame L1 of a-tilde vs the true features over the
    overlapping length. text_cosine / text_accuracy: cosine of w-tilde rows to
    the true token embeddings, and in-order nearest-token recovery.
    """
    root = Path(corpus_dir)
    manifest = read_manifest(root)
    hidden = manifest["hidden"]
    symbol_ids = {s: i + NUM_SPECIAL_TOKENS for i, s in enumerate(manifest["vocab"])}
    audio_l1: list[float] = []
    cosines: list[float] = []
    hits = total = 0
    for (example_id, modality), values in sorted(translations.items()):
        if modality == "audio":
            path = root / hidden["audio_dir"] / f"{example_id}.dmf"
            if not path.exists():
                raise ContractError(f"no hidden audio for example {example_id}; store and manifest disagree")
            truth = read_features(path)
            truth = normalize(truth, feature_stats)
            n = min(len(values), len(truth))
            audio_l1.append(float(np.abs(values[:n] - truth[:n]).mean()))
        elif modality == "text":
            if str(example_id) not in hidden["text"]:
                raise ContractError(f"no hidden text for example {example_id}; store and manifest disagree")
            if token_table is None:
                continue
            truth_ids = np.array([symbol_ids[s] for s in hidden["text"][str(example_id)].split()])
            n = min(len(values), len(truth_ids))
            cosines.append(float(cosine_rows(values[:n], token_table[truth_ids[:n]]).mean()))
            hits += int((nearest_tokens(values[:n], token_table) == truth_ids[:n]).sum())
            total += n
    return {
        "audio_l1": float(np.mean(audio_l1)) if audio_l1 else None,
        "text_cosine": float(np.mean(cosines)) if cosines else None,
        "text_accuracy": hits / total if total else None,
        "audio_examples": len(audio_l1),
        "text_examples": len(cosines),
    }


def zero_translation_l1(corpus_dir: str | Path, feature_stats: dict | None = None) -> float:
    """Oracle value of an all-zero a-tilde: mean |truth| over the hidden audio."""
    root = Path(corpus_dir)
    manifest = read_manifest(root)
    ids = manifest["splits"]["unpaired_text"]["ids"]
    if not ids:
        return math.nan
    hidden = root / manifest["hidden"]["audio_dir"]
    return float(np.mean([np.abs(normalize(read_features(hidden / f"{i}.dmf"), feature_stats)).mean() for i in ids]))
