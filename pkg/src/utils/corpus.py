"""
Corpus loading. Reads the layout written by `src.utils.dataset.generate`
(text/{split}.txt, audio/{split}/{id}.dmf, manifest.json) into `Example`s.
The manifest's `hidden` key is never read here.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from src.config import NUM_SPECIAL_TOKENS, Modality
from src.errors import ContractError, FormatError
from src.utils.storage import read_features, read_json

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"
UNPAIRED_SPLITS = ("unpaired_text", "unpaired_audio")
# Written by `featurize`; used when the manifest carries no stats.
FEATURE_STATS = "feature_stats.json"


@dataclass
class Example:
    example_id: int
    split: str
    tokens: np.ndarray | None = None  # model token ids
    features: np.ndarray | None = None  # T_a x 160
    labels: dict = field(default_factory=dict)

    @property
    def is_paired(self) -> bool:
        return self.tokens is not None and self.features is not None

    def values(self, modality: Modality) -> np.ndarray:
        value = self.tokens if modality is Modality.TEXT else self.features
        if value is None:
            raise ContractError(f"example {self.example_id} ({self.split}) has no {modality.value}")
        return value

    def label(self, name: str):
        if name not in self.labels:
            raise ContractError(f"example {self.example_id} has no {name!r} label")
        return self.labels[name]


class Tokenizer:
    """Whitespace tokenizer; symbol i of the vocabulary is model id i + NUM_SPECIAL_TOKENS."""

    def __init__(self, symbols: list[str]):
        self.symbols = list(symbols)
        self._ids = {s: i + NUM_SPECIAL_TOKENS for i, s in enumerate(self.symbols)}

    @property
    def vocab_size(self) -> int:
        return len(self.symbols) + NUM_SPECIAL_TOKENS

    def encode(self, line: str) -> np.ndarray:
        try:
            return np.array([self._ids[s] for s in line.split()], dtype=np.int64)
        except KeyError as exc:
            raise FormatError(f"token {exc.args[0]!r} is not in the corpus vocabulary") from exc

    def decode(self, ids) -> list[str]:
        return [self.symbols[i - NUM_SPECIAL_TOKENS] if i >= NUM_SPECIAL_TOKENS else ("<pad>", "<mask>")[i]
                for i in map(int, ids)]


@dataclass
class Corpus:
    root: Path
    tokenizer: Tokenizer
    splits: dict[str, list[Example]]
    feature_stats: dict | None = None

    def split(self, name: str) -> list[Example]:
        if name not in self.splits:
            raise ContractError(f"corpus {self.root} has no split {name!r} (have {sorted(self.splits)})")
        return self.splits[name]

    @property
    def paired(self) -> list[Example]:
        return self.splits.get("paired", [])

    @property
    def unpaired_text(self) -> list[Example]:
        return self.splits.get("unpaired_text", [])

    @property
    def unpaired_audio(self) -> list[Example]:
        return self.splits.get("unpaired_audio", [])

    def by_id(self) -> dict[int, Example]:
        return {ex.example_id: ex for examples in self.splits.values() for ex in examples}

    def check_fits(self, max_text_len: int, max_audio_len: int, vocab_size: int) -> None:
        if self.tokenizer.vocab_size > vocab_size:
            raise ContractError(f"corpus needs vocab_size >= {self.tokenizer.vocab_size}, model has {vocab_size}")
        for examples in self.splits.values():
            for ex in examples:
                if ex.tokens is not None and not 1 <= len(ex.tokens) <= max_text_len:
                    raise ContractError(f"example {ex.example_id}: text length {len(ex.tokens)} not in [1, {max_text_len}]")
                if ex.features is not None and not 1 <= len(ex.features) <= max_audio_len:
                    raise ContractError(
                        f"example {ex.example_id}: audio length {len(ex.features)} not in [1, {max_audio_len}]"
                    )


def subsample(examples: list[Example], fraction: float, rng: np.random.Generator) -> list[Example]:
    """Keep ceil(fraction * n) examples chosen by `rng`, in their original order."""
    if fraction >= 1.0 or not examples:
        return list(examples)
    keep = max(1, math.ceil(fraction * len(examples)))
    chosen = np.sort(rng.permutation(len(examples))[:keep])
    return [examples[i] for i in chosen]


def normalize(features: np.ndarray, stats: dict | None) -> np.ndarray:
    if stats is None:
        return features
    mean = np.asarray(stats["mean"], dtype=np.float32)
    std = np.asarray(stats["std"], dtype=np.float32)
    return ((features - mean) / std).astype(np.float32)


def feature_stats(matrices: list[np.ndarray]) -> dict:
    """Per-dimension mean and std (floored at 1e-5) over all frames."""
    stacked = np.concatenate(matrices, axis=0).astype(np.float64)
    return {"mean": stacked.mean(axis=0).tolist(), "std": np.maximum(stacked.std(axis=0), 1e-5).tolist()}


def load_corpus(corpus_dir: str | Path, splits: tuple[str, ...] | None = None, unpaired_fraction: float = 1.0,
                rng: np.random.Generator | None = None) -> Corpus:
    """Load the requested splits (all listed in the manifest by default)."""
    root = Path(corpus_dir)
    manifest = read_json(root / MANIFEST)
    if "splits" not in manifest or "vocab" not in manifest:
        raise FormatError(f"{root / MANIFEST}: missing 'splits' or 'vocab'")
    tokenizer = Tokenizer(manifest["vocab"])
    stats = manifest.get("feature_stats")
    if stats is None and (root / FEATURE_STATS).exists():
        stats = read_json(root / FEATURE_STATS)
    labels = manifest.get("labels", {})
    wanted = splits or tuple(manifest["splits"])
    loaded: dict[str, list[Example]] = {}
    for name in wanted:
        if name not in manifest["splits"]:
            raise FormatError(f"{root}: manifest has no split {name!r}")
        entry = manifest["splits"][name]
        ids = [int(i) for i in entry["ids"]]
        modalities = entry["modalities"]
        lines: list[str] = []
        if "text" in modalities:
            try:
                lines = (root / "text" / f"{name}.txt").read_text().splitlines()
            except OSError as exc:
                raise FormatError(f"cannot read text for split {name}: {exc}") from exc
            if len(lines) != len(ids):
                raise FormatError(f"{root}/text/{name}.txt has {len(lines)} lines for {len(ids)} ids")
        examples = []
        for i, example_id in enumerate(ids):
            examples.append(Example(
                example_id=example_id,
                split=name,
                tokens=tokenizer.encode(lines[i]) if lines else None,
                features=normalize(read_features(root / "audio" / name / f"{example_id}.dmf"), stats)
                if "audio" in modalities else None,
                labels=labels.get(str(example_id), {}),
            ))
        if name in UNPAIRED_SPLITS and rng is not None:
            examples = subsample(examples, unpaired_fraction, rng)
        loaded[name] = examples
    logger.info("loaded corpus %s: %s", root, {k: len(v) for k, v in loaded.items()})
    return Corpus(root=root, tokenizer=tokenizer, splits=loaded, feature_stats=stats)
