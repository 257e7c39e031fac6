"""
Stochastic input corruption.

    corrupt_text / corrupt_audio      C(w), C(a): select, then mask / random / keep
    segment_audio                     greedy left-to-right partition into segments
    make_masked_sequence              all-MASK text or all-zero audio queries
    imitate_translation_noise         C-hat: swap positions for their IDP translation

Every draw comes from a generator built by `stream(seed, purpose, example_id,
epoch)`, so re-running an epoch reproduces its corruption exactly.
"""

from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np
import pandas as pd

from src.config import AUDIO_FEATURE_DIM, MASK_ID, NUM_SPECIAL_TOKENS, CorruptionPolicy, Modality
from src.errors import ContractError, DimensionError

MASK, RANDOM, KEEP = "mask", "random", "keep"
ACTIONS = (MASK, RANDOM, KEEP)


class Purpose(IntEnum):
    """Distinct random streams; one per use of randomness in a run."""

    SHUFFLE = 0
    IDAE_TEXT = 1
    IDAE_AUDIO = 2
    CDAE_TEXT = 3
    CDAE_AUDIO = 4
    NOISE_TEXT = 5
    NOISE_AUDIO = 6
    FINETUNE_SHUFFLE = 8
    TRIALS = 9
    SUBSAMPLE = 10
    WARMUP_SHUFFLE = 11


def stream(seed: int, purpose: Purpose, example_id: int = 0, epoch: int = 0) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(purpose), int(example_id), int(epoch)])


@dataclass
class CorruptionRecord:
    """What C did to one sequence.

    Text records index single positions; audio records index [start, end)
    segments. `originals[i]` holds the values that were at selection i.
    """

    modality: Modality
    length: int
    indices: list = field(default_factory=list)
    actions: list[str] = field(default_factory=list)
    originals: list[np.ndarray] = field(default_factory=list)
    # Audio selections that wanted a random span but had none available.
    fallbacks: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.indices)

    def _span(self, index) -> slice:
        if self.modality is Modality.TEXT:
            return slice(int(index), int(index) + 1)
        start, end = index
        return slice(int(start), int(end))

    def position_mask(self) -> np.ndarray:
        """Boolean mask over positions (text) or frames (audio) covered by a selection."""
        mask = np.zeros(self.length, dtype=bool)
        for index in self.indices:
            mask[self._span(index)] = True
        return mask

    def restore(self, corrupted: np.ndarray) -> np.ndarray:
        out = np.array(corrupted, copy=True)
        for index, original in zip(self.indices, self.originals):
            out[self._span(index)] = original
        return out

    def to_json(self, example_id: int) -> dict:
        return {
            "example_id": int(example_id),
            "modality": self.modality.value,
            "length": self.length,
            "indices": [list(map(int, i)) if isinstance(i, tuple) else int(i) for i in self.indices],
            "actions": list(self.actions),
            "fallbacks": list(self.fallbacks),
        }


def _select(n: int, policy: CorruptionPolicy, rng: np.random.Generator,
            eligible: np.ndarray | None = None) -> np.ndarray:
    """Indices of independently selected items; honours `min_selected` only when select_prob > 0."""
    if eligible is None:
        eligible = np.ones(n, dtype=bool)
    draws = rng.random(n)
    chosen = np.flatnonzero((draws < policy.select_prob) & eligible)
    candidates = np.flatnonzero(eligible)
    if policy.select_prob > 0 and len(chosen) < policy.min_selected and len(candidates):
        k = min(policy.min_selected, len(candidates))
        chosen = np.sort(rng.choice(candidates, size=k, replace=False))
    return chosen


def _actions(count: int, policy: CorruptionPolicy, rng: np.random.Generator) -> list[str]:
    u = rng.random(count)
    bounds = (policy.mask_share, policy.mask_share + policy.random_share)
    return [MASK if x < bounds[0] else RANDOM if x < bounds[1] else KEEP for x in u]


def corrupt_text(tokens: np.ndarray, policy: CorruptionPolicy, rng: np.random.Generator,
                 vocab_size: int) -> tuple[np.ndarray, CorruptionRecord]:
    """C(w) over model token ids. Special ids are never selected nor drawn as replacements."""
    tokens = np.asarray(tokens, dtype=np.int64)
    eligible = tokens >= NUM_SPECIAL_TOKENS
    chosen = _select(len(tokens), policy, rng, eligible)
    actions = _actions(len(chosen), policy, rng)
    replacements = rng.integers(NUM_SPECIAL_TOKENS, vocab_size, size=len(chosen))

    out = tokens.copy()
    record = CorruptionRecord(Modality.TEXT, len(tokens))
    for pos, action, repl in zip(chosen, actions, replacements):
        record.indices.append(int(pos))
        record.actions.append(action)
        record.originals.append(tokens[pos : pos + 1].copy())
        if action == MASK:
            out[pos] = MASK_ID
        elif action == RANDOM:
            out[pos] = repl
    return out, record


def segment_audio(num_frames: int, rng: np.random.Generator,
                  segment_len_range: tuple[int, int] = (20, 50)) -> list[tuple[int, int]]:
    """Tile [0, num_frames) left to right with lengths uniform on the inclusive range; the last is truncated."""
    if num_frames < 1:
        raise ContractError(f"cannot segment an utterance of {num_frames} frames")
    lo, hi = segment_len_range
    segments, start = [], 0
    while start < num_frames:
        end = min(start + int(rng.integers(lo, hi + 1)), num_frames)
        segments.append((start, end))
        start = end
    return segments


def _random_span(num_frames: int, start: int, end: int, rng: np.random.Generator) -> int | None:
    """Start of a same-length span that does not overlap [start, end), or None."""
    length = end - start
    starts = np.arange(num_frames - length + 1)
    valid = starts[(starts + length <= start) | (starts >= end)]
    if len(valid) == 0:
        return None
    return int(rng.choice(valid))


def corrupt_audio(features: np.ndarray, policy: CorruptionPolicy,
                  rng: np.random.Generator) -> tuple[np.ndarray, CorruptionRecord]:
    """C(a): zero-fill, copy another span of the same utterance, or keep each selected segment."""
    features = np.asarray(features, dtype=np.float32)
    if features.ndim != 2 or features.shape[0] < 1:
        raise ContractError(f"audio corruption needs a non-empty T x F matrix, got {features.shape}")
    num_frames = features.shape[0]
    segments = segment_audio(num_frames, rng, policy.segment_len_range)
    chosen = _select(len(segments), policy, rng)
    actions = _actions(len(chosen), policy, rng)

    out = features.copy()
    record = CorruptionRecord(Modality.AUDIO, num_frames)
    for seg_idx, action in zip(chosen, actions):
        start, end = segments[seg_idx]
        record.indices.append((start, end))
        record.originals.append(features[start:end].copy())
        if action == RANDOM:
            source = _random_span(num_frames, start, end, rng)
            if source is None:
                record.fallbacks.append(len(record.actions))
                action = MASK
            else:
                out[start:end] = features[source : source + end - start]
        if action == MASK:
            out[start:end] = 0.0
        record.actions.append(action)
    return out, record


def corrupt(modality: Modality, values: np.ndarray, policy: CorruptionPolicy, rng: np.random.Generator,
            vocab_size: int) -> tuple[np.ndarray, CorruptionRecord]:
    if modality is Modality.TEXT:
        return corrupt_text(values, policy, rng, vocab_size)
    return corrupt_audio(values, policy, rng)


def make_masked_sequence(modality: Modality, length: int, cap: int) -> np.ndarray:
    """All-MASK token ids or an all-zero feature matrix of the given length."""
    if length < 1:
        raise ContractError(f"masked sequence length must be >= 1, got {length}")
    if length > cap:
        raise ContractError(f"masked {modality.value} sequence of length {length} exceeds the cap {cap}")
    if modality is Modality.TEXT:
        return np.full(length, MASK_ID, dtype=np.int64)
    return np.zeros((length, AUDIO_FEATURE_DIM), dtype=np.float32)


def imitate_translation_noise(modality: Modality, clean: np.ndarray, translated: np.ndarray, replace_prob: float,
                              rng: np.random.Generator, token_table: np.ndarray | None = None,
                              segment_len_range: tuple[int, int] = (20, 50)) -> tuple[np.ndarray, np.ndarray]:
    """C-hat: replace a `replace_prob` share of positions (text) or segments (audio) by
    the translation at the same positions.

    Text input is token ids and comes back as a T x d embedding matrix whose
    untouched rows are `token_table[clean]`. Returns (mixed, replaced-position mask).
    """
    clean = np.asarray(clean)
    translated = np.asarray(translated, dtype=np.float32)
    if translated.shape[0] != clean.shape[0]:
        raise ContractError(
            f"translation length {translated.shape[0]} does not match the clean {modality.value} length {clean.shape[0]}"
        )
    length = clean.shape[0]
    if modality is Modality.TEXT:
        if token_table is None:
            raise ContractError("text translation noise needs the token embedding table")
        if translated.shape[1] != token_table.shape[1]:
            raise DimensionError(f"translated width {translated.shape[1]} != embedding width {token_table.shape[1]}")
        mixed = np.asarray(token_table, dtype=np.float32)[clean.astype(np.int64)].copy()
        replaced = rng.random(length) < replace_prob
    else:
        mixed = clean.astype(np.float32).copy()
        replaced = np.zeros(length, dtype=bool)
        segments = segment_audio(length, rng, segment_len_range)
        for (start, end), hit in zip(segments, rng.random(len(segments)) < replace_prob):
            replaced[start:end] = hit
    mixed[replaced] = translated[replaced]
    return mixed, replaced


def summarize_records(records: list[dict]) -> dict:
    """Selection and action shares over `CorruptionRecord.to_json` dumps."""
    if not records:
        return {"records": 0}
    frame = pd.DataFrame(records)
    frame["selected"] = frame["indices"].map(len)
    actions = frame["actions"].explode().dropna()
    shares = actions.value_counts(normalize=True).reindex(list(ACTIONS), fill_value=0.0)
    summary = {"records": int(len(frame)), "selected": int(frame["selected"].sum())}
    for modality, group in frame.groupby("modality"):
        units = group["length"].sum() if modality == Modality.TEXT.value else None
        summary[f"{modality}.selected_mean"] = float(group["selected"].mean())
        if units:
            summary[f"{modality}.selected_fraction"] = float(group["selected"].sum() / units)
    summary.update({f"share.{name}": float(value) for name, value in shares.items()})
    return summary
