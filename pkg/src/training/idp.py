"""
Iterative denoising of pseudo-parallel translations.

The store keeps one translation per (example id, modality of the
translation): a-tilde for text-only examples, w-tilde for audio-only ones,
and both for paired examples (used by C-hat). Unpaired entries have the
fixed cap lengths; paired entries have their ground-truth lengths. All
operations here run without recording gradients. Refreshes fill a second
generation of buffers in place and then swap it in; the buffers are allocated
once, and a failed refresh leaves iteration k-1 intact.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from tqdm import tqdm

from src.config import AUDIO_FEATURE_DIM, Modality
from src.errors import CheckpointMismatchError, ContractError, PipelineOrderError
from src.model.transformer import DualTransformer
from src.nn.tensor import no_grad
from src.training.corruption import make_masked_sequence
from src.utils.corpus import Example
from src.utils.storage import read_store, write_store

logger = logging.getLogger(__name__)

Key = tuple[int, Modality]


@dataclass(frozen=True)
class _Job:
    key: Key
    source: np.ndarray  # the other modality of the example
    init_length: int


@dataclass
class PseudoParallelStore:
    text_width: int
    iteration: int | None = None
    entries: dict[Key, np.ndarray] = field(default_factory=dict)
    _spare: dict[Key, np.ndarray] = field(default_factory=dict, repr=False, compare=False)

    @property
    def initialized(self) -> bool:
        return self.iteration is not None

    def require_iteration(self, expected: int) -> None:
        if self.iteration != expected:
            raise PipelineOrderError(f"store holds iteration {self.iteration}, training expects iteration {expected}")

    def width(self, modality: Modality) -> int:
        return self.text_width if modality is Modality.TEXT else AUDIO_FEATURE_DIM

    def get(self, example_id: int, modality: Modality, iteration: int, expected_length: int | None = None) -> np.ndarray:
        self.require_iteration(iteration)
        key = (int(example_id), modality)
        if key not in self.entries:
            raise PipelineOrderError(f"no {modality.value} translation stored for example {example_id}")
        value = self.entries[key]
        if expected_length is not None and value.shape[0] != expected_length:
            raise ContractError(
                f"stored {modality.value} translation for example {example_id} has length {value.shape[0]}, "
                f"expected {expected_length}"
            )
        return value

    def lookup(self, iteration: int,
               expected_length: Callable[[int, Modality], int | None] | None = None) -> Callable[[int, Modality], np.ndarray]:
        """Read-only accessor pinned to one iteration tag, for the loss functions."""
        def fetch(example_id: int, modality: Modality) -> np.ndarray:
            length = expected_length(example_id, modality) if expected_length else None
            return self.get(example_id, modality, iteration, length)
        return fetch

    def replace(self, entries: dict[Key, np.ndarray], iteration: int) -> None:
        """Install a full new generation; lengths of existing entries may not change."""
        missing = sorted(set(self.entries) - set(entries))
        if missing:
            raise PipelineOrderError(f"refresh left {len(missing)} entries stale, e.g. example {missing[0][0]}")
        for key, value in entries.items():
            if key in self.entries and self.entries[key].shape != value.shape:
                raise ContractError(
                    f"translation shape for example {key[0]} ({key[1].value}) changed from "
                    f"{self.entries[key].shape} to {value.shape}"
                )
        self.entries = dict(entries)
        self._spare = {}
        self.iteration = iteration

    def next_generation(self) -> dict[Key, np.ndarray]:
        """Buffers shaped like the current entries for the refresh to fill in place.
        Allocated on first use; afterwards the two generations swap roles."""
        if self._spare.keys() != self.entries.keys():
            self._spare = {key: np.empty_like(value) for key, value in self.entries.items()}
        return self._spare

    def commit(self, iteration: int) -> None:
        """Make the filled `next_generation` buffers current; the old entries become the spare."""
        if self._spare.keys() != self.entries.keys():
            raise PipelineOrderError("commit without a filled next generation")
        self.entries, self._spare = self._spare, self.entries
        self.iteration = iteration

    def num_floats(self) -> int:
        """Floats in the current generation; the spare doubles the resident total."""
        return int(sum(v.size for v in self.entries.values()))

    def save(self, path: str | Path) -> Path:
        if not self.initialized:
            raise PipelineOrderError("cannot save an uninitialized store")
        entries = [(example_id, modality.tag, self.entries[(example_id, modality)])
                   for example_id, modality in sorted(self.entries, key=lambda k: (k[0], k[1].tag))]
        write_store(path, self.iteration, entries)
        return Path(path)

    @classmethod
    def load(cls, path: str | Path, text_width: int) -> "PseudoParallelStore":
        iteration, raw = read_store(path)
        store = cls(text_width=text_width, iteration=iteration)
        for example_id, tag, values in raw:
            modality = Modality.TEXT if tag == Modality.TEXT.tag else Modality.AUDIO
            if values.shape[1] != store.width(modality):
                raise CheckpointMismatchError(
                    f"{path}: {modality.value} entry for example {example_id} has width {values.shape[1]}, "
                    f"model expects {store.width(modality)}"
                )
            store.entries[(example_id, modality)] = values
        return store

    def oracle_view(self, example_ids: Iterable[int] | None = None) -> dict[tuple[int, str], np.ndarray]:
        """Entries keyed by (id, "text" | "audio"), optionally restricted to some examples."""
        wanted = None if example_ids is None else set(example_ids)
        return {(i, m.value): v for (i, m), v in self.entries.items() if wanted is None or i in wanted}


def translate(model: DualTransformer, modality: Modality, query: np.ndarray, source: np.ndarray) -> np.ndarray:
    """One forward pass producing a `modality` translation from the other modality's `source`."""
    with no_grad():
        hidden = model.reconstruct(modality, query, source)
        out = model.text_translation(hidden) if modality is Modality.TEXT else model.audio_head(hidden)
    return out.numpy().astype(np.float32)


def _unpaired_jobs(unpaired_text: Sequence[Example], unpaired_audio: Sequence[Example],
                   text_cap: int = 0, audio_cap: int = 0) -> list[_Job]:
    # Caps are only read when the query is a fresh masked sequence.
    jobs = [_Job((ex.example_id, Modality.AUDIO), ex.values(Modality.TEXT), audio_cap) for ex in unpaired_text]
    jobs += [_Job((ex.example_id, Modality.TEXT), ex.values(Modality.AUDIO), text_cap) for ex in unpaired_audio]
    return jobs


def _paired_jobs(paired: Sequence[Example]) -> list[_Job]:
    jobs = []
    for ex in paired:
        for modality in Modality:
            jobs.append(_Job((ex.example_id, modality), ex.values(modality.other), len(ex.values(modality))))
    return jobs


def _run(model: DualTransformer, jobs: list[_Job], previous: dict[Key, np.ndarray] | None,
         progress: bool, desc: str, out: dict[Key, np.ndarray] | None = None) -> dict[Key, np.ndarray]:
    """Translate every job into fresh arrays, or in place into the buffers of `out`."""
    caps = {Modality.TEXT: model.config.max_text_len, Modality.AUDIO: model.config.max_audio_len}
    results: dict[Key, np.ndarray] = {} if out is None else out
    for job in tqdm(jobs, desc=desc, disable=not progress, leave=False):
        modality = job.key[1]
        if previous is None:
            query = make_masked_sequence(modality, job.init_length, caps[modality])
        else:
            if job.key not in previous:
                raise PipelineOrderError(f"no previous {modality.value} translation for example {job.key[0]}")
            query = previous[job.key]
        translation = translate(model, modality, query, job.source)
        if out is None:
            results[job.key] = translation
            continue
        if job.key not in out:
            raise PipelineOrderError(f"no stored {modality.value} translation for example {job.key[0]}")
        if out[job.key].shape != translation.shape:
            raise ContractError(
                f"translation shape for example {job.key[0]} ({modality.value}) changed from "
                f"{out[job.key].shape} to {translation.shape}"
            )
        out[job.key][...] = translation
    return results


def _advance(model: DualTransformer, store: PseudoParallelStore, jobs: list[_Job],
             previous: dict[Key, np.ndarray] | None, progress: bool, desc: str) -> PseudoParallelStore:
    """Fill the store's spare generation and commit it as iteration k+1. On failure the
    current generation is left untouched."""
    stale = set(store.entries) - {job.key for job in jobs}
    if stale:
        raise PipelineOrderError(
            f"refresh would leave {len(stale)} entries stale, e.g. example {min(k[0] for k in stale)}"
        )
    _run(model, jobs, previous, progress, desc, out=store.next_generation())
    store.commit(store.iteration + 1)
    return store


def translate_for_paired(model: DualTransformer, paired: Sequence[Example],
                         previous: dict[Key, np.ndarray] | None = None,
                         progress: bool = False) -> dict[Key, np.ndarray]:
    """(w-tilde, a-tilde) for each paired example at ground-truth lengths; from masked queries
    when `previous` is None, else one denoising step from the previous translations."""
    return _run(model, _paired_jobs(paired), previous, progress, "translate paired")


def init_translations(model: DualTransformer, unpaired_text: Sequence[Example], unpaired_audio: Sequence[Example],
                      text_cap: int, audio_cap: int, paired: Sequence[Example] = (),
                      store: PseudoParallelStore | None = None, progress: bool = False) -> PseudoParallelStore:
    """Iteration-0 translations from fully masked queries."""
    store = store or PseudoParallelStore(text_width=model.config.d)
    if store.initialized:
        raise PipelineOrderError(f"store already initialized at iteration {store.iteration}")
    entries = _run(model, _unpaired_jobs(unpaired_text, unpaired_audio, text_cap, audio_cap), None, progress, "init")
    entries.update(translate_for_paired(model, paired, None, progress))
    store.replace(entries, iteration=0)
    logger.info("initialized %d translations (%d floats)", len(entries), store.num_floats())
    return store


def refresh_translations(model: DualTransformer, store: PseudoParallelStore, unpaired_text: Sequence[Example],
                         unpaired_audio: Sequence[Example], paired: Sequence[Example] = (),
                         progress: bool = False) -> PseudoParallelStore:
    """k -> k+1: every entry re-encoded with its previous translation as the query."""
    if not store.initialized:
        raise PipelineOrderError("refresh before the store was initialized")
    jobs = _unpaired_jobs(unpaired_text, unpaired_audio) + _paired_jobs(paired)
    return _advance(model, store, jobs, store.entries, progress, f"refresh k={store.iteration + 1}")


def regenerate_translations(model: DualTransformer, store: PseudoParallelStore, unpaired_text: Sequence[Example],
                            unpaired_audio: Sequence[Example], text_cap: int, audio_cap: int,
                            paired: Sequence[Example] = (), progress: bool = False) -> PseudoParallelStore:
    """k -> k+1 from masked queries, ignoring the previous translations (back-translation style)."""
    if not store.initialized:
        raise PipelineOrderError("regenerate before the store was initialized")
    jobs = _unpaired_jobs(unpaired_text, unpaired_audio, text_cap, audio_cap) + _paired_jobs(paired)
    return _advance(model, store, jobs, None, progress, f"regenerate k={store.iteration + 1}")
