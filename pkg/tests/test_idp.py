import numpy as np
import pytest

from src.config import Modality
from src.errors import CheckpointMismatchError, ContractError, FormatError, PipelineOrderError
from src.model.checkpoint import load_model
from src.model.transformer import create_model
from src.training.idp import (
    PseudoParallelStore,
    init_translations,
    refresh_translations,
    regenerate_translations,
    translate_for_paired,
)
from src.utils.corpus import Example
from src.utils.dataset import fidelity_oracle, read_manifest

TEXT_CAP, AUDIO_CAP = 6, 12


@pytest.fixture
def model(tiny_model_config):
    return create_model(tiny_model_config, seed=0)


@pytest.fixture
def examples(rng):
    texts = [Example(i, "unpaired_text", tokens=rng.integers(2, 10, size=3 + i)) for i in range(3)]
    audios = [Example(10 + i, "unpaired_audio", features=rng.normal(size=(5 + i, 160)).astype(np.float32))
              for i in range(3)]
    paired = [Example(20, "paired", tokens=rng.integers(2, 10, size=4),
                      features=rng.normal(size=(9, 160)).astype(np.float32))]
    return texts, audios, paired


def initialized(model, examples):
    texts, audios, paired = examples
    return init_translations(model, texts, audios, TEXT_CAP, AUDIO_CAP, paired)


def test_init_shapes(model, examples):
    store = initialized(model, examples)
    assert store.iteration == 0
    for i in range(3):
        assert store.entries[(i, Modality.AUDIO)].shape == (AUDIO_CAP, 160)
        assert store.entries[(10 + i, Modality.TEXT)].shape == (TEXT_CAP, 16)
    assert store.entries[(20, Modality.TEXT)].shape == (4, 16)
    assert store.entries[(20, Modality.AUDIO)].shape == (9, 160)
    assert len(store.entries) == 8


def test_translation_records_no_gradients(model, examples):
    initialized(model, examples)
    assert all(p.grad is None for p in model.parameters())


def test_init_is_deterministic(model, examples):
    a = initialized(model, examples)
    b = initialized(model, examples)
    assert all(a.entries[k].tobytes() == b.entries[k].tobytes() for k in a.entries)


def test_refresh_advances_and_keeps_shapes(model, examples):
    texts, audios, paired = examples
    store = initialized(model, examples)
    before = {k: v.copy() for k, v in store.entries.items()}
    refresh_translations(model, store, texts, audios, paired)
    assert store.iteration == 1
    assert {k: v.shape for k, v in store.entries.items()} == {k: v.shape for k, v in before.items()}
    assert any(not np.array_equal(before[k], store.entries[k]) for k in before)


def test_regenerate_equals_init_for_an_unchanged_model(model, examples):
    texts, audios, paired = examples
    store = initialized(model, examples)
    fresh = {k: v.copy() for k, v in store.entries.items()}
    regenerate_translations(model, store, texts, audios, TEXT_CAP, AUDIO_CAP, paired)
    assert store.iteration == 1
    for key, value in fresh.items():
        np.testing.assert_array_equal(store.entries[key], value)


def test_refreshes_alternate_between_two_buffers(model, examples):
    texts, audios, paired = examples
    store = initialized(model, examples)
    first = dict(store.entries)
    refresh_translations(model, store, texts, audios, paired)
    second = dict(store.entries)
    assert all(second[k] is not first[k] for k in first)
    refresh_translations(model, store, texts, audios, paired)
    assert all(store.entries[k] is first[k] for k in first)
    refresh_translations(model, store, texts, audios, paired)
    assert all(store.entries[k] is second[k] for k in second)
    assert store.iteration == 3


def test_refresh_writes_the_same_values_as_fresh_arrays(model, examples):
    texts, audios, paired = examples
    store = initialized(model, examples)
    expected = translate_for_paired(model, paired, previous=store.entries)
    refresh_translations(model, store, texts, audios, paired)
    for key, value in expected.items():
        np.testing.assert_array_equal(store.entries[key], value)


def test_store_size_is_bounded_by_the_caps(model, examples):
    texts, audios, paired = examples
    store = initialized(model, examples)
    bound = len(texts) * AUDIO_CAP * 160 + len(audios) * TEXT_CAP * 16 + sum(
        len(ex.tokens) * 16 + len(ex.features) * 160 for ex in paired)
    assert store.num_floats() == bound
    refresh_translations(model, store, texts, audios, paired)
    refresh_translations(model, store, texts, audios, paired)
    assert store.num_floats() == bound


def test_failed_refresh_keeps_the_current_generation(model, examples):
    texts, audios, paired = examples
    store = initialized(model, examples)
    before = {k: v.copy() for k, v in store.entries.items()}
    with pytest.raises(PipelineOrderError, match="stale"):
        refresh_translations(model, store, texts[1:], audios, paired)
    with pytest.raises(ContractError, match="changed"):
        regenerate_translations(model, store, texts, audios, TEXT_CAP, AUDIO_CAP - 1, paired)
    assert store.iteration == 0
    for key, value in before.items():
        np.testing.assert_array_equal(store.entries[key], value)


def test_paired_translations_from_previous(model, examples):
    paired = examples[2]
    first = translate_for_paired(model, paired)
    second = translate_for_paired(model, paired, previous=first)
    assert {k: v.shape for k, v in first.items()} == {k: v.shape for k, v in second.items()}


def test_refresh_before_init(model, examples):
    with pytest.raises(PipelineOrderError):
        refresh_translations(model, PseudoParallelStore(text_width=16), *examples)


def test_double_init(model, examples):
    store = initialized(model, examples)
    with pytest.raises(PipelineOrderError, match="already"):
        init_translations(model, [], [], TEXT_CAP, AUDIO_CAP, store=store)


class TestStore:
    def test_get_checks_iteration(self, model, examples):
        store = initialized(model, examples)
        with pytest.raises(PipelineOrderError, match="iteration"):
            store.get(0, Modality.AUDIO, iteration=1)

    def test_get_checks_length(self, model, examples):
        store = initialized(model, examples)
        with pytest.raises(ContractError, match="length"):
            store.get(0, Modality.AUDIO, iteration=0, expected_length=AUDIO_CAP + 1)

    def test_missing_entry(self, model, examples):
        store = initialized(model, examples)
        with pytest.raises(PipelineOrderError):
            store.get(99, Modality.TEXT, iteration=0)

    def test_lookup_is_pinned(self, model, examples):
        store = initialized(model, examples)
        fetch = store.lookup(0)
        np.testing.assert_array_equal(fetch(10, Modality.TEXT), store.entries[(10, Modality.TEXT)])

    def test_stale_entries_are_rejected(self, model, examples):
        store = initialized(model, examples)
        partial = dict(store.entries)
        partial.pop((0, Modality.AUDIO))
        with pytest.raises(PipelineOrderError, match="stale"):
            store.replace(partial, iteration=1)

    def test_shape_change_is_rejected(self, model, examples):
        store = initialized(model, examples)
        changed = dict(store.entries)
        changed[(0, Modality.AUDIO)] = np.zeros((AUDIO_CAP + 1, 160), dtype=np.float32)
        with pytest.raises(ContractError):
            store.replace(changed, iteration=1)

    def test_save_and_load(self, tmp_path, model, examples):
        store = initialized(model, examples)
        path = store.save(tmp_path / "store.dms")
        loaded = PseudoParallelStore.load(path, text_width=16)
        assert loaded.iteration == 0
        assert set(loaded.entries) == set(store.entries)
        for key, value in store.entries.items():
            assert loaded.entries[key].tobytes() == value.tobytes()

    def test_load_with_wrong_width(self, tmp_path, model, examples):
        path = initialized(model, examples).save(tmp_path / "store.dms")
        with pytest.raises(CheckpointMismatchError, match="width"):
            PseudoParallelStore.load(path, text_width=32)

    def test_corrupted_payload(self, tmp_path, model, examples):
        path = initialized(model, examples).save(tmp_path / "store.dms")
        raw = bytearray(path.read_bytes())
        raw[-3] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="checksum"):
            PseudoParallelStore.load(path, text_width=16)

    def test_uninitialized_store_cannot_be_saved(self, tmp_path):
        with pytest.raises(PipelineOrderError):
            PseudoParallelStore(text_width=16).save(tmp_path / "x.dms")

    def test_oracle_view(self, model, examples):
        view = initialized(model, examples).oracle_view([20])
        assert set(view) == {(20, "text"), (20, "audio")}


@pytest.mark.slow
def test_trained_text_translations_decode_to_the_truth(acceptance_runs):
    for seed in sorted({seed for seed, _ in acceptance_runs}):
        config, result = acceptance_runs[seed, "full"]
        model, _ = load_model(result.checkpoint)
        store = PseudoParallelStore.load(result.store, text_width=model.config.d)
        manifest = read_manifest(config.corpus_dir)
        view = store.oracle_view(manifest["splits"]["unpaired_audio"]["ids"])
        report = fidelity_oracle(view, config.corpus_dir, model.text_embed.token.data)
        assert report["text_examples"] == len(manifest["splits"]["unpaired_audio"]["ids"])
        assert report["text_accuracy"] > 0.6, f"seed {seed}"
