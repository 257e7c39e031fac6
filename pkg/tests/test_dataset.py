import math

import numpy as np
import pytest

from src.errors import ConfigError, ContractError, FormatError
from src.utils.dataset import (
    SynthSpec,
    draw_utterances,
    fidelity_oracle,
    generate,
    label_rule,
    make_signatures,
    read_manifest,
    render_audio,
    zero_translation_l1,
)
from src.utils.corpus import feature_stats
from src.utils.storage import read_features, write_json


def test_rendered_audio_is_tokens_times_frames():
    spec = SynthSpec(frames_per_token=4)
    audio = render_audio(tuple(range(8)), make_signatures(spec), None, spec, np.random.default_rng(0))
    assert audio.shape == (32, 160)


def test_noise_free_audio_repeats_signatures():
    spec = SynthSpec(frames_per_token=3, noise=0.0)
    signatures = make_signatures(spec)
    audio = render_audio((2, 5), signatures, None, spec, np.random.default_rng(0))
    np.testing.assert_array_equal(audio[:3], np.tile(signatures[2], (3, 1)))
    np.testing.assert_array_equal(audio[3:], np.tile(signatures[5], (3, 1)))


def test_signatures_are_separated():
    signatures = make_signatures(SynthSpec(vocab_size=16))
    for i in range(16):
        for j in range(i + 1, 16):
            assert np.linalg.norm(signatures[i] - signatures[j]) > 1.0


class TestLabels:
    def test_parity(self):
        assert label_rule("parity", [1, 2, 3], 32) == 0
        assert label_rule("parity", [1, 2], 32) == 1

    def test_mean_id(self):
        assert label_rule("mean_id", [2, 4], 32) == pytest.approx(0.09375)

    def test_speaker(self):
        assert label_rule("speaker", [0], 32, speaker=3) == 3

    def test_unknown(self):
        with pytest.raises(ContractError):
            label_rule("loudness", [0], 32)


def test_utterances_are_distinct_across_splits(tiny_spec):
    utterances = draw_utterances(tiny_spec)
    assert len(utterances) == len(set(utterances)) == sum(tiny_spec.split_sizes().values())
    assert all(tiny_spec.min_len <= len(u) <= tiny_spec.max_len for u in utterances)


def test_too_small_a_universe_is_rejected():
    spec = SynthSpec(vocab_size=2, min_len=1, max_len=1, n_paired=2, n_unpaired_text=1, n_unpaired_audio=0, n_test=0)
    with pytest.raises(ContractError, match="distinct"):
        draw_utterances(spec)


def test_invalid_spec():
    with pytest.raises(ConfigError):
        SynthSpec.from_dict({"min_len": 5, "max_len": 3})


def test_generated_layout(tiny_corpus_dir, tiny_spec):
    manifest = read_manifest(tiny_corpus_dir)
    splits = manifest["splits"]
    assert {k: len(v["ids"]) for k, v in splits.items()} == tiny_spec.split_sizes()
    all_ids = [i for v in splits.values() for i in v["ids"]]
    assert len(all_ids) == len(set(all_ids))
    for i in splits["unpaired_text"]["ids"]:
        assert not (tiny_corpus_dir / "audio" / "unpaired_text" / f"{i}.dmf").exists()
        assert (tiny_corpus_dir / "hidden" / "audio" / f"{i}.dmf").exists()
    assert set(manifest["hidden"]["text"]) == {str(i) for i in splits["unpaired_audio"]["ids"]}
    assert not (tiny_corpus_dir / "text" / "unpaired_audio.txt").exists()
    first = splits["paired"]["ids"][0]
    tokens = (tiny_corpus_dir / "text" / "paired.txt").read_text().splitlines()[0].split()
    frames = read_features(tiny_corpus_dir / "audio" / "paired" / f"{first}.dmf")
    assert frames.shape == (len(tokens) * tiny_spec.frames_per_token, 160)
    assert set(manifest["labels"][str(first)]) == {"parity", "mean_id", "speaker"}


def test_manifest_stats_cover_training_audio_only(tiny_corpus_dir):
    manifest = read_manifest(tiny_corpus_dir)
    frames = [read_features(tiny_corpus_dir / "audio" / split / f"{i}.dmf")
              for split in ("paired", "unpaired_audio") for i in manifest["splits"][split]["ids"]]
    expected = feature_stats(frames)
    np.testing.assert_allclose(manifest["feature_stats"]["mean"], expected["mean"])
    np.testing.assert_allclose(manifest["feature_stats"]["std"], expected["std"])
    with_test = feature_stats(frames + [read_features(tiny_corpus_dir / "audio" / "test" / f"{i}.dmf")
                                        for i in manifest["splits"]["test"]["ids"]])
    assert not np.allclose(manifest["feature_stats"]["mean"], with_test["mean"])


def test_generation_is_byte_deterministic(tmp_path, tiny_spec):
    a = generate(tiny_spec, tmp_path / "a")
    b = generate(tiny_spec, tmp_path / "b")
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    assert files == sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    for rel in files:
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel


def test_noise_free_generation_is_deterministic(tmp_path):
    spec = SynthSpec(vocab_size=6, noise=0.0, min_len=2, max_len=3, n_paired=3, n_unpaired_text=2,
                     n_unpaired_audio=2, n_test=1, label_rules=("parity",))
    a = generate(spec, tmp_path / "a")
    b = generate(spec, tmp_path / "b")
    assert (a / "audio" / "paired" / "0.dmf").read_bytes() == (b / "audio" / "paired" / "0.dmf").read_bytes()


def test_read_manifest_checks_format(tmp_path):
    write_json(tmp_path / "manifest.json", {"format": "something-else"})
    with pytest.raises(FormatError):
        read_manifest(tmp_path)


class TestFidelityOracle:
    def truth(self, corpus_dir, table):
        manifest = read_manifest(corpus_dir)
        symbol_ids = {s: i + 2 for i, s in enumerate(manifest["vocab"])}
        translations = {}
        for i in manifest["splits"]["unpaired_text"]["ids"]:
            translations[(i, "audio")] = read_features(corpus_dir / "hidden" / "audio" / f"{i}.dmf")
        for i in manifest["splits"]["unpaired_audio"]["ids"]:
            ids = [symbol_ids[s] for s in manifest["hidden"]["text"][str(i)].split()]
            translations[(i, "text")] = table[ids]
        return translations

    def test_ground_truth_scores_perfectly(self, tiny_corpus_dir, rng):
        table = rng.normal(size=(10, 16))
        report = fidelity_oracle(self.truth(tiny_corpus_dir, table), tiny_corpus_dir, table)
        assert report["audio_l1"] == 0.0
        assert report["text_cosine"] == pytest.approx(1.0)
        assert report["text_accuracy"] == 1.0
        assert report["audio_examples"] == 5 and report["text_examples"] == 5

    def test_zero_translation_matches_helper(self, tiny_corpus_dir, rng):
        truth = self.truth(tiny_corpus_dir, rng.normal(size=(10, 16)))
        zeros = {k: np.zeros_like(v) for k, v in truth.items() if k[1] == "audio"}
        report = fidelity_oracle(zeros, tiny_corpus_dir)
        assert report["audio_l1"] == pytest.approx(zero_translation_l1(tiny_corpus_dir), rel=1e-6)
        assert report["text_cosine"] is None

    def test_unknown_example(self, tiny_corpus_dir):
        with pytest.raises(ContractError, match="hidden"):
            fidelity_oracle({(0, "audio"): np.zeros((2, 160))}, tiny_corpus_dir)


def test_zero_translation_of_empty_split(tmp_path):
    spec = SynthSpec(vocab_size=6, min_len=2, max_len=3, n_paired=2, n_unpaired_text=0, n_unpaired_audio=1,
                     n_test=0, label_rules=("parity",))
    assert math.isnan(zero_translation_l1(generate(spec, tmp_path / "c")))
