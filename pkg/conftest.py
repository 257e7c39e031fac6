import numpy as np
import pytest

from src.config import CorruptionPolicy, FinetuneConfig, ModelConfig, TrainConfig
from src.training.trainer import run_pretraining
from src.utils.corpus import load_corpus
from src.utils.dataset import SynthSpec, generate


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: acceptance-scale training runs (minutes of CPU)")


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run tests marked slow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


TINY_SYNTH = dict(
    vocab_size=8,
    frames_per_token=2,
    noise=0.05,
    min_len=3,
    max_len=5,
    n_paired=6,
    n_unpaired_text=5,
    n_unpaired_audio=5,
    n_test=6,
    n_speakers=2,
    seed=0,
)


@pytest.fixture
def tiny_model_config() -> ModelConfig:
    return ModelConfig(d=16, n_heads=2, n_uni_layers=1, n_cross_layers=1, vocab_size=10,
                       max_text_len=8, max_audio_len=16)


@pytest.fixture
def tiny_spec() -> SynthSpec:
    return SynthSpec(**TINY_SYNTH)


@pytest.fixture
def tiny_corpus_dir(tmp_path, tiny_spec):
    return generate(tiny_spec, tmp_path / "corpus")


@pytest.fixture
def tiny_corpus(tiny_corpus_dir):
    return load_corpus(tiny_corpus_dir)


@pytest.fixture
def tiny_train_config(tmp_path, tiny_corpus_dir, tiny_model_config) -> TrainConfig:
    return TrainConfig(
        corpus_dir=str(tiny_corpus_dir),
        output_dir=str(tmp_path / "run"),
        epochs=2,
        warmup_epochs=1,
        batch_size=4,
        seed=0,
        model=tiny_model_config,
        idae_corruption=CorruptionPolicy.idae(segment_len_range=(2, 4), min_selected=1),
        cdae_corruption=CorruptionPolicy.cdae(segment_len_range=(2, 4), min_selected=1),
        text_cap=6,
        audio_cap=12,
        show_progress=False,
    )


@pytest.fixture
def tiny_finetune_config(tmp_path, tiny_corpus_dir, tiny_model_config) -> FinetuneConfig:
    return FinetuneConfig(
        task="classify",
        corpus_dir=str(tiny_corpus_dir),
        output_dir=str(tmp_path / "finetune"),
        model=tiny_model_config,
        epochs=2,
        batch_size=3,
        max_trials=50,
        show_progress=False,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_SEEDS = (0, 1, 2)


@pytest.fixture(scope="session")
def acceptance_runs(tmp_path_factory):
    """Default-size synthetic corpus and default-config pre-training for each seed,
    with refreshed (full) and regenerated (no_idp) translations. Built once per session."""
    runs = {}
    for seed in ACCEPTANCE_SEEDS:
        root = tmp_path_factory.mktemp(f"acceptance_{seed}")
        corpus = generate(SynthSpec(seed=seed), root / "corpus")
        for mode in ("full", "no_idp"):
            config = TrainConfig(corpus_dir=str(corpus), output_dir=str(root / mode), seed=seed, mode=mode,
                                 show_progress=False)
            runs[seed, mode] = (config, run_pretraining(config))
    return runs
