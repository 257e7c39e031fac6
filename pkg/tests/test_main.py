import json

import numpy as np
import pytest
from scipy.io import wavfile

from conftest import TINY_SYNTH
from src.evaluation.finetune import TaskModel, save_task_model
from src.main import main
from src.model.transformer import create_model
from src.utils.storage import read_json


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr().out.strip().splitlines()
    return code, json.loads(out[-1])


def write_config(tmp_path, name, data):
    path = tmp_path / name
    path.write_text(json.dumps(data))
    return str(path)


def test_unknown_flag_is_a_usage_error(capsys):
    code, payload = run(capsys, "pretrain", "--no-such-flag")
    assert code == 1
    assert payload["status"] == "error"


def test_missing_command(capsys):
    code, _ = run(capsys)
    assert code == 1


def test_bad_config_value_exits_1(capsys):
    code, payload = run(capsys, "pretrain", "--set", "mode=everything")
    assert code == 1
    assert payload["error_type"] == "ConfigError"


def test_synth_gen_reports_splits(capsys, tmp_path):
    config = write_config(tmp_path, "synth.json", TINY_SYNTH)
    code, payload = run(capsys, "synth-gen", "--config", config, "--output", str(tmp_path / "corpus"))
    assert code == 0
    assert payload["status"] == "ok" and payload["command"] == "synth-gen"
    assert payload["splits"] == {"paired": 6, "unpaired_text": 5, "unpaired_audio": 5, "test": 6}
    assert read_json(tmp_path / "corpus" / "effective_config.json")["vocab_size"] == 8


def test_featurize_writes_dmf_and_stats(capsys, tmp_path):
    wavs = tmp_path / "wavs"
    wavs.mkdir()
    rng = np.random.default_rng(0)
    for name in ("a", "b"):
        wavfile.write(wavs / f"{name}.wav", 16000, (rng.uniform(-0.3, 0.3, 16000) * 32767).astype(np.int16))
    out = tmp_path / "feats"
    code, payload = run(capsys, "featurize", "--input-dir", str(wavs), "--output-dir", str(out))
    assert code == 0
    assert payload["files"] == 2 and payload["frames"] == 154
    assert (out / "a.dmf").exists() and (out / "b.dmf").exists()
    assert len(read_json(out / "feature_stats.json")["mean"]) == 160


def test_featurize_empty_directory_exits_2(capsys, tmp_path):
    code, payload = run(capsys, "featurize", "--input-dir", str(tmp_path), "--output-dir", str(tmp_path / "o"))
    assert code == 2
    assert payload["error_type"] == "ContractError"


def test_evaluate_with_a_mismatched_checkpoint_exits_2(capsys, tmp_path, tiny_corpus_dir, tiny_model_config):
    ckpt = save_task_model(tmp_path / "task.dmc", TaskModel(create_model(tiny_model_config), "classify", 2))
    config = write_config(tmp_path, "ft.json", {"corpus_dir": str(tiny_corpus_dir), "output_dir": str(tmp_path),
                                                "model": {**tiny_model_config.to_dict(), "d": 32}})
    code, payload = run(capsys, "evaluate", "--config", config, "--checkpoint", str(ckpt))
    assert code == 2
    assert payload["error_type"] == "CheckpointMismatchError"
    assert "model.d" in payload["error"]


def test_evaluate_writes_results(capsys, tmp_path, tiny_corpus_dir, tiny_model_config):
    ckpt = save_task_model(tmp_path / "task.dmc", TaskModel(create_model(tiny_model_config), "classify", 2))
    config = write_config(tmp_path, "ft.json", {"corpus_dir": str(tiny_corpus_dir), "output_dir": str(tmp_path),
                                                "model": tiny_model_config.to_dict()})
    code, payload = run(capsys, "evaluate", "--config", config, "--checkpoint", str(ckpt))
    assert code == 0
    assert payload["results"]["examples"] == 6
    assert read_json(tmp_path / "results.json") == payload["results"]


def test_inspect_checkpoint(capsys, tmp_path, tiny_model_config):
    ckpt = save_task_model(tmp_path / "task.dmc", TaskModel(create_model(tiny_model_config), "regress", 1))
    code, payload = run(capsys, "inspect-checkpoint", "--checkpoint", str(ckpt))
    assert code == 0
    assert payload["metadata"]["task"]["task"] == "regress"
    groups = {p["group"] for p in payload["parameters"]}
    assert groups == {"embeddings", "uni_text", "uni_audio", "cross_text", "cross_audio", "heads", "task"}
    assert set(payload["digests"]) == groups


def test_corrupt_dump(capsys, tmp_path, tiny_train_config):
    config = write_config(tmp_path, "train.json", tiny_train_config.to_dict())
    dump = tmp_path / "dump" / "records.jsonl"
    code, payload = run(capsys, "corrupt-dump", "--config", config, "--output", str(dump), "--limit", "2")
    assert code == 0
    rows = [json.loads(line) for line in dump.read_text().splitlines()]
    # two paired examples give two rows each, the unpaired splits one each
    assert len(rows) == 2 * 2 + 2 + 2
    assert payload["summary"]["records"] == len(rows)
    assert all(len(r["indices"]) >= 1 for r in rows)


def test_pretrain_then_translate(capsys, tmp_path, tiny_train_config, tiny_corpus_dir):
    config = write_config(tmp_path, "train.json", tiny_train_config.to_dict())
    code, payload = run(capsys, "pretrain", "--config", config, "--set", "epochs=1")
    assert code == 0
    assert payload["epochs_completed"] == 1
    unpaired_audio_id = read_json(tiny_corpus_dir / "manifest.json")["splits"]["unpaired_audio"]["ids"][0]
    code, report = run(capsys, "translate", "--checkpoint", payload["checkpoint"], "--store", payload["store"],
                       "--example-id", str(unpaired_audio_id), "--corpus", str(tiny_corpus_dir))
    assert code == 0
    assert len(report["text"]["token_ids"]) == tiny_train_config.text_cap
    assert len(report["text"]["decoded"].split()) == tiny_train_config.text_cap
    assert report["fidelity"]["text_examples"] == 1
    assert "audio" not in report


def test_translate_unknown_example(capsys, tmp_path, tiny_train_config):
    config = write_config(tmp_path, "train.json", tiny_train_config.to_dict())
    _, payload = run(capsys, "pretrain", "--config", config, "--set", "epochs=1")
    code, report = run(capsys, "translate", "--checkpoint", payload["checkpoint"], "--store", payload["store"],
                       "--example-id", "9999")
    assert code == 2
    assert "9999" in report["error"]


@pytest.mark.slow
def test_desk_scale_pipeline(capsys, tmp_path):
    """Synthetic corpus at default size, pre-training, then classification fine-tuning."""
    corpus = tmp_path / "corpus"
    assert run(capsys, "synth-gen", "--output", str(corpus))[0] == 0
    train = write_config(tmp_path, "train.json", {"corpus_dir": str(corpus), "output_dir": str(tmp_path / "pre"),
                                                   "epochs": 3, "warmup_epochs": 2, "show_progress": False})
    code, pre = run(capsys, "pretrain", "--config", train)
    assert code == 0
    ft = write_config(tmp_path, "ft.json", {"corpus_dir": str(corpus), "output_dir": str(tmp_path / "ft"),
                                            "pretrained_checkpoint": pre["checkpoint"], "epochs": 3,
                                            "show_progress": False})
    code, result = run(capsys, "finetune", "--config", ft)
    assert code == 0
    assert result["results"]["wa"] is not None
