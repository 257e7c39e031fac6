"""
Command-line entry point.

Usage:
    python -m src.main synth-gen --config synth.json
    python -m src.main featurize --input-dir wavs/ --output-dir corpus/audio/paired
    python -m src.main pretrain --config train.json --set epochs=3 --set model.d=32
    python -m src.main finetune --config finetune.json
    python -m src.main evaluate --config finetune.json --checkpoint out/checkpoints/finetune_classify.dmc
    python -m src.main translate --checkpoint ckpt.dmc --store store.dms --example-id 200 --corpus data/synth
    python -m src.main corrupt-dump --config train.json --output dump.jsonl
    python -m src.main inspect-checkpoint --checkpoint ckpt.dmc

stdout carries one JSON object per run ({"status": "ok", ...} or
{"status": "error", ...}); diagnostics go to stderr. Exit codes: 0 ok,
1 usage/config error, 2 data/format/contract error, 3 numerical abort.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from src.audio.features import featurize_wav
from src.config import PRESETS, FinetuneConfig, Modality, TrainConfig, load_config, write_effective_config
from src.errors import ContractError, DuomodalError, UsageError
from src.evaluation.finetune import evaluate, finetune
from src.evaluation.metrics import nearest_tokens
from src.model.checkpoint import load_model, sidecar_path, tensor_digests
from src.model.transformer import group_of
from src.training.corruption import Purpose, corrupt, stream, summarize_records
from src.training.idp import PseudoParallelStore
from src.training.trainer import run_pretraining
from src.utils.corpus import FEATURE_STATS, UNPAIRED_SPLITS, Tokenizer, feature_stats, load_corpus
from src.utils.dataset import SynthSpec, fidelity_oracle, generate, read_manifest
from src.utils.storage import JsonlWriter, read_json, read_tensors, write_features, write_json

logger = logging.getLogger("src.main")


class ArgumentParser(argparse.ArgumentParser):
    """argparse that raises UsageError (exit 1) instead of exiting with 2."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def cmd_synth_gen(args) -> dict:
    spec = load_config(args.config, SynthSpec, args.set)
    root = generate(spec, args.output)
    write_effective_config(spec, root)
    manifest = read_json(root / "manifest.json")
    return {"corpus_dir": str(root), "splits": {k: len(v["ids"]) for k, v in manifest["splits"].items()}}


def cmd_featurize(args) -> dict:
    wavs = sorted(Path(args.input_dir).glob("*.wav"))
    if not wavs:
        raise ContractError(f"no .wav files in {args.input_dir}")
    out = Path(args.output_dir)
    matrices = []
    for wav in wavs:
        features = featurize_wav(wav)
        write_features(out / f"{wav.stem}.dmf", features)
        matrices.append(features)
    write_json(out / FEATURE_STATS, feature_stats(matrices))
    write_json(out / "effective_config.json", {"input_dir": args.input_dir, "output_dir": args.output_dir})
    return {"files": len(wavs), "frames": int(sum(len(m) for m in matrices)), "output_dir": str(out)}


def cmd_pretrain(args) -> dict:
    config = load_config(args.config, TrainConfig, args.set, preset=args.preset)
    write_effective_config(config, config.output_dir)
    result = run_pretraining(config)
    return {"checkpoint": str(result.checkpoint), "store": None if result.store is None else str(result.store),
            "epochs_completed": result.epochs_completed, "global_step": result.global_step}


def cmd_finetune(args) -> dict:
    config = load_config(args.config, FinetuneConfig, args.set)
    write_effective_config(config, config.output_dir)
    result = finetune(config)
    return {"checkpoint": str(result.checkpoint), "results": result.results}


def cmd_evaluate(args) -> dict:
    config = load_config(args.config, FinetuneConfig, args.set)
    results = evaluate(args.checkpoint, config.corpus_dir, split=args.split or config.eval_split, label=config.label,
                       max_trials=config.max_trials, seed=config.seed, expected=config.model)
    output = Path(args.output) if args.output else Path(config.output_dir) / "results.json"
    write_json(output, results)
    write_effective_config(config, output.parent)
    return {"results": results, "output": str(output)}


def cmd_translate(args) -> dict:
    model, _ = load_model(args.checkpoint)
    store = PseudoParallelStore.load(args.store, text_width=model.config.d)
    entries = {m.value: store.entries[(args.example_id, m)] for m in Modality if (args.example_id, m) in store.entries}
    if not entries:
        raise ContractError(f"store {args.store} has no translation for example {args.example_id}")
    report: dict = {"example_id": args.example_id, "iteration": store.iteration}
    manifest = read_manifest(args.corpus) if args.corpus else None
    if "text" in entries:
        ids = nearest_tokens(entries["text"], model.text_embed.token.data)
        report["text"] = {"token_ids": ids.tolist()}
        if manifest:
            report["text"]["decoded"] = " ".join(Tokenizer(manifest["vocab"]).decode(ids))
    if "audio" in entries:
        a = entries["audio"]
        report["audio"] = {"frames": int(a.shape[0]), "mean": float(a.mean()), "std": float(a.std()),
                           "min": float(a.min()), "max": float(a.max()),
                           "frame_energy": np.abs(a).mean(axis=1).round(4).tolist()}
    unpaired = {int(i) for split in UNPAIRED_SPLITS for i in manifest["splits"][split]["ids"]} if manifest else set()
    if args.example_id in unpaired:
        report["fidelity"] = fidelity_oracle(store.oracle_view([args.example_id]), args.corpus,
                                             model.text_embed.token.data, manifest.get("feature_stats"))
    return report


def cmd_corrupt_dump(args) -> dict:
    config = load_config(args.config, TrainConfig, args.set)
    policy = config.idae_corruption if args.stage == "idae" else config.cdae_corruption
    purposes = {
        ("idae", Modality.TEXT): Purpose.IDAE_TEXT, ("idae", Modality.AUDIO): Purpose.IDAE_AUDIO,
        ("cdae", Modality.TEXT): Purpose.CDAE_TEXT, ("cdae", Modality.AUDIO): Purpose.CDAE_AUDIO,
    }
    corpus = load_corpus(config.corpus_dir, splits=("paired", "unpaired_text", "unpaired_audio"))
    writer = JsonlWriter(args.output)
    records = []
    for examples in corpus.splits.values():
        for ex in examples[: args.limit]:
            for modality in Modality:
                values = ex.tokens if modality is Modality.TEXT else ex.features
                if values is None:
                    continue
                rng = stream(config.seed, purposes[args.stage, modality], ex.example_id, args.epoch)
                _, record = corrupt(modality, values, policy, rng, config.model.vocab_size)
                row = record.to_json(ex.example_id)
                writer.write(row)
                records.append(row)
    write_effective_config(config, Path(args.output).parent)
    return {"output": args.output, "summary": summarize_records(records)}


def cmd_inspect_checkpoint(args) -> dict:
    tensors = read_tensors(args.checkpoint)
    side = sidecar_path(args.checkpoint)
    return {
        "checkpoint": args.checkpoint,
        "metadata": read_json(side) if side.exists() else None,
        "parameters": [{"name": n, "shape": list(t.shape), "group": group_of(n)} for n, t in sorted(tensors.items())],
        "digests": tensor_digests(tensors),
    }


COMMANDS = {
    "synth-gen": cmd_synth_gen,
    "featurize": cmd_featurize,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "translate": cmd_translate,
    "corrupt-dump": cmd_corrupt_dump,
    "inspect-checkpoint": cmd_inspect_checkpoint,
}


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="duomodal", description="Low-resource audio-text pre-training")
    parser.add_argument("--verbose", action="store_true", help="Log at DEBUG level.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=ArgumentParser)

    def with_config(p, required=True):
        p.add_argument("--config", required=required, help="JSON config document.")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="Dotted override, e.g. model.d=32 (repeatable).")
        return p

    with_config(sub.add_parser("synth-gen", help="Generate a synthetic corpus."), required=False).add_argument(
        "--output", default=None, help="Corpus directory (overrides output_dir).")
    p = sub.add_parser("featurize", help="WAV files -> DMF1 feature files.")
    p.add_argument("--input-dir", required=True)
    p.add_argument("--output-dir", required=True)
    p = with_config(sub.add_parser("pretrain", help="Warm-up and iterative denoising pre-training."), required=False)
    p.add_argument("--preset", choices=sorted(PRESETS), default=None, help="Base sizes the config file is merged over.")
    with_config(sub.add_parser("finetune", help="Fine-tune a task head."), required=False)
    p = with_config(sub.add_parser("evaluate", help="Score a fine-tuned checkpoint."), required=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default=None)
    p.add_argument("--output", default=None, help="Results JSON path.")
    p = sub.add_parser("translate", help="Inspect stored translations of one example.")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--example-id", type=int, required=True)
    p.add_argument("--corpus", default=None, help="Corpus directory, for decoding token ids to symbols.")
    p = with_config(sub.add_parser("corrupt-dump", help="Dump corruption records as JSONL."), required=False)
    p.add_argument("--output", required=True)
    p.add_argument("--stage", choices=("idae", "cdae"), default="idae")
    p.add_argument("--epoch", type=int, default=1)
    p.add_argument("--limit", type=int, default=None, help="Examples per split.")
    p = sub.add_parser("inspect-checkpoint", help="List parameters and per-group digests.")
    p.add_argument("--checkpoint", required=True)
    return parser


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(json.dumps({"status": "error", "error": str(exc), "exit_code": exc.exit_code}))
        return exc.exit_code
    logging.basicConfig(stream=sys.stderr, level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        payload = COMMANDS[args.command](args)
    except DuomodalError as exc:
        logger.error("%s failed: %s", args.command, exc)
        print(json.dumps({"status": "error", "command": args.command, "error": str(exc),
                          "error_type": type(exc).__name__, "exit_code": exc.exit_code}))
        return exc.exit_code
    except OSError as exc:
        logger.error("%s failed: %s", args.command, exc)
        print(json.dumps({"status": "error", "command": args.command, "error": str(exc), "exit_code": 2}))
        return 2
    print(json.dumps({"status": "ok", "command": args.command, **payload}, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
