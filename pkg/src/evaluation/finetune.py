"""
Downstream fine-tuning over h_fuse = [MP(H_w); MP(H_a)].

    classify   linear 2d -> C, cross-entropy           -> WA / UA
    regress    linear 2d -> 1, L1                      -> MAE / Corr
    speaker    2d -> d -> d dense layers + classifier  -> EER on cosine scores

The backbone is trained end to end with the head. Task-head parameters are
stored in the same DMC1 file under the `task.` prefix.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
from tqdm import tqdm

from src.config import FinetuneConfig, Modality, ModelConfig
from src.errors import ContractError
from src.evaluation.metrics import metrics_classification, metrics_eer, metrics_regression, score_pair
from src.model.checkpoint import check_model_config, load_checkpoint, load_model, save_checkpoint
from src.model.transformer import DualTransformer, create_model
from src.nn import functional as F
from src.nn.modules import Linear, Module
from src.nn.tensor import Tensor, no_grad
from src.training.corruption import Purpose, stream
from src.training.optim import Adam, clip_grad_norm, lr_schedule, warmup_steps_for
from src.utils.corpus import Example, load_corpus
from src.utils.storage import JsonlWriter, write_json

logger = logging.getLogger(__name__)

DEFAULT_LABELS = {"classify": "parity", "regress": "mean_id", "speaker": "speaker"}
RESULT_KEYS = ("wa", "ua", "mae", "corr", "eer")


def masked_mean(hidden: Tensor, pad_mask: np.ndarray | None = None) -> Tensor:
    """Mean over the non-padded rows of a T x d tensor, as a 1 x d tensor."""
    length = hidden.shape[0]
    real = np.ones(length, dtype=bool) if pad_mask is None else ~np.asarray(pad_mask, dtype=bool)
    if real.shape != (length,):
        raise ContractError(f"pad mask {real.shape} does not match {length} positions")
    if not real.any():
        raise ContractError("cannot pool a fully padded sequence")
    weights = np.where(real, 1.0 / real.sum(), 0.0)[None, :].astype(hidden.dtype)
    return Tensor(weights) @ hidden


def fuse(h_text: Tensor, h_audio: Tensor, text_pad_mask: np.ndarray | None = None,
         audio_pad_mask: np.ndarray | None = None, use_text: bool = True, use_audio: bool = True) -> Tensor:
    """1 x 2d fused representation, text half first; a disabled half is all zeros."""
    halves = []
    for h, mask, used in ((h_text, text_pad_mask, use_text), (h_audio, audio_pad_mask, use_audio)):
        pooled = masked_mean(h, mask)
        halves.append(pooled if used else Tensor(np.zeros(pooled.shape, dtype=pooled.dtype)))
    return F.concat(halves, axis=1)


def encode_pair(model: DualTransformer, example: Example, representation: str = "cross") -> tuple[Tensor, Tensor]:
    """(H_w, H_a): cross-modal encoder outputs, or unimodal ones for the late-fusion baseline."""
    text, audio = example.values(Modality.TEXT), example.values(Modality.AUDIO)
    uni_text = model.unimodal_encode(Modality.TEXT, model.embed_text(text))
    uni_audio = model.unimodal_encode(Modality.AUDIO, model.embed_audio(audio))
    if representation == "unimodal":
        return uni_text, uni_audio
    h_text = model.cross_modal_encode(Modality.TEXT, model.embed_text(text), uni_audio)
    h_audio = model.cross_modal_encode(Modality.AUDIO, model.embed_audio(audio), uni_text)
    return h_text, h_audio


class ClassifierHead(Module):
    def __init__(self, rng: np.random.Generator, d: int, n_outputs: int, std: float):
        self.out = Linear(rng, 2 * d, n_outputs, std)

    def __call__(self, fused: Tensor) -> Tensor:
        return self.out(fused)


class SpeakerHead(Module):
    """Two dense layers then a speaker classifier; the second dense output is the embedding."""

    def __init__(self, rng: np.random.Generator, d: int, n_outputs: int, std: float):
        self.dense1 = Linear(rng, 2 * d, d, std)
        self.dense2 = Linear(rng, d, d, std)
        self.classifier = Linear(rng, d, n_outputs, std)

    def embed(self, fused: Tensor) -> Tensor:
        return self.dense2(F.gelu(self.dense1(fused)))

    def __call__(self, fused: Tensor) -> Tensor:
        return self.classifier(F.gelu(self.embed(fused)))


class TaskModel(Module):
    """Backbone plus task head; head parameters are named `task.*`."""

    def __init__(self, backbone: DualTransformer, task: str, n_outputs: int, representation: str = "cross",
                 use_text: bool = True, use_audio: bool = True, seed: int = 0):
        cfg = backbone.config
        rng = np.random.default_rng([seed, 1])
        self._backbone = backbone
        self._task = task
        self._n_outputs = n_outputs
        self._representation = representation
        self._use = (use_text, use_audio)
        if task == "speaker":
            self._head = SpeakerHead(rng, cfg.d, n_outputs, cfg.init_std)
        else:
            self._head = ClassifierHead(rng, cfg.d, 1 if task == "regress" else n_outputs, cfg.init_std)

    @property
    def backbone(self) -> DualTransformer:
        return self._backbone

    @property
    def task(self) -> str:
        return self._task

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        yield from self._backbone.named_parameters(prefix)
        yield from self._head.named_parameters(prefix + "task.")

    def metadata(self) -> dict:
        return {"task": self._task, "n_outputs": self._n_outputs, "representation": self._representation,
                "use_text_outputs": self._use[0], "use_audio_outputs": self._use[1]}

    def fused(self, example: Example) -> Tensor:
        h_text, h_audio = encode_pair(self._backbone, example, self._representation)
        return fuse(h_text, h_audio, use_text=self._use[0], use_audio=self._use[1])

    def __call__(self, example: Example) -> Tensor:
        return self._head(self.fused(example))

    def loss(self, example: Example, label) -> Tensor:
        out = self(example)
        if self._task == "regress":
            return F.l1_loss(out, np.array([[label]], dtype=out.dtype))
        if not 0 <= int(label) < self._n_outputs:
            raise ContractError(f"label {label} of example {example.example_id} outside [0, {self._n_outputs})")
        return F.cross_entropy(out, np.array([int(label)]))

    def predict(self, example: Example) -> float | int:
        with no_grad():
            out = self(example).numpy()[0]
        return float(out[0]) if self._task == "regress" else int(np.argmax(out))

    def speaker_embed(self, example: Example) -> np.ndarray:
        if self._task != "speaker":
            raise ContractError(f"speaker embeddings need a speaker checkpoint, this one is {self._task!r}")
        with no_grad():
            return self._head.embed(self.fused(example)).numpy()[0].copy()


def save_task_model(path: str | Path, model: TaskModel) -> Path:
    return save_checkpoint(path, model, model.backbone.config, extra={"task": model.metadata()})


def load_task_model(path: str | Path, expected: ModelConfig | None = None) -> TaskModel:
    backbone, meta = load_model(path)
    if expected is not None:
        check_model_config(meta, expected, str(path))
    if "task" not in meta:
        raise ContractError(f"{path} is not a fine-tuned checkpoint (no task metadata)")
    task = meta["task"]
    model = TaskModel(backbone, task["task"], task["n_outputs"], task["representation"],
                      task["use_text_outputs"], task["use_audio_outputs"])
    load_checkpoint(path, model)
    return model


def speaker_embed(example: Example, checkpoint: str | Path | TaskModel) -> np.ndarray:
    model = checkpoint if isinstance(checkpoint, TaskModel) else load_task_model(checkpoint)
    return model.speaker_embed(example)


def _labels(examples: list[Example], label: str) -> list:
    return [ex.label(label) for ex in examples]


def _n_outputs(task: str, labels: list) -> int:
    if task == "regress":
        return 1
    if any(not float(v).is_integer() for v in labels):
        raise ContractError(f"task {task!r} needs integer class labels; got e.g. {labels[0]!r}")
    values = [int(v) for v in labels]
    if min(values) < 0:
        raise ContractError(f"{task} labels must be non-negative class ids")
    return max(values) + 1


def verification_trials(labels: list, max_trials: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    """All cross pairs i < j, subsampled to `max_trials` with `rng` when there are more."""
    pairs = [(i, j) for i in range(len(labels)) for j in range(i + 1, len(labels))]
    if len(pairs) > max_trials:
        keep = np.sort(rng.choice(len(pairs), size=max_trials, replace=False))
        pairs = [pairs[k] for k in keep]
    return pairs


def evaluate_model(model: TaskModel, examples: list[Example], label: str, max_trials: int = 2000,
                   seed: int = 0) -> dict:
    """Results dict with keys wa, ua, mae, corr, eer; metrics that do not apply are None."""
    if not examples:
        raise ContractError("evaluation split is empty")
    results: dict = {key: None for key in RESULT_KEYS}
    labels = _labels(examples, label)
    if model.task == "classify":
        results["wa"], results["ua"] = metrics_classification([model.predict(ex) for ex in examples], labels)
    elif model.task == "regress":
        results["mae"], results["corr"] = metrics_regression([model.predict(ex) for ex in examples], labels)
    else:
        embeddings = [model.speaker_embed(ex) for ex in examples]
        trials = verification_trials(labels, max_trials, stream(seed, Purpose.TRIALS))
        scores = [score_pair(embeddings[i], embeddings[j]) for i, j in trials]
        same = [labels[i] == labels[j] for i, j in trials]
        results["eer"] = metrics_eer(scores, same)
        results["trials"] = len(trials)
    results["examples"] = len(examples)
    return results


def evaluate(checkpoint: str | Path, corpus_dir: str | Path, split: str = "test", label: str | None = None,
             max_trials: int = 2000, seed: int = 0, expected: ModelConfig | None = None) -> dict:
    model = load_task_model(checkpoint, expected)
    corpus = load_corpus(corpus_dir, splits=(split,))
    return evaluate_model(model, corpus.split(split), label or DEFAULT_LABELS[model.task], max_trials, seed)


@dataclass
class FinetuneResult:
    checkpoint: Path
    results: dict


def finetune(config: FinetuneConfig) -> FinetuneResult:
    """Train backbone and task head end to end, then evaluate on the eval split."""
    out = Path(config.output_dir)
    label = config.label or DEFAULT_LABELS[config.task]
    corpus = load_corpus(config.corpus_dir, splits=tuple(dict.fromkeys((config.train_split, config.eval_split))))
    train = corpus.split(config.train_split)
    if not train:
        raise ContractError(f"training split {config.train_split!r} is empty")
    for ex in train:
        if not ex.is_paired:
            raise ContractError(f"fine-tuning needs paired examples; example {ex.example_id} is not")
    corpus.check_fits(config.model.max_text_len, config.model.max_audio_len, config.model.vocab_size)

    if config.pretrained_checkpoint is not None:
        backbone, meta = load_model(config.pretrained_checkpoint)
        check_model_config(meta, config.model, config.pretrained_checkpoint)
    else:
        logger.info("no pretrained checkpoint: fine-tuning from a seeded random init")
        backbone = create_model(config.model, config.seed)
    labels = _labels(train, label)
    model = TaskModel(backbone, config.task, _n_outputs(config.task, labels), config.representation,
                      config.use_text_outputs, config.use_audio_outputs, config.seed)

    named = list(model.named_parameters())
    optimizer = Adam(named)
    params = [p for _, p in named]
    n_batches = math.ceil(len(train) / config.batch_size)
    total = config.epochs * n_batches
    warmup = warmup_steps_for(total, config.warmup_fraction)
    log = JsonlWriter(out / "finetune_metrics.jsonl")
    step = 0
    for epoch in range(1, config.epochs + 1):
        order = stream(config.seed, Purpose.FINETUNE_SHUFFLE, 0, epoch).permutation(len(train))
        epoch_losses = []
        for b in tqdm(range(n_batches), desc=f"finetune {epoch}", disable=not config.show_progress, leave=False):
            batch = [train[i] for i in order[b * config.batch_size : (b + 1) * config.batch_size]]
            losses = [model.loss(ex, ex.label(label)) for ex in batch]
            loss = losses[0]
            for extra in losses[1:]:
                loss = loss + extra
            loss = loss * (1.0 / len(losses))
            optimizer.zero_grad()
            loss.backward()
            norm = clip_grad_norm(params, config.grad_clip)
            step += 1
            lr = lr_schedule(step, total, warmup, config.learning_rate)
            optimizer.step(lr)
            epoch_losses.append(loss.item())
            log.write({"kind": "step", "epoch": epoch, "step": step, "lr": lr, "grad_norm": norm,
                       "loss": epoch_losses[-1]})
        log.write({"kind": "epoch", "epoch": epoch, "step": step, "loss": float(np.mean(epoch_losses))})
        logger.info("fine-tune epoch %d/%d: loss %.4f", epoch, config.epochs, np.mean(epoch_losses))

    checkpoint = save_task_model(out / "checkpoints" / f"finetune_{config.task}.dmc", model)
    results = evaluate_model(model, corpus.split(config.eval_split), label, config.max_trials, config.seed)
    write_json(out / "results.json", results)
    return FinetuneResult(checkpoint=checkpoint, results=results)
