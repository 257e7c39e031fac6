"""
Pre-training driver.

    warm-up   T epochs of warm_loss on the paired corpus
    init      iteration-0 translations from masked queries
    epoch k   IDAE pass (unimodal scope) -> CDAE pass (all parameters,
              paired batches also train the refresh step)
              -> no-gradient refresh of every translation (tag k)

Outputs under `output_dir`: checkpoints/epoch_XXX.dmc (+ .json sidecar and
.optim.dmc), store/epoch_XXX.dms, metrics.jsonl, timing.jsonl and
trainer_state.json pointing at the latest checkpoint. The late_fusion mode
runs IDAE epochs only and writes no store.
"""

import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from tqdm import tqdm

from src.config import STORELESS_MODES, Modality, TrainConfig
from src.errors import ContractError, NumericalError, PipelineOrderError
from src.model.checkpoint import (
    check_model_config,
    load_checkpoint,
    parameter_digests,
    save_checkpoint,
    sidecar_path,
)
from src.model.transformer import DualTransformer, create_model, is_unimodal_scope
from src.nn.tensor import Tensor
from src.training.corruption import Purpose, stream
from src.training.idp import (
    PseudoParallelStore,
    init_translations,
    refresh_translations,
    regenerate_translations,
)
from src.training.objectives import (
    MODE_COMPONENTS,
    LossBundle,
    NoiseContext,
    cdae_paired_loss,
    cdae_unpaired_loss,
    idae_loss,
    refine_loss,
    total_loss,
    warm_loss,
)
from src.training.optim import Adam, clip_grad_norm, lr_schedule, warmup_steps_for
from src.utils.corpus import Corpus, Example, load_corpus
from src.utils.storage import JsonlWriter, read_json, read_tensors, write_json, write_tensors

logger = logging.getLogger(__name__)

CROSS_GROUPS = ("cross_text", "cross_audio")

# Shuffle stream ids within an epoch.
_IDAE_TEXT, _IDAE_AUDIO, _CDAE_PAIRED, _CDAE_TEXT, _CDAE_AUDIO = range(5)


def batches(examples: list[Example], batch_size: int, rng: np.random.Generator) -> list[list[Example]]:
    order = rng.permutation(len(examples))
    return [[examples[i] for i in order[s : s + batch_size]] for s in range(0, len(examples), batch_size)]


def zip_batches(first: list[list[Example]], second: list[list[Example]]) -> list[tuple[list, list]]:
    """Pair up two batch lists; the shorter one wraps around. An empty side stays empty."""
    n = max(len(first), len(second))
    return [
        (first[i % len(first)] if first else [], second[i % len(second)] if second else [])
        for i in range(n)
    ]


def interleave(first: list, second: list) -> list:
    """Merge two schedules so each is spread evenly; ties go to `first`."""
    keyed = [((i + 0.5) / len(first), 0, i) for i in range(len(first))]
    keyed += [((i + 0.5) / len(second), 1, i) for i in range(len(second))]
    keyed.sort()
    return [(first if side == 0 else second)[i] for _, side, i in keyed]


@dataclass
class PretrainResult:
    checkpoint: Path
    store: Path | None
    epochs_completed: int
    global_step: int


class Pretrainer:
    """Owns the model, optimizer, store and logs of one pre-training run."""

    def __init__(self, config: TrainConfig, corpus: Corpus | None = None, resuming: bool = False):
        self.config = config
        self.components = MODE_COMPONENTS[config.mode]
        self.out = Path(config.output_dir)
        self.corpus = corpus or self._load_corpus()
        self.corpus.check_fits(config.model.max_text_len, config.model.max_audio_len, config.model.vocab_size)

        self.keeps_store = config.mode not in STORELESS_MODES
        self.paired = [] if config.mode == "no_paired" else self.corpus.paired
        unpaired = config.mode != "paired_only"
        self.unpaired_text = self.corpus.unpaired_text if unpaired else []
        self.unpaired_audio = self.corpus.unpaired_audio if unpaired else []
        if self.keeps_store and config.mode != "no_paired" and not self.paired:
            raise ContractError(f"mode {config.mode!r} needs a non-empty paired corpus")
        self._paired_by_id = {ex.example_id: ex for ex in self.paired}
        self.refines = "refine" in self.components and config.refine_paired

        self.model: DualTransformer = create_model(config.model, config.seed)
        self.optimizer = Adam(self.model.named_parameters(), config.adam_betas, config.adam_eps)
        self.store: PseudoParallelStore | None = None
        self.resumed = False
        self.global_step = 0
        self.epoch = 0
        self.total_steps = self._count_steps()
        self.warmup_steps = warmup_steps_for(self.total_steps, config.warmup_fraction)
        self.metrics = JsonlWriter(self.out / "metrics.jsonl", append=resuming)
        self.timing = JsonlWriter(self.out / "timing.jsonl", append=resuming)

    def _load_corpus(self) -> Corpus:
        cfg = self.config
        return load_corpus(cfg.corpus_dir, splits=("paired", "unpaired_text", "unpaired_audio"),
                           unpaired_fraction=cfg.unpaired_fraction, rng=stream(cfg.seed, Purpose.SUBSAMPLE))

    # -- schedule accounting ------------------------------------------------------

    def _n_batches(self, n: int) -> int:
        return math.ceil(n / self.config.batch_size)

    def _warms_up(self) -> bool:
        return self.keeps_store and self.config.mode != "no_paired"

    def warmup_step_count(self) -> int:
        if not self._warms_up():
            return 0
        return self.config.warmup_epochs * self._n_batches(len(self.paired))

    def epoch_step_count(self) -> int:
        steps = 0
        if "idae" in self.components:
            steps += max(self._n_batches(len(self.paired) + len(self.unpaired_text)),
                         self._n_batches(len(self.paired) + len(self.unpaired_audio)))
        if "cdae_paired" in self.components:
            steps += self._n_batches(len(self.paired))
        if "cdae_unpaired" in self.components:
            steps += max(self._n_batches(len(self.unpaired_text)), self._n_batches(len(self.unpaired_audio)))
        return steps

    def _count_steps(self) -> int:
        return max(1, self.warmup_step_count() + self.config.epochs * self.epoch_step_count())

    # -- one optimizer step ---------------------------------------------------------

    def _update(self, loss: Tensor, include: Callable[[str], bool] | None = None) -> dict:
        value = loss.item()
        if not math.isfinite(value):
            raise NumericalError(f"loss is {value} at step {self.global_step + 1}")
        self.optimizer.zero_grad()
        loss.backward()
        params = [p for name, p in self.model.named_parameters() if include is None or include(name)]
        norm = clip_grad_norm(params, self.config.grad_clip)
        self.global_step += 1
        lr = lr_schedule(min(self.global_step, self.total_steps), self.total_steps, self.warmup_steps,
                         self.config.learning_rate)
        self.optimizer.step(lr, include)
        return {"lr": lr, "grad_norm": norm}

    def _log_step(self, phase: str, bundle: LossBundle, info: dict) -> None:
        self.metrics.write({"kind": "step", "phase": phase, "epoch": self.epoch, "step": self.global_step,
                            **info, **bundle.as_record()})

    def _progress(self, items, desc: str):
        return tqdm(items, desc=desc, disable=not self.config.show_progress, leave=False)

    # -- warm-up ------------------------------------------------------------------------

    def run_warmup(self) -> DualTransformer:
        """T epochs minimizing the warm-up translation loss over paired batches."""
        if not self._warms_up():
            logger.info("mode %s: skipping warm-up", self.config.mode)
            return self.model
        for w in range(1, self.config.warmup_epochs + 1):
            started = time.perf_counter()
            losses = []
            for batch in self._progress(batches(self.paired, self.config.batch_size,
                                                stream(self.config.seed, Purpose.WARMUP_SHUFFLE, 0, w)),
                                        f"warm-up {w}"):
                loss, parts = warm_loss(self.model, batch)
                info = self._update(loss)
                bundle = LossBundle(**parts)
                self._log_step("warmup", bundle, info)
                losses.append(bundle.total)
            self.metrics.write({"kind": "epoch", "phase": "warmup", "epoch": w, "step": self.global_step,
                                "loss.total": float(np.mean(losses))})
            self.timing.write({"phase": "warmup", "epoch": w, "seconds": round(time.perf_counter() - started, 3)})
            logger.info("warm-up epoch %d/%d: loss %.4f", w, self.config.warmup_epochs, np.mean(losses))
        return self.model

    def init_store(self) -> PseudoParallelStore | None:
        cfg = self.config
        if not self.keeps_store:
            return None
        self.store = init_translations(self.model, self.unpaired_text, self.unpaired_audio, cfg.text_cap,
                                       cfg.audio_cap, paired=self.paired, progress=cfg.show_progress)
        return self.store

    # -- iterative denoising epochs ---------------------------------------------------------

    def _shuffle(self, examples: list[Example], slot: int) -> list[list[Example]]:
        return batches(examples, self.config.batch_size, stream(self.config.seed, Purpose.SHUFFLE, slot, self.epoch))

    def _noise(self) -> NoiseContext:
        return NoiseContext(self.config.seed, self.epoch, self.config.model.vocab_size,
                            self.config.loss_on_all_positions)

    def _expected_length(self, example_id: int, modality: Modality) -> int:
        if example_id in self._paired_by_id:
            return len(self._paired_by_id[example_id].values(modality))
        return self.config.text_cap if modality is Modality.TEXT else self.config.audio_cap

    def _cross_digests(self) -> dict[str, str]:
        digests = parameter_digests(self.model)
        return {g: digests[g] for g in CROSS_GROUPS}

    def idae_pass(self) -> list[float]:
        texts = self.paired + self.unpaired_text
        audios = self.paired + self.unpaired_audio
        schedule = zip_batches(self._shuffle(texts, _IDAE_TEXT), self._shuffle(audios, _IDAE_AUDIO))
        before = self._cross_digests()
        losses = []
        for text_batch, audio_batch in self._progress(schedule, f"idae {self.epoch}"):
            loss, parts = idae_loss(self.model, text_batch, audio_batch, self.config.idae_corruption, self._noise())
            info = self._update(loss, include=is_unimodal_scope)
            bundle = LossBundle(**parts)
            self._log_step("idae", bundle, info)
            losses.append(bundle.total)
        if self._cross_digests() != before:
            raise ContractError(f"cross-modal parameters changed during the IDAE pass of epoch {self.epoch}")
        return losses

    def cdae_pass(self) -> list[float]:
        cfg = self.config
        if not self.keeps_store:
            return []
        tag = self.epoch - 1
        translations = self.store.lookup(tag, self._expected_length)
        paired = [("cdae_paired", b) for b in self._shuffle(self.paired, _CDAE_PAIRED)] \
            if "cdae_paired" in self.components else []
        unpaired = [("cdae_unpaired", b) for b in zip_batches(self._shuffle(self.unpaired_text, _CDAE_TEXT),
                                                              self._shuffle(self.unpaired_audio, _CDAE_AUDIO))] \
            if "cdae_unpaired" in self.components else []
        losses = []
        for kind, batch in self._progress(interleave(paired, unpaired), f"cdae {self.epoch}"):
            components: dict[str, Tensor] = {}
            if kind == "cdae_paired":
                loss, parts = cdae_paired_loss(self.model, batch, translations, cfg.cdae_corruption, self._noise(),
                                               replace_prob=cfg.translation_noise_prob)
                if self.refines:
                    components["refine"], refine_parts = refine_loss(self.model, batch, translations)
                    parts.update(refine_parts)
            else:
                loss, parts = cdae_unpaired_loss(self.model, batch[0], batch[1], translations,
                                                 cfg.cdae_corruption, self._noise())
            components[kind] = loss
            info = self._update(total_loss(components, cfg.mode))
            bundle = LossBundle(**parts)
            self._log_step("cdae", bundle, info)
            losses.append(bundle.total)
        return losses

    def refresh(self) -> None:
        cfg = self.config
        if not self.keeps_store:
            return
        if self.store.iteration != self.epoch - 1:
            raise PipelineOrderError(f"store at iteration {self.store.iteration} before refresh of epoch {self.epoch}")
        if cfg.mode == "no_idp":
            regenerate_translations(self.model, self.store, self.unpaired_text, self.unpaired_audio, cfg.text_cap,
                                    cfg.audio_cap, paired=self.paired, progress=cfg.show_progress)
        else:
            refresh_translations(self.model, self.store, self.unpaired_text, self.unpaired_audio,
                                 paired=self.paired, progress=cfg.show_progress)

    def run_epoch(self) -> dict:
        self.epoch += 1
        started = time.perf_counter()
        record: dict = {"kind": "epoch", "phase": "pretrain", "epoch": self.epoch}
        if "idae" in self.components:
            record["loss.idae"] = float(np.mean(self.idae_pass()))
        cdae = self.cdae_pass()
        if cdae:
            record["loss.cdae"] = float(np.mean(cdae))
        self.refresh()
        record["step"] = self.global_step
        if self.store is not None:
            record["iteration"] = self.store.iteration
        self.metrics.write(record)
        self.timing.write({"phase": "pretrain", "epoch": self.epoch, "seconds": round(time.perf_counter() - started, 3)})
        logger.info("epoch %d/%d done (step %d)", self.epoch, self.config.epochs, self.global_step)
        return record

    # -- persistence ----------------------------------------------------------------------

    def _paths(self, name: str) -> tuple[Path, Path, Path]:
        ckpt = self.out / "checkpoints" / f"{name}.dmc"
        return ckpt, ckpt.with_name(f"{name}.optim.dmc"), self.out / "store" / f"{name}.dms"

    def save(self, name: str) -> tuple[Path, Path | None]:
        ckpt, optim, store_path = self._paths(name)
        trainer_state = {"epoch": self.epoch, "global_step": self.global_step, "mode": self.config.mode,
                         "seed": self.config.seed, "optimizer": self.optimizer.state_counters(),
                         "store_iteration": self.store.iteration if self.store is not None else None}
        save_checkpoint(ckpt, self.model, self.config.model, extra={"trainer": trainer_state})
        write_tensors(optim, self.optimizer.state_tensors())
        if self.store is None:
            store_path = None
        else:
            self.store.save(store_path)
        write_json(self.out / "trainer_state.json",
                   {**trainer_state, "checkpoint": str(ckpt), "store": None if store_path is None else str(store_path)})
        return ckpt, store_path

    def _drop_logs_after(self, epoch: int, global_step: int) -> None:
        """Forget records a crashed run wrote past the checkpoint being resumed."""
        def kept_metric(record: dict) -> bool:
            if record.get("phase") == "pretrain" and record.get("kind") == "epoch":
                return record["epoch"] <= epoch
            return record["step"] <= global_step

        dropped = self.metrics.truncate(kept_metric)
        dropped += self.timing.truncate(lambda r: r["phase"] != "pretrain" or r["epoch"] <= epoch)
        if dropped:
            logger.warning("dropped %d log records written after epoch %d", dropped, epoch)

    def restore(self, checkpoint: str | Path, store_path: str | Path | None = None) -> None:
        meta = load_checkpoint(checkpoint, self.model)
        check_model_config(meta, self.config.model, str(checkpoint))
        state = meta.get("trainer")
        if state is None:
            raise PipelineOrderError(f"{checkpoint} carries no trainer state; it cannot be resumed")
        if state.get("mode", self.config.mode) != self.config.mode:
            raise PipelineOrderError(f"{checkpoint} was trained in mode {state['mode']!r}, not {self.config.mode!r}")
        store = None
        if self.keeps_store:
            if store_path is None:
                raise PipelineOrderError(f"mode {self.config.mode!r} needs the store saved with {checkpoint}")
            store = PseudoParallelStore.load(store_path, text_width=self.config.model.d)
            if store.iteration != state["epoch"]:
                raise PipelineOrderError(
                    f"store {store_path} is at iteration {store.iteration} but checkpoint {checkpoint} "
                    f"finished epoch {state['epoch']}"
                )
        optim_path = Path(checkpoint).with_name(Path(checkpoint).stem + ".optim.dmc")
        self.optimizer.load_state(read_tensors(optim_path), state["optimizer"])
        self.store = store
        self.epoch = int(state["epoch"])
        self.global_step = int(state["global_step"])
        self.resumed = True
        self._drop_logs_after(self.epoch, self.global_step)
        logger.info("resumed from %s at epoch %d, step %d", checkpoint, self.epoch, self.global_step)

    # -- whole run ------------------------------------------------------------------------

    def train(self) -> PretrainResult:
        cfg = self.config
        if not self.resumed:
            self.run_warmup()
            self.init_store()
            ckpt, store_path = self.save("epoch_000")
        else:
            ckpt, _, store_path = self._paths(f"epoch_{self.epoch:03d}")
            if self.store is None:
                store_path = None
        last = cfg.epochs if cfg.stop_after_epoch is None else min(cfg.epochs, cfg.stop_after_epoch)
        while self.epoch < last:
            self.run_epoch()
            if self.epoch % cfg.checkpoint_every == 0 or self.epoch == last:
                ckpt, store_path = self.save(f"epoch_{self.epoch:03d}")
        if self.epoch == cfg.epochs:
            save_checkpoint(self.out / "checkpoints" / "final.dmc", self.model, cfg.model,
                            extra=read_json(sidecar_path(ckpt)))
            ckpt = self.out / "checkpoints" / "final.dmc"
        return PretrainResult(checkpoint=ckpt, store=store_path, epochs_completed=self.epoch,
                              global_step=self.global_step)


def run_warmup(config: TrainConfig, corpus: Corpus | None = None) -> DualTransformer:
    """Warm-up stage alone; returns the warmed-up model."""
    return Pretrainer(config, corpus).run_warmup()


def resume(checkpoint: str | Path, store: str | Path | None, config: TrainConfig,
           corpus: Corpus | None = None) -> PretrainResult:
    """Continue a run from an epoch checkpoint and the store written with it (None for late_fusion)."""
    trainer = Pretrainer(config, corpus, resuming=True)
    trainer.restore(checkpoint, store)
    return trainer.train()


def run_pretraining(config: TrainConfig, corpus: Corpus | None = None) -> PretrainResult:
    if config.resume_checkpoint is not None:
        return resume(config.resume_checkpoint, config.resume_store, config, corpus)
    return Pretrainer(config, corpus).train()
