"""
Pre-training objectives.

    idae_loss            reconstruct C(x) with the unimodal encoder of x only
    warm_loss            translate from a fully masked query, paired data only
    cdae_unpaired_loss   reconstruct C(x) given the stored IDP translation of x
    cdae_paired_loss     reconstruct C(x) given C-hat(other modality of x)
    refine_loss          one refresh step on paired data: previous translation
                         of x plus the clean partner -> x
    total_loss           unweighted sum of the components a mode keeps

Each returns the scalar loss tensor for a batch plus the float value of its
text and audio parts. Batch losses are the mean over examples; the text and
audio parts are added without re-weighting.
"""

import logging
from dataclasses import dataclass, fields
from typing import Callable, Mapping, Sequence

import numpy as np

from src.config import CorruptionPolicy, Modality
from src.errors import ContractError
from src.model.transformer import DualTransformer
from src.nn import functional as F
from src.nn.tensor import Tensor
from src.training.corruption import Purpose, corrupt, imitate_translation_noise, make_masked_sequence, stream
from src.utils.corpus import Example

logger = logging.getLogger(__name__)

# Components each training mode keeps; absent ones never enter the total.
MODE_COMPONENTS = {
    "full": ("idae", "cdae_unpaired", "cdae_paired", "refine"),
    "no_idp": ("idae", "cdae_unpaired", "cdae_paired"),
    "no_idae": ("cdae_unpaired", "cdae_paired", "refine"),
    "no_paired": ("idae", "cdae_unpaired"),
    "paired_only": ("idae", "cdae_paired", "refine"),
    "late_fusion": ("idae",),
}

_CORRUPT_PURPOSE = {
    ("idae", Modality.TEXT): Purpose.IDAE_TEXT,
    ("idae", Modality.AUDIO): Purpose.IDAE_AUDIO,
    ("cdae", Modality.TEXT): Purpose.CDAE_TEXT,
    ("cdae", Modality.AUDIO): Purpose.CDAE_AUDIO,
}
_NOISE_PURPOSE = {Modality.TEXT: Purpose.NOISE_TEXT, Modality.AUDIO: Purpose.NOISE_AUDIO}

# (example id, modality of the translation) -> translated matrix
TranslationLookup = Callable[[int, Modality], np.ndarray]

@dataclass
class LossBundle:
    idae_text: float | None = None
    idae_audio: float | None = None
    cdae_unpaired_text: float | None = None
    cdae_unpaired_audio: float | None = None
    cdae_paired_text: float | None = None
    cdae_paired_audio: float | None = None
    refine_text: float | None = None
    refine_audio: float | None = None
    warm_text: float | None = None
    warm_audio: float | None = None

    @property
    def total(self) -> float:
        return float(sum(v for v in self.components().values()))

    def components(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self) if getattr(self, f.name) is not None}

    def as_record(self) -> dict[str, float]:
        """Metric keys such as `loss.cdae.unpaired.text`."""
        record = {"loss." + name.replace("_", "."): value for name, value in self.components().items()}
        record["loss.total"] = self.total
        return record

@dataclass(frozen=True)
class NoiseContext:
    """Where corruption randomness comes from: one stream per (purpose, example, epoch)."""

    seed: int
    epoch: int
    vocab_size: int
    loss_on_all_positions: bool = False

    def rng(self, purpose: Purpose, example_id: int) -> np.random.Generator:
        return stream(self.seed, purpose, example_id, self.epoch)

def _mean(values: list[Tensor]) -> Tensor:
    total = values[0]
    for value in values[1:]:
        total = total + value
    return total * (1.0 / len(values))

def _reconstruction(model: DualTransformer, modality: Modality, hidden: Tensor, target: np.ndarray,
                    position_mask: np.ndarray | None) -> Tensor:
    prediction = model.head(modality, hidden)
    if modality is Modality.TEXT:
        return F.cross_entropy(prediction, target, position_mask)
    return F.l1_loss(prediction, target, position_mask)

def _corrupted_query(stage: str, modality: Modality, example: Example, policy: CorruptionPolicy,
                     ctx: NoiseContext) -> tuple[np.ndarray, np.ndarray | None]:
    rng = ctx.rng(_CORRUPT_PURPOSE[stage, modality], example.example_id)
    corrupted, record = corrupt(modality, example.values(modality), policy, rng, ctx.vocab_size)
    return corrupted, None if ctx.loss_on_all_positions else record.position_mask()

def _branches(per_modality: dict[Modality, list[Tensor]], prefix: str) -> tuple[Tensor, dict[str, float]]:
    parts, values = [], {}
    for modality, losses in per_modality.items():
        if losses:
            branch = _mean(losses)
            parts.append(branch)
            values[f"{prefix}_{modality.value}"] = branch.item()
    if not parts:
        raise ContractError(f"{prefix} loss on an empty batch")
    total = parts[0] if len(parts) == 1 else parts[0] + parts[1]
    return total, values

def idae_loss(model: DualTransformer, texts: Sequence[Example], audios: Sequence[Example],
              policy: CorruptionPolicy, ctx: NoiseContext) -> tuple[Tensor, dict[str, float]]:
    """Intra-modal denoising; only unimodal encoders, embeddings and heads take part."""
    per_modality: dict[Modality, list[Tensor]] = {Modality.TEXT: [], Modality.AUDIO: []}
    for modality, batch in ((Modality.TEXT, texts), (Modality.AUDIO, audios)):
        for example in batch:
            corrupted, mask = _corrupted_query("idae", modality, example, policy, ctx)
            hidden = model.unimodal_encode(modality, model.embed(modality, corrupted))
            per_modality[modality].append(_reconstruction(model, modality, hidden, example.values(modality), mask))
    return _branches(per_modality, "idae")

def warm_loss(model: DualTransformer, paired: Sequence[Example]) -> tuple[Tensor, dict[str, float]]:
    """Pure translation from fully masked queries of ground-truth length, loss on every position."""
    cfg = model.config
    caps = {Modality.TEXT: cfg.max_text_len, Modality.AUDIO: cfg.max_audio_len}
    per_modality: dict[Modality, list[Tensor]] = {Modality.TEXT: [], Modality.AUDIO: []}
    for example in paired:
        if not example.is_paired:
            raise ContractError(f"warm-up needs paired examples; example {example.example_id} is unpaired")
        for modality in Modality:
            target = example.values(modality)
            query = make_masked_sequence(modality, len(target), caps[modality])
            hidden = model.reconstruct(modality, query, example.values(modality.other))
            per_modality[modality].append(_reconstruction(model, modality, hidden, target, None))
    return _branches(per_modality, "warm")

def cdae_unpaired_loss(model: DualTransformer, texts: Sequence[Example], audios: Sequence[Example],
                       translations: TranslationLookup, policy: CorruptionPolicy,
                       ctx: NoiseContext) -> tuple[Tensor, dict[str, float]]:
    """Cross-modal denoising against stored translations: text reads its a-tilde, audio its w-tilde."""
    per_modality: dict[Modality, list[Tensor]] = {Modality.TEXT: [], Modality.AUDIO: []}
    for modality, batch in ((Modality.TEXT, texts), (Modality.AUDIO, audios)):
        for example in batch:
            memory = translations(example.example_id, modality.other)
            corrupted, mask = _corrupted_query("cdae", modality, example, policy, ctx)
            hidden = model.reconstruct(modality, corrupted, memory)
            per_modality[modality].append(_reconstruction(model, modality, hidden, example.values(modality), mask))
    return _branches(per_modality, "cdae_unpaired")

def cdae_paired_loss(model: DualTransformer, paired: Sequence[Example], translations: TranslationLookup,
                     policy: CorruptionPolicy, ctx: NoiseContext, replace_prob: float = 0.30,
                     segment_len_range: tuple[int, int] | None = None) -> tuple[Tensor, dict[str, float]]:
    """Cross-modal denoising on paired data; the memory side is C-hat of the true partner."""
    segment_len_range = segment_len_range or policy.segment_len_range
    table = model.text_embed.token.data
    per_modality: dict[Modality, list[Tensor]] = {Modality.TEXT: [], Modality.AUDIO: []}
    for example in paired:
        if not example.is_paired:
            raise ContractError(f"paired CDAE needs paired examples; example {example.example_id} is unpaired")
        for modality in Modality:
            other = modality.other
            memory, _ = imitate_translation_noise(
                other,
                example.values(other),
                translations(example.example_id, other),
                replace_prob,
                ctx.rng(_NOISE_PURPOSE[other], example.example_id),
                token_table=table,
                segment_len_range=segment_len_range,
            )
            corrupted, mask = _corrupted_query("cdae", modality, example, policy, ctx)
            hidden = model.reconstruct(modality, corrupted, memory)
            per_modality[modality].append(_reconstruction(model, modality, hidden, example.values(modality), mask))
    return _branches(per_modality, "cdae_paired")

def refine_loss(model: DualTransformer, paired: Sequence[Example],
                translations: TranslationLookup) -> tuple[Tensor, dict[str, float]]:
    """The refresh map itself, supervised: the query is the stored translation of x,
    the memory is x's clean partner, and the loss covers every position of x."""
    per_modality: dict[Modality, list[Tensor]] = {Modality.TEXT: [], Modality.AUDIO: []}
    for example in paired:
        if not example.is_paired:
            raise ContractError(f"refinement needs paired examples; example {example.example_id} is unpaired")
        for modality in Modality:
            target = example.values(modality)
            query = translations(example.example_id, modality)
            if query.shape[0] != len(target):
                raise ContractError(
                    f"example {example.example_id}: stored {modality.value} translation has length "
                    f"{query.shape[0]}, the example has {len(target)}"
                )
            hidden = model.reconstruct(modality, query, example.values(modality.other))
            per_modality[modality].append(_reconstruction(model, modality, hidden, target, None))
    return _branches(per_modality, "refine")

def total_loss(components: Mapping[str, Tensor | None], mode: str = "full") -> Tensor:
    """Unweighted sum of the components `mode` keeps; components that are None are skipped."""
    if mode not in MODE_COMPONENTS:
        raise ContractError(f"unknown training mode {mode!r}")
    keep = [components[name] for name in MODE_COMPONENTS[mode] if components.get(name) is not None]
    if not keep:
        raise ContractError(f"no active loss component for mode {mode!r} among {sorted(components)}")
    total = keep[0]
    for value in keep[1:]:
        total = total + value
    return total
