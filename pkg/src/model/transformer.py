"""
Dual cross-modal Transformer.

    text ids / soft embeddings -> text_embed  -> uni_text   --+--> cross_audio (query: audio) -> audio_head
    audio features             -> audio_embed -> uni_audio  --+--> cross_text  (query: text)  -> text_head

`cross_text` is the audio-referred text encoder (its memory is the audio
unimodal output) and `cross_audio` the text-referred audio encoder. All
encoders are post-norm and have separate parameters; the text head is tied
to the token embedding table.
"""

import logging
import math

import numpy as np

from src.config import AUDIO_FEATURE_DIM, Modality, ModelConfig
from src.errors import ContractError, DimensionError
from src.nn import functional as F
from src.nn.modules import LayerNorm, Linear, Module, parameter
from src.nn.tensor import Tensor

logger = logging.getLogger(__name__)

NEG_INF = -1e9

# Name prefixes of each parameter group (checkpoint names are dotted attribute paths).
PARAMETER_GROUPS: dict[str, tuple[str, ...]] = {
    "embeddings": ("text_embed.", "audio_embed."),
    "uni_text": ("uni_text.",),
    "uni_audio": ("uni_audio.",),
    "cross_text": ("cross_text.",),
    "cross_audio": ("cross_audio.",),
    "heads": ("audio_head.",),
}
CROSS_PREFIXES = PARAMETER_GROUPS["cross_text"] + PARAMETER_GROUPS["cross_audio"]


def group_of(name: str) -> str:
    for group, prefixes in PARAMETER_GROUPS.items():
        if name.startswith(prefixes):
            return group
    return "task"


def is_unimodal_scope(name: str) -> bool:
    """Parameters updated by the intra-modal pass: everything except the cross encoders."""
    return not name.startswith(CROSS_PREFIXES)


def attention_bias(pad_mask: np.ndarray | None, dtype) -> Tensor | None:
    if pad_mask is None or not np.any(pad_mask):
        return None
    return Tensor(np.where(np.asarray(pad_mask, dtype=bool), NEG_INF, 0.0)[None, :].astype(dtype))


def scaled_dot_product_attention(q: Tensor, k: Tensor, v: Tensor, bias: Tensor | None = None) -> Tensor:
    scores = (q @ k.T) * (1.0 / math.sqrt(q.shape[1]))
    if bias is not None:
        scores = scores + bias
    return F.softmax(scores, axis=-1) @ v


class MultiHeadAttention(Module):
    def __init__(self, rng: np.random.Generator, d: int, n_heads: int, std: float):
        self.q = Linear(rng, d, d, std)
        self.k = Linear(rng, d, d, std)
        self.v = Linear(rng, d, d, std)
        self.out = Linear(rng, d, d, std)
        self._n_heads = n_heads

    def __call__(self, query: Tensor, memory: Tensor, key_pad_mask: np.ndarray | None = None) -> Tensor:
        q, k, v = self.q(query), self.k(memory), self.v(memory)
        bias = attention_bias(key_pad_mask, query.dtype)
        dk = q.shape[1] // self._n_heads
        heads = []
        for h in range(self._n_heads):
            cols = (slice(None), slice(h * dk, (h + 1) * dk))
            heads.append(scaled_dot_product_attention(q[cols], k[cols], v[cols], bias))
        return self.out(F.concat(heads, axis=1))


class FeedForward(Module):
    def __init__(self, rng: np.random.Generator, d: int, multiplier: int, std: float):
        self.up = Linear(rng, d, d * multiplier, std)
        self.down = Linear(rng, d * multiplier, d, std)

    def __call__(self, x: Tensor) -> Tensor:
        return self.down(F.gelu(self.up(x)))


class UnimodalLayer(Module):
    def __init__(self, rng: np.random.Generator, cfg: ModelConfig):
        self.self_attn = MultiHeadAttention(rng, cfg.d, cfg.n_heads, cfg.init_std)
        self.norm1 = LayerNorm(cfg.d, cfg.layer_norm_eps)
        self.ffn = FeedForward(rng, cfg.d, cfg.ffn_multiplier, cfg.init_std)
        self.norm2 = LayerNorm(cfg.d, cfg.layer_norm_eps)

    def __call__(self, x: Tensor, pad_mask: np.ndarray | None) -> Tensor:
        x = self.norm1(x + self.self_attn(x, x, pad_mask))
        return self.norm2(x + self.ffn(x))


class CrossModalLayer(Module):
    def __init__(self, rng: np.random.Generator, cfg: ModelConfig):
        self.self_attn = MultiHeadAttention(rng, cfg.d, cfg.n_heads, cfg.init_std)
        self.norm1 = LayerNorm(cfg.d, cfg.layer_norm_eps)
        self.cross_attn = MultiHeadAttention(rng, cfg.d, cfg.n_heads, cfg.init_std)
        self.norm2 = LayerNorm(cfg.d, cfg.layer_norm_eps)
        self.ffn = FeedForward(rng, cfg.d, cfg.ffn_multiplier, cfg.init_std)
        self.norm3 = LayerNorm(cfg.d, cfg.layer_norm_eps)

    def __call__(self, x: Tensor, query_pad_mask, memory: Tensor, memory_pad_mask) -> Tensor:
        x = self.norm1(x + self.self_attn(x, x, query_pad_mask))
        x = self.norm2(x + self.cross_attn(x, memory, memory_pad_mask))
        return self.norm3(x + self.ffn(x))


class UnimodalEncoder(Module):
    def __init__(self, rng: np.random.Generator, cfg: ModelConfig):
        self.layers = [UnimodalLayer(rng, cfg) for _ in range(cfg.n_uni_layers)]

    def __call__(self, emb: Tensor, pad_mask: np.ndarray | None = None) -> Tensor:
        x = emb
        for layer in self.layers:
            x = layer(x, pad_mask)
        return x


class CrossModalEncoder(Module):
    def __init__(self, rng: np.random.Generator, cfg: ModelConfig):
        self.layers = [CrossModalLayer(rng, cfg) for _ in range(cfg.n_cross_layers)]
        # Attended instead of the memory when every memory position is padding.
        self.null_memory = parameter(rng.normal(0.0, cfg.init_std, size=(1, cfg.d)))

    def __call__(self, query_emb: Tensor, memory: Tensor,
                 query_pad_mask: np.ndarray | None = None, memory_pad_mask: np.ndarray | None = None) -> Tensor:
        if memory.shape[1] != query_emb.shape[1]:
            raise DimensionError(f"memory width {memory.shape[1]} != query width {query_emb.shape[1]}")
        if memory_pad_mask is not None:
            memory_pad_mask = np.asarray(memory_pad_mask, dtype=bool)
            if memory_pad_mask.shape != (memory.shape[0],):
                raise DimensionError(f"memory mask {memory_pad_mask.shape} does not match memory {memory.shape}")
            if memory_pad_mask.all():
                memory, memory_pad_mask = self.null_memory, None
        x = query_emb
        for layer in self.layers:
            x = layer(x, query_pad_mask, memory, memory_pad_mask)
        return x


class TextEmbedding(Module):
    def __init__(self, rng: np.random.Generator, cfg: ModelConfig):
        self.token = parameter(rng.normal(0.0, cfg.init_std, size=(cfg.vocab_size, cfg.d)))
        self.position = parameter(rng.normal(0.0, cfg.init_std, size=(cfg.max_text_len, cfg.d)))


class AudioEmbedding(Module):
    def __init__(self, rng: np.random.Generator, cfg: ModelConfig):
        self.proj = Linear(rng, AUDIO_FEATURE_DIM, cfg.d, cfg.init_std)
        self.position = parameter(rng.normal(0.0, cfg.init_std, size=(cfg.max_audio_len, cfg.d)))


class DualTransformer(Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        config.validate()
        self._config = config
        rng = np.random.default_rng(seed)
        self.text_embed = TextEmbedding(rng, config)
        self.audio_embed = AudioEmbedding(rng, config)
        self.uni_text = UnimodalEncoder(rng, config)
        self.uni_audio = UnimodalEncoder(rng, config)
        self.cross_text = CrossModalEncoder(rng, config)
        self.cross_audio = CrossModalEncoder(rng, config)
        self.audio_head = Linear(rng, config.d, AUDIO_FEATURE_DIM, config.init_std)

    @property
    def config(self) -> ModelConfig:
        return self._config

    # -- input embedding ------------------------------------------------------------

    def embed_text(self, text: np.ndarray) -> Tensor:
        """Token ids (int, T_w) or soft embeddings (float, T_w x d), plus positions."""
        text = np.asarray(text)
        length = text.shape[0]
        if length < 1 or length > self._config.max_text_len:
            raise ContractError(f"text length {length} outside [1, max_text_len={self._config.max_text_len}]")
        positions = self.text_embed.position[:length]
        if text.dtype.kind in "iu":
            if text.ndim != 1:
                raise DimensionError(f"token ids must be 1-D, got {text.shape}")
            return F.embedding(self.text_embed.token, text) + positions
        if text.shape != (length, self._config.d):
            raise DimensionError(f"soft text input must be T x {self._config.d}, got {text.shape}")
        return Tensor(text.astype(np.float32)) + positions

    def embed_audio(self, features: np.ndarray) -> Tensor:
        features = np.asarray(features, dtype=np.float32)
        if features.ndim != 2 or features.shape[1] != AUDIO_FEATURE_DIM:
            raise DimensionError(f"audio features must be T x {AUDIO_FEATURE_DIM}, got {features.shape}")
        length = features.shape[0]
        if length < 1 or length > self._config.max_audio_len:
            raise ContractError(f"audio length {length} outside [1, max_audio_len={self._config.max_audio_len}]")
        return self.audio_embed.proj(Tensor(features)) + self.audio_embed.position[:length]

    def embed(self, modality: Modality, values: np.ndarray) -> Tensor:
        return self.embed_text(values) if modality is Modality.TEXT else self.embed_audio(values)

    # -- encoders -------------------------------------------------------------------

    def unimodal_encode(self, modality: Modality, emb: Tensor, pad_mask: np.ndarray | None = None) -> Tensor:
        encoder = self.uni_text if modality is Modality.TEXT else self.uni_audio
        return encoder(emb, pad_mask)

    def cross_modal_encode(self, modality: Modality, query_emb: Tensor, memory: Tensor,
                           query_pad_mask: np.ndarray | None = None,
                           memory_pad_mask: np.ndarray | None = None) -> Tensor:
        """`modality` is the query stream's; the memory is the other modality's unimodal output."""
        encoder = self.cross_text if modality is Modality.TEXT else self.cross_audio
        return encoder(query_emb, memory, query_pad_mask, memory_pad_mask)

    def reconstruct(self, modality: Modality, query: np.ndarray, source: np.ndarray,
                    source_pad_mask: np.ndarray | None = None) -> Tensor:
        """H^N for `modality`: cross-encode `query` against the unimodal encoding of `source`."""
        other = modality.other
        memory = self.unimodal_encode(other, self.embed(other, source), source_pad_mask)
        return self.cross_modal_encode(modality, self.embed(modality, query), memory, None, source_pad_mask)

    # -- heads ----------------------------------------------------------------------

    def text_head(self, hidden: Tensor) -> Tensor:
        return hidden @ self.text_embed.token.T

    def soft_embeddings(self, hidden: Tensor) -> Tensor:
        """Expected token embedding under softmax(text_head(hidden))."""
        return F.softmax(self.text_head(hidden), axis=-1) @ self.text_embed.token

    def text_translation(self, hidden: Tensor) -> Tensor:
        if self._config.text_translation == "hidden_state":
            return hidden
        return self.soft_embeddings(hidden)

    def head(self, modality: Modality, hidden: Tensor) -> Tensor:
        return self.text_head(hidden) if modality is Modality.TEXT else self.audio_head(hidden)


def create_model(config: ModelConfig, seed: int = 0) -> DualTransformer:
    """Seeded construction; identical (config, seed) give bit-identical parameters."""
    model = DualTransformer(config, seed)
    logger.debug("built model with %d parameter tensors", len(model.parameters()))
    return model
