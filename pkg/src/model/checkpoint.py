"""
DMC1 checkpoints for a `Module`, with a JSON sidecar carrying the model
config so a checkpoint can be reopened without the run's config file.
"""

import hashlib
import logging
from pathlib import Path

import numpy as np

from src.config import ModelConfig
from src.errors import CheckpointMismatchError
from src.model.transformer import DualTransformer, create_model, group_of
from src.nn.modules import Module
from src.utils.storage import read_json, read_tensors, write_json, write_tensors

logger = logging.getLogger(__name__)


def sidecar_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def save_checkpoint(path: str | Path, module: Module, model_config: ModelConfig,
                    extra: dict | None = None) -> Path:
    path = Path(path)
    write_tensors(path, module.state_dict())
    write_json(sidecar_path(path), {"model": model_config.to_dict(), **(extra or {})})
    logger.info("wrote checkpoint %s", path)
    return path


def load_state(module: Module, tensors: dict[str, np.ndarray], source: str = "checkpoint") -> None:
    """Copy `tensors` into `module` in place; names and shapes must match exactly."""
    params = dict(module.named_parameters())
    missing = sorted(set(params) - set(tensors))
    unexpected = sorted(set(tensors) - set(params))
    if missing or unexpected:
        raise CheckpointMismatchError(
            f"{source} parameters do not match the model: missing {missing[:5]}, unexpected {unexpected[:5]}"
        )
    for name, param in params.items():
        if tensors[name].shape != param.shape:
            raise CheckpointMismatchError(
                f"parameter {name}: {source} has shape {tensors[name].shape}, model expects {param.shape}"
            )
    for name, param in params.items():
        param.data[...] = tensors[name]
        param.grad = None


def load_checkpoint(path: str | Path, module: Module) -> dict:
    """Load parameters into an existing module and return the sidecar metadata."""
    load_state(module, read_tensors(path), source=str(path))
    side = sidecar_path(path)
    return read_json(side) if side.exists() else {}


def load_model(path: str | Path) -> tuple[DualTransformer, dict]:
    """Rebuild a DualTransformer from a checkpoint and its sidecar config."""
    meta = read_json(sidecar_path(path))
    model = create_model(ModelConfig.from_dict(meta["model"]))
    tensors = read_tensors(path)
    # Fine-tuned checkpoints also carry task-head tensors; keep only backbone names.
    backbone = {k: v for k, v in tensors.items() if not k.startswith("task.")}
    load_state(model, backbone, source=str(path))
    return model, meta


def check_model_config(meta: dict, expected: ModelConfig, source: str) -> None:
    """Compare a sidecar's model config with the configured one, naming the first mismatch."""
    stored = meta.get("model", {})
    for key, value in expected.to_dict().items():
        if key in stored and stored[key] != value:
            raise CheckpointMismatchError(f"{source}: model.{key} is {stored[key]!r}, config says {value!r}")


def parameter_digests(module: Module) -> dict[str, str]:
    """SHA-256 of the parameter bytes per parameter group."""
    return tensor_digests({name: param.data for name, param in module.named_parameters()})


def tensor_digests(tensors: dict[str, np.ndarray]) -> dict[str, str]:
    hashes: dict = {}
    for name, value in sorted(tensors.items()):
        h = hashes.setdefault(group_of(name), hashlib.sha256())
        h.update(name.encode("utf-8"))
        h.update(np.ascontiguousarray(value).tobytes())
    return {group: h.hexdigest() for group, h in sorted(hashes.items())}
