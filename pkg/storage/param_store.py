import hashlib
import logging
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import torch
import torch.nn as nn

from models.exceptions import IntegrityError, PreconditionError, VersionError
from models.schemas import Checkpoint, ModelParams, NetConfig, ParamManifest, TrainConfig

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
PathLike = Union[str, Path]


def params_checksum(tensors: Dict[str, torch.Tensor]) -> str:
    """SHA-256 over names and raw bytes, in sorted name order"""
    digest = hashlib.sha256()
    for name in sorted(tensors):
        digest.update(name.encode())
        digest.update(tensors[name].detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def make_params(model: nn.Module, net_config: NetConfig) -> ModelParams:
    tensors = {name: t.detach().cpu().clone() for name, t in model.state_dict().items()}
    for name, t in tensors.items():
        if t.is_floating_point() and not torch.isfinite(t).all():
            raise PreconditionError(f"Parameter {name} holds non-finite values")
    names = sorted(tensors)
    manifest = ParamManifest(
        format_version=FORMAT_VERSION,
        names=names,
        shapes=[list(tensors[n].shape) for n in names],
        checksum=params_checksum(tensors),
        net_config=net_config,
    )
    return ModelParams(tensors=tensors, manifest=manifest)


def _params_payload(params: ModelParams) -> Dict[str, Any]:
    return {
        "format_version": FORMAT_VERSION,
        "manifest": params.manifest.model_dump_json(),
        "params": params.tensors,
    }


def _write(payload: Dict[str, Any], path: PathLike) -> Path:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = out.with_suffix(out.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(out)
    return out


def save_params(params: ModelParams, path: PathLike) -> Path:
    """Write the parameter archive: named tensors plus a JSON manifest"""
    out = _write(_params_payload(params), path)
    logger.debug(f"Saved {len(params.tensors)} tensors to {out}")
    return out


def _read(path: PathLike) -> Dict[str, Any]:
    path = Path(path)
    if not path.is_file():
        raise PreconditionError(f"Archive not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:
        raise IntegrityError(f"Archive {path} is unreadable: {e}") from e
    if not isinstance(payload, dict) or "manifest" not in payload or "params" not in payload:
        raise IntegrityError(f"Archive {path} is missing its manifest or parameters")
    version = payload.get("format_version")
    if version != FORMAT_VERSION:
        raise VersionError(f"Archive {path} has format_version {version}, expected {FORMAT_VERSION}")
    return payload


def _validate(payload: Dict[str, Any], path: PathLike) -> ModelParams:
    try:
        manifest = ParamManifest.model_validate_json(payload["manifest"])
    except Exception as e:
        raise IntegrityError(f"Manifest in {path} does not parse: {e}") from e
    if manifest.format_version != FORMAT_VERSION:
        raise VersionError(f"Manifest in {path} has format_version {manifest.format_version}")

    tensors = payload["params"]
    if sorted(tensors) != manifest.names:
        raise IntegrityError(f"Tensor names in {path} do not match the manifest")
    for name, shape in zip(manifest.names, manifest.shapes):
        if list(tensors[name].shape) != shape:
            raise IntegrityError(f"Tensor {name} has shape {list(tensors[name].shape)}, manifest says {shape}")
    if params_checksum(tensors) != manifest.checksum:
        raise IntegrityError(f"Checksum mismatch in {path}")
    return ModelParams(tensors=tensors, manifest=manifest)


def load_params(path: PathLike) -> ModelParams:
    """Read and verify a parameter archive (a checkpoint also qualifies)"""
    return _validate(_read(path), path)


def save_checkpoint(
    path: PathLike,
    params: ModelParams,
    optimizer: torch.optim.Optimizer,
    step: int,
    cfg: TrainConfig,
    history: Optional[List[Dict[str, float]]] = None,
) -> Path:
    payload = _params_payload(params)
    payload.update({
        "optimizer": optimizer.state_dict(),
        "step": step,
        "config_hash": cfg.config_hash(),
        "train_config": cfg.model_dump(mode="json"),
        "history": list(history or []),
        "saved_at": datetime.utcnow().isoformat(),
    })
    return _write(payload, path)


def load_checkpoint(path: PathLike) -> Checkpoint:
    payload = _read(path)
    if "optimizer" not in payload or "step" not in payload:
        raise IntegrityError(f"{path} is a parameter archive, not a training checkpoint")
    return Checkpoint(
        params=_validate(payload, path),
        optimizer=payload["optimizer"],
        step=int(payload["step"]),
        config_hash=payload["config_hash"],
        train_config=payload["train_config"],
        history=payload.get("history", []),
    )


class CheckpointStore:
    """Checkpoint files of one training run directory"""

    def __init__(self, run_dir: PathLike):
        self.run_dir = Path(run_dir)
        self.ckpt_dir = self.run_dir / "checkpoints"
        self.ckpt_dir.mkdir(parents=True, exist_ok=True)

    def path_for(self, step: int) -> Path:
        return self.ckpt_dir / f"step_{step:07d}.pt"

    def final_path(self) -> Path:
        return self.run_dir / "final.pt"

    def list_checkpoints(self) -> List[Path]:
        return sorted(self.ckpt_dir.glob("step_*.pt"))

    def latest(self) -> Optional[Path]:
        checkpoints = self.list_checkpoints()
        return checkpoints[-1] if checkpoints else None
