import hashlib
import logging
import math
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional

import pandas as pd
import torch
from pydantic import BaseModel
from tqdm import tqdm

from config.settings import settings
from models.exceptions import EmptyManifestError, PreconditionError, TrainingDivergedError
from models.network import MDANet, build_model
from models.schemas import (
    Ablation, DataConfig, FusionMode, ImagePair, InfoConfig, LossBreakdown,
    NetConfig, RunManifest, TrainConfig,
)
from services.backbone_service import VGGBackbone, load_backbone
from services.dataset_service import PatchSampler, load_pairs, make_synthetic_pair, read_manifest, scan_dataset
from services.loss_service import STYLE_STAGES, LossService
from services.weight_service import WeightService
from storage.param_store import CheckpointStore, load_checkpoint, make_params, save_checkpoint, save_params

logger = logging.getLogger(__name__)

LOSS_COLUMNS = ["step", "total", "image", "patch", "feature", "style", "int_ir", "int_vis", "grad_ir", "grad_vis"]


class PipelineWiring(BaseModel):
    """What an ablation changes: the fusion rule, the weight sources and the VGG depth"""
    net: NetConfig
    info: InfoConfig
    fixed_image_weights: bool = False
    fixed_patch_weights: bool = False

    @property
    def backbone_depth(self) -> int:
        return max(self.info.depth, STYLE_STAGES)


def apply_ablation(cfg: TrainConfig) -> PipelineWiring:
    ablation = cfg.ablation
    net = cfg.net.model_copy()
    info = cfg.info.model_copy()
    if ablation == Ablation.fuse_sum:
        net = net.model_copy(update={"fusion_mode": FusionMode.sum})
    elif ablation == Ablation.fuse_concat:
        net = net.model_copy(update={"fusion_mode": FusionMode.concat})
    elif ablation == Ablation.vgg_depth_3:
        info = info.model_copy(update={"depth": 3})
    elif ablation == Ablation.vgg_depth_4:
        info = info.model_copy(update={"depth": 4})
    return PipelineWiring(
        net=net,
        info=info,
        fixed_image_weights=ablation == Ablation.fixed_image_weights,
        fixed_patch_weights=ablation == Ablation.fixed_patch_weights,
    )


def load_training_pairs(data: DataConfig, workers: Optional[int] = None) -> List[ImagePair]:
    """Pairs from a manifest, a dataset root, or the synthetic generator, in that order"""
    if data.manifest:
        return load_pairs(read_manifest(data.manifest, split="train"), workers)
    if data.root:
        return load_pairs(scan_dataset(data.root, data.layout, split="train"), workers)
    if data.synthetic_pairs < 1:
        raise EmptyManifestError("No training data configured")
    return [make_synthetic_pair(data.synthetic_size, data.synthetic_size, seed=i) for i in range(data.synthetic_pairs)]


def make_run_id(config_hash: str, started_at: datetime) -> str:
    return hashlib.sha1(f"{config_hash}:{started_at.isoformat()}".encode()).hexdigest()[:12]


class TrainResult(BaseModel):
    checkpoint: str
    final_step: int
    history: List[Dict[str, float]]
    run_manifest: RunManifest
    loss_csv: str


class TrainService:
    """
    Desk-scale training loop: patch sampling, weight generation, forward,
    loss, Adam step, logging and checkpointing.

    Single-threaded runs with a fixed seed are bit-reproducible; the batch
    at each step depends only on (seed, step).
    """

    def __init__(
        self,
        cfg: TrainConfig,
        pairs: Optional[List[ImagePair]] = None,
        backbone: Optional[VGGBackbone] = None,
        progress: bool = True,
    ):
        self.cfg = cfg
        self.wiring = apply_ablation(cfg)
        self.pairs = pairs if pairs is not None else load_training_pairs(cfg.data)
        self.sampler = PatchSampler(self.pairs, cfg.crop, cfg.batch_size, cfg.seed)

        if backbone is None:
            backbone = VGGBackbone(
                load_backbone(cfg.backbone, cfg.backbone_seed, self.wiring.backbone_depth),
                self.wiring.backbone_depth,
            )
        self.backbone = backbone
        self.weight_service = WeightService(
            backbone, self.wiring.info,
            fixed_image_weights=self.wiring.fixed_image_weights,
            fixed_patch_weights=self.wiring.fixed_patch_weights,
        )
        self.loss_service = LossService(backbone, cfg.loss)
        self.model: MDANet = build_model(self.wiring.net, seed=cfg.seed)
        self.optimizer = torch.optim.Adam(
            self.model.parameters(), lr=cfg.learning_rate, betas=(cfg.beta1, cfg.beta2),
        )
        self.progress = progress

        self.run_dir = Path(cfg.out_dir) if cfg.out_dir else Path(settings.RUNS_DIR) / cfg.config_hash()[:12]
        self.store = CheckpointStore(self.run_dir)
        self.loss_csv = self.run_dir / "loss.csv"
        self.history: List[Dict[str, float]] = []
        self.step = 0

    @property
    def total_steps(self) -> int:
        if self.cfg.max_steps is not None:
            return self.cfg.max_steps
        return self.cfg.epochs * self.sampler.steps_per_epoch

    def resume(self, checkpoint_path: str) -> None:
        """Restore model, optimizer, step and history from a checkpoint of the same config"""
        ckpt = load_checkpoint(checkpoint_path)
        if ckpt.config_hash != self.cfg.config_hash():
            raise PreconditionError(
                f"Checkpoint {checkpoint_path} was written for config {ckpt.config_hash[:12]}, "
                f"this run is {self.cfg.config_hash()[:12]}"
            )
        self.model.load_state_dict(ckpt.params.tensors)
        self.optimizer.load_state_dict(ckpt.optimizer)
        self.step = ckpt.step
        self.history = list(ckpt.history)
        logger.info(f"✓ Resumed from {checkpoint_path} at step {self.step}")

    def train_step(self, step: int) -> LossBreakdown:
        batch = self.sampler.batch(step)
        weights, grids = self.weight_service.batch(batch.ir, batch.vis_y)

        self.model.train()
        out = self.model(batch.ir, batch.vis_y)
        loss, breakdown = self.loss_service(out, batch.ir, batch.vis_y, weights, grids)
        if not torch.isfinite(loss):
            dump = self._dump_diagnostics(step, batch, breakdown)
            raise TrainingDivergedError(step, str(dump))

        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        if self.cfg.grad_clip is not None:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.cfg.grad_clip)
        self.optimizer.step()
        return breakdown

    def _dump_diagnostics(self, step: int, batch, breakdown: LossBreakdown) -> Path:
        path = self.run_dir / f"diverged_step_{step:07d}.pt"
        torch.save(
            {
                "step": step,
                "identifiers": batch.identifiers,
                "ir": batch.ir,
                "vis_y": batch.vis_y,
                "weights": [w.model_dump() for w in breakdown.weights],
                "grids": [g.model_dump() for g in breakdown.grids],
                "terms": breakdown.model_dump(exclude={"weights", "grids"}),
            },
            path,
        )
        logger.error(f"✗ Non-finite loss at step {step}, diagnostics in {path}")
        return path

    def _save(self, path: Path) -> Path:
        params = make_params(self.model, self.wiring.net)
        return save_checkpoint(
            path, params, self.optimizer, self.step, self.cfg,
            self.history[-self.cfg.history_tail:],
        )

    def _append_loss_row(self, row: Dict[str, float]) -> None:
        pd.DataFrame([row], columns=LOSS_COLUMNS).to_csv(self.loss_csv, mode="a", header=False, index=False)

    def _write_manifest(self, manifest: RunManifest) -> None:
        (self.run_dir / "run_manifest.json").write_text(manifest.model_dump_json(indent=2), encoding="utf-8")

    def train(self, resume: Optional[str] = None) -> TrainResult:
        if resume:
            self.resume(resume)
        torch.use_deterministic_algorithms(True, warn_only=True)

        started_at = datetime.utcnow()
        config_hash = self.cfg.config_hash()
        manifest = RunManifest(
            run_id=make_run_id(config_hash, started_at),
            config_hash=config_hash,
            seed=self.cfg.seed,
            ablation=self.cfg.ablation,
            started_at=started_at,
            final_step=self.step,
        )
        self._write_manifest(manifest)
        logger.info(
            f"Training run {manifest.run_id}: {len(self.pairs)} pairs, {self.total_steps} steps, "
            f"ablation={self.cfg.ablation.value}"
        )

        if not (resume is not None and self.loss_csv.is_file()):
            pd.DataFrame(columns=LOSS_COLUMNS).to_csv(self.loss_csv, index=False)
        bar = tqdm(range(self.step, self.total_steps), desc="Training", disable=not self.progress)
        for step in bar:
            breakdown = self.train_step(step)
            row = breakdown.csv_row(step)
            self._append_loss_row(row)
            self.history.append(row)
            self.step = step + 1
            bar.set_postfix(loss=f"{breakdown.total:.4g}")

            if self.cfg.checkpoint_every and self.step % self.cfg.checkpoint_every == 0:
                self._save(self.store.path_for(self.step))

        final = self._save(self.store.final_path())
        save_params(make_params(self.model, self.wiring.net), self.run_dir / "params.pt")
        manifest = manifest.model_copy(update={"final_step": self.step, "final_checkpoint": str(final)})
        self._write_manifest(manifest)
        if self.history:
            logger.info(f"✓ Finished at step {self.step}, total loss {self.history[-1]['total']:.4g}")

        return TrainResult(
            checkpoint=str(final),
            final_step=self.step,
            history=self.history,
            run_manifest=manifest,
            loss_csv=str(self.loss_csv),
        )


def moving_average(values: List[float], window: int = 20) -> List[float]:
    """Trailing moving average, as used to judge loss curves"""
    out = []
    for i in range(len(values)):
        chunk = values[max(0, i - window + 1):i + 1]
        out.append(math.fsum(chunk) / len(chunk))
    return out
