import hashlib
import json
from datetime import datetime
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple

import numpy as np
import torch
from pydantic import BaseModel, Field, field_validator, model_validator

WEIGHT_TOLERANCE = 1e-6
VGG_STAGE_CHANNELS = (64, 128, 256, 512, 512)


# ---------------------------------------------------------------------------
# Experiment configuration
# ---------------------------------------------------------------------------
class InfoConfig(BaseModel):
    delta: float = 0.167
    c_int: float = 3e3
    c_grad: float = 3e3
    entropy_bins: int = 256
    log_sigma: float = 1.0
    log_size: int = 7
    window: int = 21
    stride: int = 21
    depth: int = 2  # VGG stages averaged by the image-level statistics

    @field_validator("delta", "c_int", "c_grad", "log_sigma")
    @classmethod
    def _positive(cls, value: float) -> float:
        if value <= 0:
            raise ValueError("must be positive")
        return value

    @field_validator("entropy_bins", "stride")
    @classmethod
    def _positive_int(cls, value: int) -> int:
        if value < 1:
            raise ValueError("must be >= 1")
        return value

    @field_validator("window", "log_size")
    @classmethod
    def _odd(cls, value: int) -> int:
        if value < 1 or value % 2 == 0:
            raise ValueError("must be a positive odd integer")
        return value

    @field_validator("depth")
    @classmethod
    def _depth(cls, value: int) -> int:
        if not 1 <= value <= 5:
            raise ValueError("depth must be in 1..5")
        return value


class LossConfig(BaseModel):
    alpha: float = 1e-8
    beta: float = 1e7
    gamma: float = 2.0
    eta: float = 0.02
    zeta: float = 20.0
    lambda_t: List[float] = Field(default_factory=lambda: [1.0] * 5)
    ssim_window: int = 11
    ssim_sigma: float = 1.5
    ssim_k1: float = 0.01
    ssim_k2: float = 0.03

    @field_validator("alpha", "beta", "gamma", "eta", "zeta")
    @classmethod
    def _non_negative(cls, value: float) -> float:
        if value < 0:
            raise ValueError("must be non-negative")
        return value

    @field_validator("lambda_t")
    @classmethod
    def _five_blocks(cls, value: List[float]) -> List[float]:
        if len(value) != 5 or any(v < 0 for v in value):
            raise ValueError("lambda_t needs 5 non-negative entries, one per fusion block")
        return value

    @field_validator("ssim_window")
    @classmethod
    def _odd_window(cls, value: int) -> int:
        if value < 1 or value % 2 == 0:
            raise ValueError("ssim_window must be a positive odd integer")
        return value

    @field_validator("ssim_sigma", "ssim_k1", "ssim_k2")
    @classmethod
    def _positive(cls, value: float) -> float:
        if value <= 0:
            raise ValueError("must be positive")
        return value


class FusionMode(str, Enum):
    attention = "attention"
    sum = "sum"
    concat = "concat"


class NetConfig(BaseModel):
    base_channels: int = 32
    scales: int = 3
    fusion_blocks: int = 5
    reduction: int = 4
    fusion_mode: FusionMode = FusionMode.attention

    @model_validator(mode="after")
    def _check(self) -> "NetConfig":
        if self.scales != 3:
            raise ValueError("the network is defined for exactly 3 scales")
        if self.fusion_blocks != 5:
            raise ValueError("the network is defined for exactly 5 fusion blocks")
        if self.reduction < 1 or self.base_channels % self.reduction != 0:
            raise ValueError("base_channels must be divisible by the reduction ratio")
        return self


class Ablation(str, Enum):
    none = "none"
    fuse_sum = "fuse_sum"
    fuse_concat = "fuse_concat"
    fixed_image_weights = "fixed_image_weights"
    fixed_patch_weights = "fixed_patch_weights"
    vgg_depth_3 = "vgg_depth_3"
    vgg_depth_4 = "vgg_depth_4"


class DataConfig(BaseModel):
    manifest: Optional[str] = None
    root: Optional[str] = None
    layout: Literal["paired_dirs", "suffix_pairs"] = "paired_dirs"
    synthetic_pairs: int = 8
    synthetic_size: int = 128


# fields that may change when a run is resumed
RUN_FIELDS = {"epochs", "max_steps", "out_dir", "checkpoint_every", "history_tail"}


class TrainConfig(BaseModel):
    batch_size: int = 4
    epochs: int = 5
    max_steps: Optional[int] = None
    crop: int = 96
    learning_rate: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    seed: int = 0
    ablation: Ablation = Ablation.none
    grad_clip: Optional[float] = None
    checkpoint_every: int = 100
    history_tail: int = 50
    backbone: str = "random"
    backbone_seed: int = 0
    out_dir: Optional[str] = None
    loss: LossConfig = Field(default_factory=LossConfig)
    info: InfoConfig = Field(default_factory=InfoConfig)
    net: NetConfig = Field(default_factory=NetConfig)
    data: DataConfig = Field(default_factory=DataConfig)

    @model_validator(mode="after")
    def _check(self) -> "TrainConfig":
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.crop % 4 != 0 or self.crop < self.info.window:
            raise ValueError(f"crop must be divisible by 4 and >= {self.info.window}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        return self

    @classmethod
    def from_file(cls, path: str, overrides: Optional[List[str]] = None) -> "TrainConfig":
        """Load a JSON config and apply dotted key=value overrides before validation"""
        raw = json.loads(Path(path).read_text(encoding="utf-8")) if path else {}
        return cls.model_validate(apply_overrides(raw, overrides or []))

    def config_hash(self) -> str:
        """Hash of the fields that shape the optimisation; run length and output placement are left out"""
        return config_hash(self, exclude=RUN_FIELDS)


def apply_overrides(raw: Dict[str, Any], overrides: List[str]) -> Dict[str, Any]:
    """Apply `a.b.c=value` overrides; values are parsed as JSON, else kept as strings"""
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"Override '{item}' is not of the form key=value")
        key, value = item.split("=", 1)
        try:
            parsed = json.loads(value)
        except json.JSONDecodeError:
            parsed = value
        node = raw
        parts = key.strip().split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = parsed
    return raw


def config_hash(model: BaseModel, exclude: Optional[set] = None) -> str:
    canonical = json.dumps(model.model_dump(mode="json", exclude=exclude), sort_keys=True)
    return hashlib.sha256(canonical.encode()).hexdigest()


# ---------------------------------------------------------------------------
# Complementary-information weights
# ---------------------------------------------------------------------------
class WeightSet(BaseModel):
    int_ir: float
    int_vis: float
    grad_ir: float
    grad_vis: float

    @model_validator(mode="after")
    def _sums_to_one(self) -> "WeightSet":
        for a, b, name in ((self.int_ir, self.int_vis, "int"), (self.grad_ir, self.grad_vis, "grad")):
            if not (0.0 <= a <= 1.0 and 0.0 <= b <= 1.0):
                raise ValueError(f"{name} weights must lie in [0, 1]")
            if abs(a + b - 1.0) > WEIGHT_TOLERANCE:
                raise ValueError(f"{name} weights must sum to 1, got {a + b}")
        return self

    @classmethod
    def uniform(cls) -> "WeightSet":
        return cls(int_ir=0.5, int_vis=0.5, grad_ir=0.5, grad_vis=0.5)

    def swapped(self) -> "WeightSet":
        return WeightSet(int_ir=self.int_vis, int_vis=self.int_ir, grad_ir=self.grad_vis, grad_vis=self.grad_ir)

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.int_ir, self.int_vis, self.grad_ir, self.grad_vis)


class PatchWeightGrid(BaseModel):
    window: int
    stride: int
    rows: int
    cols: int
    origins: List[Tuple[int, int]]  # (y, x), row-major
    cells: List[WeightSet]

    @model_validator(mode="after")
    def _covers(self) -> "PatchWeightGrid":
        if len(self.origins) != self.rows * self.cols or len(self.cells) != len(self.origins):
            raise ValueError("origins and cells must hold rows * cols entries")
        return self

    @staticmethod
    def tile_origins(height: int, width: int, window: int, stride: int) -> Tuple[int, int, List[Tuple[int, int]]]:
        """Non-overlapping tiling; partial windows at the right/bottom edge are dropped"""
        rows = (height - window) // stride + 1
        cols = (width - window) // stride + 1
        origins = [(r * stride, c * stride) for r in range(rows) for c in range(cols)]
        return rows, cols, origins

    @classmethod
    def uniform(cls, height: int, width: int, window: int = 21, stride: int = 21) -> "PatchWeightGrid":
        rows, cols, origins = cls.tile_origins(height, width, window, stride)
        return cls(
            window=window, stride=stride, rows=rows, cols=cols,
            origins=origins, cells=[WeightSet.uniform() for _ in origins],
        )

    def cell(self, row: int, col: int) -> WeightSet:
        return self.cells[row * self.cols + col]

    def to_records(self) -> List[Dict[str, float]]:
        return [
            {"row": i // self.cols, "col": i % self.cols, "y": y, "x": x, **cell.model_dump()}
            for i, ((y, x), cell) in enumerate(zip(self.origins, self.cells))
        ]


# ---------------------------------------------------------------------------
# Images, datasets and features
# ---------------------------------------------------------------------------
class ImagePair(BaseModel):
    ir: np.ndarray
    vis: np.ndarray
    vis_y: np.ndarray
    vis_cb: np.ndarray
    vis_cr: np.ndarray
    identifier: str
    target_mask: Optional[np.ndarray] = None  # set only for synthetic pairs

    class Config:
        arbitrary_types_allowed = True

    @model_validator(mode="after")
    def _registered(self) -> "ImagePair":
        if self.ir.ndim != 2:
            raise ValueError("ir must be a single-channel H x W array")
        if self.vis.ndim != 3 or self.vis.shape[2] != 3:
            raise ValueError("vis must be an H x W x 3 array")
        shape = self.ir.shape
        for name in ("vis_y", "vis_cb", "vis_cr"):
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} shape does not match ir {shape}")
        if self.vis.shape[:2] != shape:
            raise ValueError(f"ir {shape} and vis {self.vis.shape[:2]} are not the same size")
        return self

    @property
    def height(self) -> int:
        return self.ir.shape[0]

    @property
    def width(self) -> int:
        return self.ir.shape[1]


class ManifestEntry(BaseModel):
    id: str
    ir: str
    vis: str


class DatasetManifest(BaseModel):
    root: str
    layout: Literal["paired_dirs", "suffix_pairs", "jsonl"] = "paired_dirs"
    split: Literal["train", "eval"] = "train"
    entries: List[ManifestEntry] = Field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)


class PerceptualFeatures(BaseModel):
    stages: List[torch.Tensor]  # per stage C x H x W, pre-pool activations
    source_tag: Literal["ir", "vis", "fused"]

    class Config:
        arbitrary_types_allowed = True

    @model_validator(mode="after")
    def _vgg_shapes(self) -> "PerceptualFeatures":
        for i, stage in enumerate(self.stages):
            if stage.dim() != 3 or stage.shape[0] != VGG_STAGE_CHANNELS[i]:
                raise ValueError(f"stage {i + 1} must have {VGG_STAGE_CHANNELS[i]} channels, got {tuple(stage.shape)}")
        return self

    @property
    def stage1(self) -> torch.Tensor:
        return self.stages[0]

    @property
    def stage2(self) -> torch.Tensor:
        return self.stages[1]

    @property
    def depth(self) -> int:
        return len(self.stages)


# ---------------------------------------------------------------------------
# Archives and run records
# ---------------------------------------------------------------------------
class ArrayEntry(BaseModel):
    name: str
    shape: List[int]
    checksum: str


class BackboneWeights(BaseModel):
    arrays: Dict[str, torch.Tensor]  # kernels HWIO, biases 1-D
    provenance: Literal["pretrained", "random_seeded"]
    manifest: List[ArrayEntry] = Field(default_factory=list)

    class Config:
        arbitrary_types_allowed = True

    @property
    def depth(self) -> int:
        stages = {int(name[4]) for name in self.arrays if name.startswith("conv")}
        return max(stages) if stages else 0


class ParamManifest(BaseModel):
    format_version: int
    names: List[str]
    shapes: List[List[int]]
    checksum: str
    net_config: NetConfig
    created_at: datetime = Field(default_factory=datetime.utcnow)


class RunManifest(BaseModel):
    run_id: str
    config_hash: str
    seed: int
    ablation: Ablation
    started_at: datetime = Field(default_factory=datetime.utcnow)
    final_step: int = 0
    final_checkpoint: Optional[str] = None


class LossBreakdown(BaseModel):
    total: float
    pixel: float
    image: float
    patch: float
    feature: float
    style: float
    weights: List[WeightSet] = Field(default_factory=list)
    grids: List[PatchWeightGrid] = Field(default_factory=list)

    def csv_row(self, step: int) -> Dict[str, float]:
        """One loss-log row; weights are averaged over the batch"""
        if self.weights:
            mean = np.mean([w.as_tuple() for w in self.weights], axis=0)
        else:
            mean = np.full(4, 0.5)
        return {
            "step": step, "total": self.total, "image": self.image, "patch": self.patch,
            "feature": self.feature, "style": self.style,
            "int_ir": float(mean[0]), "int_vis": float(mean[1]),
            "grad_ir": float(mean[2]), "grad_vis": float(mean[3]),
        }


class ReportMetadata(BaseModel):
    dataset: str
    model_id: Optional[str] = None
    config_hash: str
    evaluated_on: Literal["fused_y"] = "fused_y"
    metrics: List[str]
    created_at: datetime = Field(default_factory=datetime.utcnow)


class MetricsReport(BaseModel):
    per_image: Dict[str, Dict[str, float]]
    mean: Dict[str, float]
    metadata: ReportMetadata


class ModelParams(BaseModel):
    tensors: Dict[str, torch.Tensor]  # state_dict of MDANet
    manifest: ParamManifest

    class Config:
        arbitrary_types_allowed = True


class Checkpoint(BaseModel):
    params: ModelParams
    optimizer: Dict[str, Any]
    step: int
    config_hash: str
    train_config: Dict[str, Any]
    history: List[Dict[str, float]] = Field(default_factory=list)

    class Config:
        arbitrary_types_allowed = True
