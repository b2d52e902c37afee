import hashlib
import logging
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from models.exceptions import IntegrityError, PreconditionError
from models.schemas import ArrayEntry, BackboneWeights, PerceptualFeatures

logger = logging.getLogger(__name__)

BACKBONE_FORMAT = "vgg16-backbone"

# conv layers before each of the five max-pooling layers of VGG-16
VGG16_STAGES: Dict[int, List[str]] = {
    1: ["conv1_1", "conv1_2"],
    2: ["conv2_1", "conv2_2"],
    3: ["conv3_1", "conv3_2", "conv3_3"],
    4: ["conv4_1", "conv4_2", "conv4_3"],
    5: ["conv5_1", "conv5_2", "conv5_3"],
}
VGG16_WIDTHS = {1: 64, 2: 128, 3: 256, 4: 512, 5: 512}

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


def layer_shapes(depth: int = 5) -> Dict[str, tuple]:
    """Expected HWIO kernel shapes for every conv layer up to `depth`"""
    shapes = {}
    in_channels = 3
    for stage in range(1, depth + 1):
        out_channels = VGG16_WIDTHS[stage]
        for name in VGG16_STAGES[stage]:
            shapes[name] = (3, 3, in_channels, out_channels)
            in_channels = out_channels
    return shapes


def array_checksum(array: torch.Tensor) -> str:
    return hashlib.sha256(array.detach().cpu().contiguous().numpy().tobytes()).hexdigest()


def _manifest(arrays: Dict[str, torch.Tensor]) -> List[ArrayEntry]:
    return [ArrayEntry(name=name, shape=list(array.shape), checksum=array_checksum(array)) for name, array in sorted(arrays.items())]


def random_backbone(seed: int, depth: int = 2) -> BackboneWeights:
    """
    Seeded Kaiming-uniform VGG-16 weights with zero biases

    Layers are drawn in network order from one generator, so the first
    stages are identical whatever `depth` is requested.
    """
    generator = torch.Generator().manual_seed(seed)
    arrays = {}
    for name, shape in layer_shapes(depth).items():
        fan_in = shape[0] * shape[1] * shape[2]
        bound = np.sqrt(6.0 / fan_in)
        arrays[f"{name}.w"] = (torch.rand(shape, generator=generator, dtype=torch.float32) * 2.0 - 1.0) * bound
        arrays[f"{name}.b"] = torch.zeros(shape[3], dtype=torch.float32)
    return BackboneWeights(arrays=arrays, provenance="random_seeded", manifest=_manifest(arrays))


def torchvision_backbone(depth: int = 5) -> BackboneWeights:
    """Convert torchvision's ImageNet VGG-16 into the backbone archive layout"""
    from torchvision.models import VGG16_Weights, vgg16

    features = vgg16(weights=VGG16_Weights.IMAGENET1K_V1).features
    convs = [m for m in features if isinstance(m, nn.Conv2d)]
    names = [name for stage in range(1, depth + 1) for name in VGG16_STAGES[stage]]
    arrays = {}
    for name, conv in zip(names, convs):
        arrays[f"{name}.w"] = conv.weight.detach().permute(2, 3, 1, 0).contiguous().float()
        arrays[f"{name}.b"] = conv.bias.detach().clone().float()
    logger.info(f"✓ Imported torchvision VGG-16 weights ({len(names)} conv layers)")
    return BackboneWeights(arrays=arrays, provenance="pretrained", manifest=_manifest(arrays))


def save_backbone(weights: BackboneWeights, path: str) -> Path:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format": BACKBONE_FORMAT,
            "provenance": weights.provenance,
            "manifest": [entry.model_dump() for entry in _manifest(weights.arrays)],
            "arrays": weights.arrays,
        },
        out,
    )
    return out


def _read_archive(path: Path) -> BackboneWeights:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:
        raise IntegrityError(f"Backbone archive {path} is unreadable: {e}") from e
    if not isinstance(payload, dict) or payload.get("format") != BACKBONE_FORMAT:
        raise IntegrityError(f"{path} is not a backbone archive")

    arrays = payload["arrays"]
    manifest = [ArrayEntry(**entry) for entry in payload["manifest"]]
    expected = layer_shapes(5)
    for entry in manifest:
        array = arrays.get(entry.name)
        if array is None:
            raise IntegrityError(f"Array {entry.name} listed in the manifest is missing")
        if list(array.shape) != entry.shape or array_checksum(array) != entry.checksum:
            raise IntegrityError(f"Array {entry.name} does not match its manifest entry")
        layer, kind = entry.name.split(".")
        if kind == "w" and tuple(entry.shape) != expected.get(layer):
            raise IntegrityError(f"Array {entry.name} has shape {entry.shape}, expected {expected.get(layer)}")
    if set(arrays) != {entry.name for entry in manifest}:
        raise IntegrityError("Archive holds arrays that the manifest does not list")
    return BackboneWeights(arrays=arrays, provenance=payload.get("provenance", "pretrained"), manifest=manifest)


def load_backbone(source: str = "random", seed: int = 0, depth: int = 2) -> BackboneWeights:
    """
    Load backbone weights

    Args:
        source: "random" for seeded weights, "torchvision" for the ImageNet
            weights, or the path of a backbone archive
        seed: generator seed for "random"
        depth: number of VGG stages to materialise for "random"

    Returns:
        BackboneWeights with kernels in HWIO layout
    """
    if source == "random":
        return random_backbone(seed, depth)
    if source == "torchvision":
        return torchvision_backbone(max(depth, 2))
    path = Path(source)
    if not path.is_file():
        raise PreconditionError(f"Backbone weights not found: {source}")
    return _read_archive(path)


class VGGBackbone(nn.Module):
    """Frozen VGG-16 trunk returning the pre-pool activations of each stage"""

    def __init__(self, weights: BackboneWeights, depth: int = 2):
        super().__init__()
        if not 1 <= depth <= 5:
            raise PreconditionError(f"depth must be in 1..5, got {depth}")
        if weights.depth < depth:
            raise PreconditionError(f"Backbone weights cover {weights.depth} stages, {depth} requested")

        self.depth = depth
        self.provenance = weights.provenance
        self.stages = nn.ModuleList()
        for stage in range(1, depth + 1):
            layers = []
            for name in VGG16_STAGES[stage]:
                kernel = weights.arrays[f"{name}.w"]
                conv = nn.Conv2d(kernel.shape[2], kernel.shape[3], kernel_size=3, padding=1)
                with torch.no_grad():
                    conv.weight.copy_(kernel.permute(3, 2, 0, 1))
                    conv.bias.copy_(weights.arrays[f"{name}.b"])
                layers += [conv, nn.ReLU()]
            self.stages.append(nn.Sequential(*layers))

        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))
        self.requires_grad_(False)
        self.eval()

    def forward(self, x: torch.Tensor, depth: Optional[int] = None, normalize: bool = True) -> List[torch.Tensor]:
        """
        Args:
            x: N x 1 x H x W grayscale batch in [0, 1] (or already N x 3)
            depth: stages to return, default all built stages
            normalize: apply the ImageNet mean/std normalisation

        Returns:
            list of `depth` maps, stage i of shape N x C_i x H/2^(i-1) x W/2^(i-1)
        """
        depth = depth or self.depth
        if not 1 <= depth <= self.depth:
            raise PreconditionError(f"depth must be in 1..{self.depth}, got {depth}")
        if x.shape[1] == 1:
            x = x.expand(-1, 3, -1, -1)
        if normalize:
            x = (x - self.mean) / self.std
        outputs = []
        for i in range(depth):
            if i > 0:
                x = F.max_pool2d(x, 2)
            x = self.stages[i](x)
            outputs.append(x)
        return outputs

    def perceptual_features(self, img: torch.Tensor, source_tag: str, depth: Optional[int] = None) -> PerceptualFeatures:
        """Single-image features without gradient tracking"""
        with torch.no_grad():
            stages = extract_features(img, self, depth or self.depth)
        return PerceptualFeatures(stages=[s[0] for s in stages], source_tag=source_tag)


def _as_batch(img: Union[np.ndarray, torch.Tensor]) -> torch.Tensor:
    if isinstance(img, np.ndarray):
        img = torch.from_numpy(np.ascontiguousarray(img)).float()
    while img.dim() < 4:
        img = img.unsqueeze(0)
    return img


def extract_features(
    img: Union[np.ndarray, torch.Tensor],
    backbone: VGGBackbone,
    depth: int = 2,
    normalize: bool = True,
) -> List[torch.Tensor]:
    """Pre-pool feature maps of the first `depth` VGG-16 stages for a gray image"""
    if not 1 <= depth <= 5:
        raise PreconditionError(f"depth must be in 1..5, got {depth}")
    x = _as_batch(img)
    param = next(backbone.parameters())
    return backbone(x.to(dtype=param.dtype, device=param.device), depth, normalize)
