"""Backbone / bottleneck / classifier network and the source-training objective."""
from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import NumericError, ValidationError

GROUPS = ("backbone", "bottleneck", "classifier")


class ConvEncoder(nn.Module):
    """Four conv-BN-ReLU blocks with 2x downsampling, global average pooled."""

    def __init__(self, in_channels=3, widths=(16, 32, 64, 64)):
        super().__init__()
        layers = []
        c = in_channels
        for w in widths:
            layers += [nn.Conv2d(c, w, 3, padding=1, bias=False), nn.BatchNorm2d(w),
                       nn.ReLU(inplace=True), nn.MaxPool2d(2)]
            c = w
        self.body = nn.Sequential(*layers)
        self.out_dim = c

    def forward(self, x):
        return self.body(x).mean(dim=(2, 3))


class AttentionEncoder(nn.Module):
    """Patch embedding followed by pre-norm self-attention blocks; mean-pooled tokens."""

    def __init__(self, in_channels=3, image_size=32, patch=4, dim=96, depth=4, heads=4):
        super().__init__()
        if image_size % patch:
            raise ValidationError(f"image size {image_size} not divisible by patch {patch}")
        self.embed = nn.Conv2d(in_channels, dim, patch, stride=patch)
        self.pos = nn.Parameter(torch.zeros(1, (image_size // patch) ** 2, dim))
        nn.init.trunc_normal_(self.pos, std=0.02)
        block = nn.TransformerEncoderLayer(dim, heads, dim_feedforward=2 * dim, dropout=0.0,
                                           activation="gelu", batch_first=True, norm_first=True)
        self.blocks = nn.TransformerEncoder(block, depth, enable_nested_tensor=False)
        self.norm = nn.LayerNorm(dim)
        self.out_dim = dim

    def forward(self, x):
        tokens = self.embed(x).flatten(2).transpose(1, 2) + self.pos
        return self.norm(self.blocks(tokens)).mean(dim=1)


class TorchvisionEncoder(nn.Module):
    def __init__(self, name: str, weights_path: str | None = None):
        super().__init__()
        import torchvision

        net = getattr(torchvision.models, name)(weights=None)
        if weights_path:
            net.load_state_dict(torch.load(weights_path, map_location="cpu"))
        self.out_dim = net.fc.in_features
        net.fc = nn.Identity()
        self.net = net

    def forward(self, x):
        return self.net(x)


def make_backbone(backbone_id: str, in_channels=3, image_size=32, weights_path=None) -> nn.Module:
    if backbone_id == "conv4":
        return ConvEncoder(in_channels)
    if backbone_id == "attn4":
        return AttentionEncoder(in_channels, image_size)
    if backbone_id in ("resnet18", "resnet34", "resnet50", "resnet101"):
        return TorchvisionEncoder(backbone_id, weights_path)
    raise ValidationError(f"unknown backbone {backbone_id!r}")


class NetworkAssembly(nn.Module):
    """``classifier(bottleneck(backbone(x)))``.

    The bottleneck is an affine projection followed by batch norm; its output is
    the feature space used for pseudo-label clustering.
    """

    def __init__(self, backbone_id="conv4", num_classes=4, bottleneck_dim=256, image_size=32,
                 in_channels=3, weights_path=None):
        super().__init__()
        self.backbone_id = backbone_id
        self.num_classes = num_classes
        self.image_size = image_size
        self.in_channels = in_channels
        self.backbone = make_backbone(backbone_id, in_channels, image_size, weights_path)
        self.bottleneck = nn.Sequential(nn.Linear(self.backbone.out_dim, bottleneck_dim),
                                        nn.BatchNorm1d(bottleneck_dim))
        self.classifier = nn.Linear(bottleneck_dim, num_classes)

    @property
    def bottleneck_dim(self) -> int:
        return self.classifier.in_features

    def forward(self, x):
        return self.classifier(self.bottleneck(self.backbone(x)))

    def group(self, name: str) -> nn.Module:
        if name not in GROUPS:
            raise ValidationError(f"unknown parameter group {name!r}; expected one of {GROUPS}")
        return getattr(self, name)


def forward_features(assembly: NetworkAssembly, batch: torch.Tensor):
    """Return ``(bottleneck features, logits)`` for a batch of images."""
    expected = (assembly.in_channels, assembly.image_size, assembly.image_size)
    if batch.ndim != 4 or tuple(batch.shape[1:]) != expected:
        raise ValidationError(f"expected images of shape (B, {', '.join(map(str, expected))}), "
                              f"got {tuple(batch.shape)}")
    feats = assembly.bottleneck(assembly.backbone(batch))
    return feats, assembly.classifier(feats)


def set_trainable(assembly: NetworkAssembly, groups: dict[str, bool]) -> None:
    for name, flag in groups.items():
        for p in assembly.group(name).parameters():
            p.requires_grad_(bool(flag))


def trainable_groups(assembly: NetworkAssembly) -> dict[str, bool]:
    return {g: any(p.requires_grad for p in assembly.group(g).parameters()) for g in GROUPS}


def smooth_labels(one_hot, alpha: float):
    """Label smoothing: ``(1 - alpha) * q + alpha / K``.

    Accepts a single K-vector or a batch of them (numpy or torch).
    """
    if not 0.0 <= alpha < 1.0:
        raise ValidationError(f"smoothing alpha must lie in [0, 1), got {alpha}")
    q = one_hot
    arr = q.detach().cpu().numpy() if isinstance(q, torch.Tensor) else np.asarray(q)
    rows = arr.reshape(-1, arr.shape[-1])
    if not (np.isin(rows, (0, 1)).all() and (rows.sum(axis=1) == 1).all()):
        raise ValidationError("smooth_labels expects one-hot rows")
    if alpha == 0:
        return q
    K = arr.shape[-1]
    return (1 - alpha) * q + alpha / K


def source_ce_loss(logits: torch.Tensor, smoothed_targets: torch.Tensor) -> torch.Tensor:
    bad = ~torch.isfinite(logits.detach()).all(dim=1)
    if bad.any():
        raise NumericError(f"non-finite logits at batch index {int(torch.nonzero(bad)[0])}")
    sums = smoothed_targets.detach().sum(dim=1)
    if ((sums - 1).abs() > 1e-6).any():
        raise ValidationError("each target row must sum to 1")
    return -(smoothed_targets.to(logits.dtype) * F.log_softmax(logits, dim=1)).sum(dim=1).mean()


@dataclass
class Checkpoint:
    """Parameter blobs per group plus provenance metadata."""

    state: dict[str, dict[str, torch.Tensor]]
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_assembly(cls, assembly: NetworkAssembly, **meta) -> "Checkpoint":
        state = {g: {k: v.detach().clone() for k, v in assembly.group(g).state_dict().items()}
                 for g in GROUPS}
        meta = {"backbone_id": assembly.backbone_id, "num_classes": assembly.num_classes,
                "bottleneck_dim": assembly.bottleneck_dim, "image_size": assembly.image_size,
                "in_channels": assembly.in_channels, **meta}
        return cls(state, meta)

    def build(self) -> NetworkAssembly:
        m = self.meta
        net = NetworkAssembly(m["backbone_id"], m["num_classes"], m["bottleneck_dim"],
                              m["image_size"], m.get("in_channels", 3))
        self.load_into(net)
        return net

    def load_into(self, assembly: NetworkAssembly) -> None:
        if assembly.backbone_id != self.meta["backbone_id"]:
            raise ValidationError(f"checkpoint backbone {self.meta['backbone_id']!r} "
                                  f"does not match {assembly.backbone_id!r}")
        if assembly.num_classes != self.meta["num_classes"]:
            raise ValidationError(f"checkpoint has K={self.meta['num_classes']}, "
                                  f"network has K={assembly.num_classes}")
        for g in GROUPS:
            assembly.group(g).load_state_dict(self.state[g])

    def digest(self) -> str:
        h = hashlib.sha256()
        for g in GROUPS:
            for k in sorted(self.state[g]):
                h.update(f"{g}.{k}".encode())
                h.update(self.state[g][k].cpu().contiguous().numpy().tobytes())
        return h.hexdigest()[:16]

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        buf = io.BytesIO()
        torch.save({"groups": self.state, "meta": self.meta}, buf)
        path.write_bytes(buf.getvalue())
        return path

    @classmethod
    def load(cls, path, backbone_id: str | None = None, num_classes: int | None = None) -> "Checkpoint":
        blob = torch.load(Path(path), map_location="cpu", weights_only=True)
        ckpt = cls(blob["groups"], blob["meta"])
        if backbone_id is not None and ckpt.meta["backbone_id"] != backbone_id:
            raise ValidationError(f"{path}: backbone {ckpt.meta['backbone_id']!r}, expected {backbone_id!r}")
        if num_classes is not None and ckpt.meta["num_classes"] != num_classes:
            raise ValidationError(f"{path}: K={ckpt.meta['num_classes']}, expected {num_classes}")
        return ckpt
