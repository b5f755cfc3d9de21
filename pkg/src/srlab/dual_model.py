"""Point encoder, shared cosine prototype classifier, augmentation and loss terms."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import LabelOutOfRange, NonFiniteInput, ShapeMismatch, ZeroFeature
from .ot_core import TransportPlan
from .region_graph import RegionPartition, pool_region_features

CHECKPOINT_FORMAT = "srlab-checkpoint/1"
MAX_SCALE_DELTA = 0.05
MAX_ANGLE = math.pi / 20


class PointEncoder(nn.Module):
    """Pointwise MLP mapping coordinates to D-dimensional features.

    Coordinates are multiplied by ``input_scale`` before the first layer.
    """

    def __init__(self, widths=(3, 64, 64, 32), input_scale: float = 1.0):
        super().__init__()
        self.widths = tuple(int(w) for w in widths)
        self.input_scale = float(input_scale)
        self.layers = nn.ModuleList(
            nn.Linear(a, b) for a, b in zip(self.widths[:-1], self.widths[1:])
        )

    @property
    def out_dim(self) -> int:
        return self.widths[-1]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x * self.input_scale
        for k, layer in enumerate(self.layers):
            x = layer(x)
            if k < len(self.layers) - 1:
                x = F.silu(x)
        return x


class PrototypeBank(nn.Module):
    """Unit-norm class prototypes (D x C), known classes first, shared by points and regions."""

    def __init__(self, dim: int, n_known: int, n_novel: int, tau: float = 0.1):
        super().__init__()
        if tau <= 0:
            raise ValueError(f"tau must be > 0, got {tau}")
        self.n_known = n_known
        self.n_novel = n_novel
        self.tau = tau
        self.prototypes = nn.Parameter(torch.randn(dim, n_known + n_novel))
        self.renormalize()

    @torch.no_grad()
    def renormalize(self) -> None:
        self.prototypes.div_(self.prototypes.norm(dim=0, keepdim=True).clamp_min(1e-12))

    @property
    def known_columns(self) -> slice:
        return slice(0, self.n_known)

    @property
    def novel_columns(self) -> slice:
        return slice(self.n_known, self.n_known + self.n_novel)


def cosine_logits(features: torch.Tensor, bank: PrototypeBank, columns: slice | None = None) -> torch.Tensor:
    norms = features.norm(dim=1, keepdim=True)
    if features.shape[0] and norms.min() < 1e-12:
        raise ZeroFeature("feature row with norm < 1e-12 has no direction")
    protos = bank.prototypes if columns is None else bank.prototypes[:, columns]
    protos = protos / protos.norm(dim=0, keepdim=True)
    return (features / norms) @ protos / bank.tau


def classify(features, bank: PrototypeBank, columns: slice | None = None, log: bool = False):
    """Softmax over cosine similarities to the selected prototypes, scaled by 1/tau."""
    logits = cosine_logits(torch.as_tensor(features, dtype=bank.prototypes.dtype), bank, columns)
    return F.log_softmax(logits, dim=1) if log else F.softmax(logits, dim=1)


class DualModel(nn.Module):
    def __init__(self, n_known: int, n_novel: int, widths=(3, 64, 64, 32), tau: float = 0.1, input_scale: float = 1.0):
        super().__init__()
        self.encoder = PointEncoder(widths, input_scale)
        self.bank = PrototypeBank(self.encoder.out_dim, n_known, n_novel, tau)

    def encode(self, points) -> torch.Tensor:
        return encode(points, self.encoder)

    def point_log_probs(self, feats: torch.Tensor, columns: slice) -> torch.Tensor:
        return classify(feats, self.bank, columns, log=True)

    def region_log_probs(self, feats: torch.Tensor, part: RegionPartition, columns: slice) -> torch.Tensor:
        return classify(pool_region_features(feats, part), self.bank, columns, log=True)

    @torch.no_grad()
    def predict(self, points, columns: slice | None = None) -> np.ndarray:
        feats = self.encode(points)
        return cosine_logits(feats, self.bank, columns).argmax(dim=1).cpu().numpy()

    def to_dict(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "widths": list(self.encoder.widths),
            "n_known": self.bank.n_known,
            "n_novel": self.bank.n_novel,
            "tau": self.bank.tau,
            "input_scale": self.encoder.input_scale,
            "layers": [
                {"weight": l.weight.detach().tolist(), "bias": l.bias.detach().tolist()}
                for l in self.encoder.layers
            ],
            "prototypes": self.bank.prototypes.detach().tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DualModel":
        if d.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"unsupported checkpoint format {d.get('format')!r}")
        model = cls(d["n_known"], d["n_novel"], d["widths"], d["tau"], d.get("input_scale", 1.0))
        with torch.no_grad():
            for layer, saved in zip(model.encoder.layers, d["layers"]):
                layer.weight.copy_(torch.tensor(saved["weight"]))
                layer.bias.copy_(torch.tensor(saved["bias"]))
            model.bank.prototypes.copy_(torch.tensor(d["prototypes"]))
        return model

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "DualModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def encode(points, encoder: PointEncoder) -> torch.Tensor:
    dtype = encoder.layers[0].weight.dtype
    x = torch.as_tensor(np.asarray(points) if not torch.is_tensor(points) else points, dtype=dtype)
    if not torch.isfinite(x).all():
        raise NonFiniteInput("encoder input contains NaN or Inf")
    return encoder(x)


def supervised_loss(probs, labels, n_known: int | None = None, log: bool = False):
    """Mean negative log-likelihood of the labelled known classes.

    ``probs`` are probabilities (or log-probabilities when ``log=True``) whose
    first ``n_known`` columns are the known classes.
    """
    probs = torch.as_tensor(probs)
    labels = torch.as_tensor(labels, dtype=torch.long)
    n_known = probs.shape[1] if n_known is None else n_known
    if labels.numel() and (labels.min() < 0 or labels.max() >= n_known):
        raise LabelOutOfRange(f"labels must index known columns [0, {n_known})")
    logp = probs if log else torch.log(probs.clamp_min(1e-30))
    return -logp.gather(1, labels[:, None]).mean()


def unsup_loss(plan, log_probs):
    """``(1/M) <Q, -log P>`` with the plan held constant."""
    log_probs = torch.as_tensor(log_probs)
    q = plan.values if isinstance(plan, TransportPlan) else plan
    q = torch.as_tensor(q if torch.is_tensor(q) else np.asarray(q), dtype=log_probs.dtype)
    if q.shape != log_probs.shape:
        raise ShapeMismatch(f"plan {tuple(q.shape)} vs log-probs {tuple(log_probs.shape)}")
    return -(q.detach() * log_probs).sum() / q.shape[0]


def total_loss(ls, lup, lur, alpha: float = 1.0, beta: float = 1.0):
    return ls + alpha * lup + beta * lur


@dataclass
class SceneView:
    points: np.ndarray
    scene_id: int
    scale: float
    angles: tuple[float, float, float]


def rotation_matrix(angles) -> np.ndarray:
    ax, ay, az = angles
    cx, sx, cy, sy, cz, sz = math.cos(ax), math.sin(ax), math.cos(ay), math.sin(ay), math.cos(az), math.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


def apply_view(points, scale: float, angles, scene_id: int = 0) -> SceneView:
    pts = np.asarray(points, dtype=np.float64)
    return SceneView(scale * pts @ rotation_matrix(angles).T, scene_id, float(scale), tuple(float(a) for a in angles))


def augment_views(points, rng_seed, scene_id: int = 0) -> tuple[SceneView, SceneView]:
    """Two independent random similarity transforms of the same points (row order preserved)."""
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) == 0:
        raise ValueError("cannot augment an empty scene")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    views = []
    for _ in range(2):
        scale = rng.uniform(1 - MAX_SCALE_DELTA, 1 + MAX_SCALE_DELTA)
        angles = rng.uniform(-MAX_ANGLE, MAX_ANGLE, size=3)
        views.append(apply_view(pts, scale, angles, scene_id))
    return views[0], views[1]
