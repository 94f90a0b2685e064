"""Attention-based multiple instance classifier for bags of image patches.

One CNN with shared weights maps every patch to a feature vector and a raw
attention score. Scores are softmax-normalized over the bag, the bag feature
is the attention-weighted average of the patch features, and a single logistic
unit turns it into a malignancy probability.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import BoundingBox
from .runtime import is_deterministic

__all__ = [
    "BagOutput",
    "ConvBlock",
    "MILNet",
    "PatchEncoder",
    "PatchEncoderConfig",
    "aggregate_bag",
    "bag_bce_loss",
    "classify_bag",
    "encode_patch",
    "load_mil",
    "oversample_schedule",
    "prediction_to_json",
    "save_mil",
]

PROB_EPS = 1e-7


@dataclass(frozen=True)
class ConvBlock:
    filters: int
    stride: int = 1
    pool: bool = True


@dataclass(frozen=True)
class PatchEncoderConfig:
    conv_blocks: tuple[ConvBlock, ...] = (ConvBlock(32), ConvBlock(64), ConvBlock(128), ConvBlock(256))
    embedding_dim: int = 512
    attention: str = "linear"  # or "gated"
    attention_hidden: int = 128
    padding: str = "same"  # or "valid"
    patch_size: int = 64

    def __post_init__(self) -> None:
        blocks = tuple(b if isinstance(b, ConvBlock) else ConvBlock(**b) for b in self.conv_blocks)
        object.__setattr__(self, "conv_blocks", blocks)
        if self.attention not in ("linear", "gated"):
            raise ValueError(f"unknown attention type {self.attention!r}")
        if self.padding not in ("same", "valid"):
            raise ValueError(f"unknown padding {self.padding!r}")
        if not blocks or self.embedding_dim < 1:
            raise ValueError("need at least one conv block and embedding_dim >= 1")
        if self.final_spatial() < 1:
            raise ValueError("conv blocks reduce the patch below 1x1")

    def final_spatial(self) -> int:
        s = self.patch_size
        for b in self.conv_blocks:
            if self.padding == "valid":
                s -= 2
            s = (s - 1) // b.stride + 1
            if b.pool:
                s //= 2
        return s

    def pool_stride(self) -> int:
        """Total downsampling factor of the trunk."""
        f = 1
        for b in self.conv_blocks:
            f *= b.stride * (2 if b.pool else 1)
        return f

    def supports_dense(self) -> bool:
        """Whether windows on a pool-stride grid can be encoded with one full-image pass.

        With unpadded unit-stride convolutions every window's trunk output is an
        exact sub-block of the trunk output of the whole image.
        """
        return self.padding == "valid" and all(b.stride == 1 for b in self.conv_blocks)

    def to_json(self) -> dict:
        d = asdict(self)
        d["conv_blocks"] = [asdict(b) for b in self.conv_blocks]
        return d


class PatchEncoder(nn.Module):
    """Conv trunk -> global average pool -> linear embedding, plus a scalar attention score."""

    def __init__(self, cfg: PatchEncoderConfig = PatchEncoderConfig()):
        super().__init__()
        self.cfg = cfg
        layers: list[nn.Module] = []
        c_in = 1
        pad = 1 if cfg.padding == "same" else 0
        for b in cfg.conv_blocks:
            layers += [nn.Conv2d(c_in, b.filters, 3, stride=b.stride, padding=pad), nn.ReLU(inplace=True)]
            if b.pool:
                layers.append(nn.MaxPool2d(2))
            c_in = b.filters
        self.trunk = nn.Sequential(*layers)
        # He init keeps activation scale through the unnormalized ReLU stack;
        # the framework default shrinks it enough to stall plain SGD
        for m in self.trunk:
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                nn.init.zeros_(m.bias)
        self.embed = nn.Linear(c_in, cfg.embedding_dim)
        if cfg.attention == "linear":
            self.attention = nn.Linear(cfg.embedding_dim, 1)
        else:
            self.attention_v = nn.Linear(cfg.embedding_dim, cfg.attention_hidden)
            self.attention_u = nn.Linear(cfg.embedding_dim, cfg.attention_hidden)
            self.attention = nn.Linear(cfg.attention_hidden, 1)

    def score(self, features: torch.Tensor) -> torch.Tensor:
        if self.cfg.attention == "linear":
            return self.attention(features).squeeze(-1)
        gate = torch.tanh(self.attention_v(features)) * torch.sigmoid(self.attention_u(features))
        return self.attention(gate).squeeze(-1)

    def forward(self, patches: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(N, 1, S, S) -> features (N, E), raw scores (N,)."""
        x = self.trunk(patches)
        features = self.embed(x.mean(dim=(2, 3)))
        return features, self.score(features)

    def forward_dense(self, image: torch.Tensor, origins: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Encode the windows of one (H, W) image at ``origins`` [(x, y), ...] with a single trunk pass.

        Equals ``forward`` on the cropped windows up to floating-point rounding.
        Requires ``cfg.supports_dense()`` and origins on the pool-stride grid.
        """
        if not self.cfg.supports_dense():
            raise ValueError("encoder configuration does not support dense evaluation")
        stride = self.cfg.pool_stride()
        if torch.any(origins % stride != 0):
            raise ValueError(f"dense origins must be multiples of {stride}")
        x = self.trunk(image.reshape(1, 1, *image.shape[-2:]))
        s = self.cfg.final_spatial()
        pooled = F.avg_pool2d(x, s, stride=1)[0]  # (C, H', W')
        cols = origins[:, 0] // stride
        rows = origins[:, 1] // stride
        features = self.embed(pooled[:, rows, cols].T)
        return features, self.score(features)


def _canonical_order(features: torch.Tensor, scores: torch.Tensor) -> torch.Tensor:
    keys = torch.cat([features, scores[:, None]], dim=1).detach().cpu().numpy()
    # primary key is the raw score (lexsort sorts by its last key first)
    return torch.as_tensor(np.lexsort(keys.T), dtype=torch.long)


def _aggregate(features: torch.Tensor, scores: torch.Tensor, canonical: bool | None = None):
    """Softmax over raw scores and the weighted feature sum; returns (weights, global_feature)."""
    if canonical is None:
        canonical = is_deterministic()
    if canonical and len(scores) > 1:
        perm = _canonical_order(features, scores)
        inv = torch.empty_like(perm)
        inv[perm] = torch.arange(len(perm))
        w_sorted, g = _aggregate(features[perm], scores[perm], canonical=False)
        return w_sorted[inv], g
    shifted = scores - scores.max()
    e = torch.exp(shifted)
    weights = e / e.sum()
    return weights, (weights[:, None] * features).sum(dim=0)


class MILNet(nn.Module):
    def __init__(self, cfg: PatchEncoderConfig = PatchEncoderConfig()):
        super().__init__()
        self.cfg = cfg
        self.encoder = PatchEncoder(cfg)
        self.head = nn.Linear(cfg.embedding_dim, 1)

    def _finish(self, features, scores) -> dict[str, torch.Tensor]:
        weights, g = _aggregate(features, scores)
        logit = self.head(g).squeeze(-1)
        return {
            "features": features,
            "raw_scores": scores,
            "weights": weights,
            "global_feature": g,
            "logit": logit,
            "probability": torch.sigmoid(logit),
        }

    def forward(self, patches: torch.Tensor) -> dict[str, torch.Tensor]:
        if patches.dim() == 3:
            patches = patches[:, None]
        if len(patches) == 0:
            raise ValueError("empty bag")
        return self._finish(*self.encoder(patches))

    def forward_dense(self, image: torch.Tensor, origins: torch.Tensor) -> dict[str, torch.Tensor]:
        if len(origins) == 0:
            raise ValueError("empty bag")
        return self._finish(*self.encoder.forward_dense(image, origins))

    def forward_bag(self, bag) -> dict[str, torch.Tensor]:
        dtype = next(self.parameters()).dtype
        image = getattr(bag, "image", None)
        if image is not None and self.cfg.supports_dense() \
                and np.all(np.asarray(bag.origins) % self.cfg.pool_stride() == 0):
            return self.forward_dense(torch.as_tensor(image, dtype=dtype),
                                      torch.as_tensor(np.asarray(bag.origins), dtype=torch.long))
        return self.forward(torch.as_tensor(np.asarray(bag.patches), dtype=dtype))


@dataclass
class BagOutput:
    features: np.ndarray
    raw_scores: np.ndarray
    weights: np.ndarray
    global_feature: np.ndarray
    probability: float


def encode_patch(patch: np.ndarray, model: MILNet) -> tuple[np.ndarray, float]:
    patch = np.asarray(patch)
    s = model.cfg.patch_size
    if patch.shape != (s, s):
        raise ValueError(f"patch must be {s}x{s}, got {patch.shape}")
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        f, a = model.encoder(torch.as_tensor(patch, dtype=dtype)[None, None])
    return f[0].numpy().copy(), float(a[0])


def aggregate_bag(features, raw_scores) -> tuple[np.ndarray, np.ndarray]:
    """Softmax-normalized attention weights and the weighted-average bag feature."""
    f = torch.as_tensor(np.asarray(features, dtype=np.float64))
    a = torch.as_tensor(np.asarray(raw_scores, dtype=np.float64)).reshape(-1)
    if f.dim() != 2 or len(f) != len(a) or len(a) == 0:
        raise ValueError("need N >= 1 features of shape (N, E) and N raw scores")
    w, g = _aggregate(f, a)
    return w.numpy(), g.numpy()


def classify_bag(bag, model: MILNet) -> BagOutput:
    if bag is None or len(bag) == 0:
        raise ValueError("empty bag")
    was_training = model.training
    model.eval()
    with torch.no_grad():
        out = model.forward_bag(bag)
    model.train(was_training)
    return BagOutput(
        features=out["features"].numpy(),
        raw_scores=out["raw_scores"].numpy(),
        weights=out["weights"].numpy(),
        global_feature=out["global_feature"].numpy(),
        probability=float(out["probability"]),
    )


def bag_bce_loss(probability, label):
    """-[y log p + (1-y) log(1-p)] with p clamped to [1e-7, 1 - 1e-7]."""
    if isinstance(probability, torch.Tensor):
        p = probability.clamp(PROB_EPS, 1.0 - PROB_EPS)
        y = torch.as_tensor(label, dtype=p.dtype)
        return -(y * torch.log(p) + (1 - y) * torch.log1p(-p))
    p = min(max(float(probability), PROB_EPS), 1.0 - PROB_EPS)
    return -(label * np.log(p) + (1 - label) * np.log1p(-p))


def oversample_schedule(items, target_ratio: float = 1.0,
                        rng: np.random.Generator | None = None) -> list[str]:
    """Shuffled epoch sequence with malignant images repeated up to ``target_ratio`` x #benign.

    Each malignant image appears ``T // M`` times and a random ``T % M`` of them
    once more, where ``T = round(target_ratio * B)``; nothing is repeated when
    the malignant class already reaches the target.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    items = [(str(i), int(y)) for i, y in items]
    benign = [i for i, y in items if y == 0]
    malignant = [i for i, y in items if y == 1]
    if not benign or not malignant:
        raise ValueError("oversampling needs both classes")
    target = int(round(target_ratio * len(benign)))
    seq = list(benign)
    if target <= len(malignant):
        seq += malignant
    else:
        reps, extra = divmod(target, len(malignant))
        seq += malignant * reps
        seq += [malignant[j] for j in sorted(rng.choice(len(malignant), size=extra, replace=False))]
    order = rng.permutation(len(seq))
    return [seq[j] for j in order]


def prediction_to_json(image_id: str, out: BagOutput, boxes: list[BoundingBox]) -> dict:
    return {
        "image_id": image_id,
        "probability": out.probability,
        "weights": [float(w) for w in out.weights],
        "boxes": [b.to_dict() for b in boxes],
    }


def save_mil(path: str | Path, model: MILNet, extra: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), path.with_suffix(".pt"))
    sidecar = {"encoder": model.cfg.to_json()}
    sidecar.update(extra or {})
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))


@dataclass
class MILCheckpoint:
    model: MILNet
    provenance: dict = field(default_factory=dict)


def load_mil(path: str | Path) -> MILCheckpoint:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    cfg = PatchEncoderConfig(**meta.pop("encoder"))
    model = MILNet(cfg)
    model.load_state_dict(torch.load(path.with_suffix(".pt"), weights_only=True))
    model.eval()
    return MILCheckpoint(model=model, provenance=meta.get("provenance", {}))
