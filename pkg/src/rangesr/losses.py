"""Training objectives and class-frequency weighting.

Labels use 0 as the ignore class throughout; per-class weight vectors are
indexed by train id and carry weight 0 at index 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import DegenerateLoss, InvalidConfig, MissingClass, NonFiniteLoss
from .rangeview import IGNORE_INDEX


@dataclass
class ClassWeights:
    frequencies: np.ndarray  # [num_classes], 0 at the ignore index
    weights: np.ndarray  # 1/sqrt(f), 0 at the ignore index

    @property
    def num_classes(self):
        return len(self.weights)

    def tensor(self, device=None, dtype=torch.float32):
        return torch.as_tensor(self.weights, dtype=dtype, device=device)

    @classmethod
    def from_frequencies(cls, freq):
        freq = np.asarray(freq, dtype=np.float64)
        w = np.zeros_like(freq)
        nz = freq > 0
        w[nz] = freq[nz] ** -0.5
        w[IGNORE_INDEX] = 0.0
        return cls(freq, w)

    @classmethod
    def uniform(cls, num_classes):
        w = np.ones(num_classes)
        w[IGNORE_INDEX] = 0.0
        freq = np.full(num_classes, 1.0 / max(num_classes - 1, 1))
        freq[IGNORE_INDEX] = 0.0
        return cls(freq, w)

    def to_table(self) -> str:
        lines = ["# class_id frequency weight"]
        for c in range(len(self.weights)):
            lines.append(f"{c} {self.frequencies[c]:.10g} {self.weights[c]:.10g}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_table(cls, text: str) -> "ClassWeights":
        rows = [ln.split() for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
        try:
            rows = sorted((int(c), float(f), float(w)) for c, f, w in rows)
        except ValueError as exc:
            raise InvalidConfig(f"malformed class-frequency table: {exc}") from exc
        if [r[0] for r in rows] != list(range(len(rows))):
            raise InvalidConfig("class-frequency table must list ids 0..C-1")
        return cls(np.array([r[1] for r in rows]), np.array([r[2] for r in rows]))


def class_weights(label_images, num_classes, ignore_index=IGNORE_INDEX) -> ClassWeights:
    """Per-class pixel frequencies over non-ignore pixels and w = f^(-1/2)."""
    counts = np.zeros(num_classes, dtype=np.int64)
    n_images = 0
    for lab in label_images:
        arr = getattr(lab, "labels", lab)
        arr = np.asarray(arr).reshape(-1)
        counts += np.bincount(arr[arr != ignore_index], minlength=num_classes)[:num_classes]
        n_images += 1
    if n_images == 0:
        raise DegenerateLoss("empty label corpus")
    missing = [c for c in range(num_classes) if c != ignore_index and counts[c] == 0]
    if missing:
        raise MissingClass(missing)
    freq = counts / counts.sum()
    return ClassWeights.from_frequencies(freq)


def _pixel_weights(labels, weights, ignore_index):
    w = weights.to(labels.device)[labels.clamp(min=0)]
    return torch.where(labels == ignore_index, torch.zeros_like(w), w)


def sr_loss(Y, T, labels, weights, valid, ignore_index=IGNORE_INDEX):
    """Class-weighted L1 between estimate and target, averaged over scored pixels.

    Y, T: [B, C, H, W]; labels, valid: [B, H, W]; weights: [num_classes].
    The per-pixel L1 runs over channels. Invalid and ignore pixels score 0.
    """
    scored = valid.to(torch.bool) & (labels != ignore_index)
    n = scored.sum()
    if n == 0:
        raise DegenerateLoss("sr_loss: no valid labeled pixel")
    w = _pixel_weights(labels, weights, ignore_index) * scored
    err = (Y - T).abs().sum(dim=1)
    return (w * err).sum() / n


def mask_loss(mask, labels, weights, valid, ignore_index=IGNORE_INDEX):
    """Mean |Q - w_c * M| over valid pixels, M = 1 on labeled pixels."""
    if mask.dim() == labels.dim() + 1:
        mask = mask.squeeze(1)
    valid = valid.to(torch.bool)
    n = valid.sum()
    if n == 0:
        raise DegenerateLoss("mask_loss: no valid pixel")
    target = _pixel_weights(labels, weights, ignore_index)
    return ((mask - target).abs() * valid).sum() / n


def wce_loss(logits, labels, alpha, ignore_index=IGNORE_INDEX):
    """-sum alpha_c log softmax, averaged over non-ignore pixels."""
    keep = labels != ignore_index
    n = keep.sum()
    if n == 0:
        raise DegenerateLoss("wce_loss: every pixel is ignored")
    logp = F.log_softmax(logits, dim=1)
    picked = logp.gather(1, labels.clamp(min=0).unsqueeze(1)).squeeze(1)
    a = alpha.to(logits.device, logits.dtype)[labels.clamp(min=0)]
    return -(a * picked * keep).sum() / n


def lovasz_grad(gt_sorted):
    """Gradient of the Lovász extension of the Jaccard loss w.r.t. sorted errors."""
    p = len(gt_sorted)
    gts = gt_sorted.sum()
    intersection = gts - gt_sorted.cumsum(0)
    union = gts + (1 - gt_sorted).cumsum(0)
    jaccard = 1.0 - intersection / union
    if p > 1:
        jaccard[1:p] = jaccard[1:p] - jaccard[0:-1]
    return jaccard


def lovasz_loss(logits, labels, ignore_index=IGNORE_INDEX):
    """Lovász-Softmax over the classes present in the (flattened) batch."""
    probs = F.softmax(logits, dim=1)
    c = probs.shape[1]
    probs = probs.permute(0, 2, 3, 1).reshape(-1, c)
    labels = labels.reshape(-1)
    keep = labels != ignore_index
    if not keep.any():
        raise DegenerateLoss("lovasz_loss: every pixel is ignored")
    probs, labels = probs[keep], labels[keep]
    losses = []
    for cls in range(c):
        if cls == ignore_index:
            continue
        fg = (labels == cls).to(probs.dtype)
        if fg.sum() == 0:
            continue
        errors = (fg - probs[:, cls]).abs()
        errors_sorted, perm = torch.sort(errors, descending=True)
        losses.append(torch.dot(errors_sorted, lovasz_grad(fg[perm])))
    return torch.stack(losses).mean()


@dataclass
class LossWeights:
    w1: float = 1.0  # weighted cross-entropy
    w2: float = 1.5  # Lovász
    w3: float = 1.0  # context-aware SR
    w4: float = 1.0  # mask supervision

    def __post_init__(self):
        if min(self.w1, self.w2, self.w3, self.w4) < 0:
            raise InvalidConfig("loss weights must be nonnegative")


COMPONENTS = (("wce", "w1"), ("lovasz", "w2"), ("sr", "w3"), ("mask", "w4"))


def total_loss(components: dict, lw: LossWeights | None = None):
    """w1*wce + w2*lovasz + w3*sr + w4*mask; missing components count as 0."""
    lw = lw or LossWeights()
    total = 0.0
    for name, attr in COMPONENTS:
        if name not in components:
            continue
        value = components[name]
        v = float(value.detach()) if torch.is_tensor(value) else float(value)
        if not math.isfinite(v):
            raise NonFiniteLoss(name)
        total = total + getattr(lw, attr) * value
    return total
