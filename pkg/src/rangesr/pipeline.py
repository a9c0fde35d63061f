"""End-to-end composition, joint training, checkpoints and inference.

Three regimes share one model class:

* ``hires_seg_only`` segments the projected high-res scan; no SR model exists.
* ``lores_seg_only`` segments the nearest-row replicated low-res scan.
* ``end_to_end`` runs the unrolled SR network, rebuilds x/y/z from the SR
  range along the fixed pixel rays, and segments the result; both networks
  are trained jointly on the weighted sum of all four losses.
"""

from __future__ import annotations

import copy
import io
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from . import config as config_mod
from .config import ExperimentConfig
from .errors import IncompatibleCheckpoint, InvalidConfig, NonFiniteLoss, ShapeMismatch
from .evalkit import ConfusionMatrix, accumulate, iou, result_from_confusion
from .losses import (
    ClassWeights,
    class_weights,
    lovasz_loss,
    mask_loss,
    sr_loss,
    total_loss,
    wce_loss,
)
from .rangeview import (
    LabelImage,
    PointCloud,
    RangeImage,
    back_project,
    degrade,
    pixel_indices,
    project,
)
from .segnet import SegNet
from .sr_core import SRNet, count_parameters, nearest_row_upsample

log = logging.getLogger(__name__)

CHECKPOINT_SCHEMA = "rangesr-checkpoint/1"
LO_CHANNELS = ("range", "remission")
# checkpoint keys that must agree for a checkpoint to load into a config
STRUCTURAL_PREFIXES = ("geometry.", "unroll.", "seg.", "data.lo_height", "train.regime")


# -- data ---------------------------------------------------------------------


@dataclass
class RangeDataset:
    hi_planes: torch.Tensor  # [N, 5, H, W] x, y, z, range, remission
    hi_valid: torch.Tensor  # [N, H, W] bool
    labels: torch.Tensor  # [N, H, W] int64
    lo: torch.Tensor  # [N, 2, h, W] range, remission
    lo_valid: torch.Tensor  # [N, h, W] bool

    def __len__(self):
        return len(self.labels)

    def subset(self, idx):
        idx = torch.as_tensor(idx, dtype=torch.long)
        return RangeDataset(*(t[idx] for t in (self.hi_planes, self.hi_valid, self.labels,
                                               self.lo, self.lo_valid)))

    @property
    def target(self):
        """High-res range and remission, the SR ground truth."""
        return self.hi_planes[:, 3:5]


def seg_planes(img: RangeImage) -> np.ndarray:
    """RangeImage channels reordered to the x, y, z, range, remission convention."""
    return img.data[[2, 3, 4, 0, 1]]


def prepare_corpus(clouds, geometry, spec) -> RangeDataset:
    hi_p, hi_v, labs, lo_d, lo_v = [], [], [], [], []
    for cloud in clouds:
        img, lab = project(cloud, geometry)
        lo = degrade(img, spec)
        hi_p.append(seg_planes(img))
        hi_v.append(img.valid)
        labs.append(lab.labels)
        lo_d.append(lo.data[:2])
        lo_v.append(lo.valid)
    return RangeDataset(
        torch.from_numpy(np.stack(hi_p)).float(),
        torch.from_numpy(np.stack(hi_v)),
        torch.from_numpy(np.stack(labs)).long(),
        torch.from_numpy(np.stack(lo_d)).float(),
        torch.from_numpy(np.stack(lo_v)),
    )


def plane_statistics(data: RangeDataset):
    planes = data.hi_planes.permute(1, 0, 2, 3).reshape(5, -1)
    keep = data.hi_valid.reshape(-1)
    vals = planes[:, keep].double()
    return vals.mean(dim=1).float(), vals.std(dim=1).float()


# -- model --------------------------------------------------------------------


class IdentitySR(nn.Module):
    """Nearest-row replication standing in for the SR network."""

    def __init__(self, spec):
        super().__init__()
        self.spec = spec

    def forward(self, S, lo_valid=None, return_intermediates=False):
        Y = nearest_row_upsample(S, self.spec)
        return (Y, []) if return_intermediates else Y


class RangeSegModel(nn.Module):
    def __init__(self, cfg: ExperimentConfig, backbone: Optional[nn.Module] = None,
                 sr: Optional[nn.Module] = None):
        super().__init__()
        self.cfg = cfg
        self.regime = cfg.train.regime
        self.spec = cfg.spec
        missing = set(cfg.unroll.sr_channels) - set(LO_CHANNELS)
        if missing or "range" not in cfg.unroll.sr_channels:
            raise InvalidConfig("pipeline super-resolves range (and optionally remission) only")
        self.sr_index = [LO_CHANNELS.index(c) for c in cfg.unroll.sr_channels]
        self.seg = backbone if backbone is not None else SegNet(cfg.seg)
        if sr is not None:
            self.sr = sr
        elif self.regime == "end_to_end":
            self.sr = SRNet(self.spec, cfg.unroll)
        else:
            self.sr = None
        self.register_buffer("rays", torch.from_numpy(cfg.geometry.ray_directions()))

    def parameter_counts(self):
        return {"sr": count_parameters(self.sr) if self.sr is not None else 0,
                "seg": count_parameters(self.seg)}

    def planes_from_range(self, rng, remission):
        """[B, H, W] range/remission -> [B, 5, H, W] planes along pixel rays."""
        xyz = rng.unsqueeze(1) * self.rays.unsqueeze(0)
        return torch.cat([xyz, rng.unsqueeze(1), remission.unsqueeze(1)], dim=1)

    def super_resolve(self, lo, lo_valid):
        """Returns (hi-res [B, 2, H, W] range/remission, SR states)."""
        if lo.shape[-2] != self.spec.lo_height:
            raise ShapeMismatch(f"low-res input has {lo.shape[-2]} rows, "
                                f"expected {self.spec.lo_height}")
        S = lo[:, self.sr_index]
        sr = self.sr if self.sr is not None else IdentitySR(self.spec)
        Y, states = sr(S, lo_valid, return_intermediates=True)
        full = nearest_row_upsample(lo, self.spec).clone()
        full[:, self.sr_index] = Y
        return full, Y, states

    def forward_lores(self, lo, lo_valid):
        """Returns (logits, hi-res range/remission, SR output, SR states)."""
        full, Y, states = self.super_resolve(lo, lo_valid)
        planes = self.planes_from_range(full[:, 0], full[:, 1])
        if self.sr is None:
            valid = nearest_row_upsample(lo_valid, self.spec)
        else:
            valid = torch.ones_like(full[:, 0], dtype=torch.bool)
        return self.seg(planes, valid), full, Y, states

    def forward(self, batch: RangeDataset):
        if self.regime == "hires_seg_only":
            return self.seg(batch.hi_planes, batch.hi_valid), None, []
        logits, _, Y, states = self.forward_lores(batch.lo, batch.lo_valid)
        return logits, Y, states


def end_to_end_forward(model: RangeSegModel, lo, lo_valid):
    """SR -> rays -> segmentation; returns (logits, SR states)."""
    full, _, states = model.super_resolve(lo, lo_valid)
    planes = model.planes_from_range(full[:, 0], full[:, 1])
    valid = torch.ones_like(full[:, 0], dtype=torch.bool)
    return model.seg(planes, valid), states


# -- checkpoints --------------------------------------------------------------


@dataclass
class Checkpoint:
    config: ExperimentConfig
    seg_state: dict
    sr_state: Optional[dict]
    class_weights: ClassWeights
    norm_mean: list
    norm_std: list
    epoch: int = 0
    rng_state: Optional[torch.Tensor] = None
    history: list = field(default_factory=list)
    schema: str = CHECKPOINT_SCHEMA


def _state(module):
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def make_checkpoint(model, cfg, cw, epoch, history):
    return Checkpoint(
        config=cfg,
        seg_state=_state(model.seg),
        sr_state=_state(model.sr) if model.sr is not None else None,
        class_weights=cw,
        norm_mean=[float(v) for v in model.seg.plane_mean] if hasattr(model.seg, "plane_mean") else [],
        norm_std=[float(v) for v in model.seg.plane_std] if hasattr(model.seg, "plane_std") else [],
        epoch=epoch,
        rng_state=torch.get_rng_state(),
        history=copy.deepcopy(history),
    )


def _payload(ckpt: Checkpoint):
    return {
        "schema": ckpt.schema,
        "config": ckpt.config.to_flat(),
        "selected_rows": list(ckpt.config.spec.selected_rows),
        "seg_state": ckpt.seg_state,
        "sr_state": ckpt.sr_state,
        "class_frequencies": [float(v) for v in ckpt.class_weights.frequencies],
        "class_weights": [float(v) for v in ckpt.class_weights.weights],
        "norm": {"mean": list(ckpt.norm_mean), "std": list(ckpt.norm_std)},
        "epoch": int(ckpt.epoch),
        "rng_state": ckpt.rng_state,
        "history": json.dumps(ckpt.history, sort_keys=True),
    }


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    torch.save(_payload(ckpt), buf)
    return buf.getvalue()


def save_checkpoint(ckpt: Checkpoint, path):
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(ckpt))
    return path


def _check_compatible(stored: ExperimentConfig, expected: ExperimentConfig):
    a, b = stored.to_flat(), expected.to_flat()
    diff = [k for k in a if k.startswith(STRUCTURAL_PREFIXES) and a[k] != b[k]]
    if diff:
        raise IncompatibleCheckpoint(
            "checkpoint/config mismatch on " + ", ".join(f"{k} ({a[k]!r} != {b[k]!r})" for k in diff))


def load_checkpoint(path, expected_config: Optional[ExperimentConfig] = None) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            payload = torch.load(fh, weights_only=True)
    except Exception as exc:  # corrupt zip, pickle refusal, ...
        raise IncompatibleCheckpoint(f"{path}: unreadable checkpoint ({exc})") from exc
    if not isinstance(payload, dict) or payload.get("schema") != CHECKPOINT_SCHEMA:
        got = payload.get("schema") if isinstance(payload, dict) else type(payload).__name__
        raise IncompatibleCheckpoint(f"{path}: schema {got!r}, expected {CHECKPOINT_SCHEMA!r}")
    cfg = config_mod.from_flat(payload["config"])
    if list(cfg.spec.selected_rows) != list(payload["selected_rows"]):
        raise IncompatibleCheckpoint("stored row selection disagrees with the stored config")
    if expected_config is not None:
        _check_compatible(cfg, expected_config)
    return Checkpoint(
        config=cfg,
        seg_state=payload["seg_state"],
        sr_state=payload["sr_state"],
        class_weights=ClassWeights(np.array(payload["class_frequencies"]),
                                   np.array(payload["class_weights"])),
        norm_mean=payload["norm"]["mean"],
        norm_std=payload["norm"]["std"],
        epoch=payload["epoch"],
        rng_state=payload["rng_state"],
        history=json.loads(payload["history"]),
        schema=payload["schema"],
    )


def build_model(checkpoint, backbone=None):
    """Model in eval mode plus its config, from a Checkpoint or a path."""
    ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
    cfg = ckpt.config
    model = RangeSegModel(cfg, backbone)
    try:
        model.seg.load_state_dict(ckpt.seg_state)
        if model.sr is not None:
            if ckpt.sr_state is None:
                raise IncompatibleCheckpoint("checkpoint has no SR weights")
            model.sr.load_state_dict(ckpt.sr_state)
    except RuntimeError as exc:
        raise IncompatibleCheckpoint(str(exc)) from exc
    model.eval()
    return model, cfg


# -- training -----------------------------------------------------------------


def cosine_lr(base_lr, step, total_steps):
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / max(total_steps, 1)))


def compute_losses(model, batch, cw_tensor, sr_weights, cfg, sr_only=False):
    logits, Y, states = model(batch)
    comps = {}
    if not sr_only:
        comps["wce"] = wce_loss(logits, batch.labels, cw_tensor)
        comps["lovasz"] = lovasz_loss(logits, batch.labels)
        aux = getattr(model.seg, "last_aux", None) if cfg.seg.aux_heads else None
        if aux:
            comps["wce"] = comps["wce"] + sum(wce_loss(a, batch.labels, cw_tensor) for a in aux) / len(aux)
    if model.regime == "end_to_end" and states:
        target = batch.target[:, model.sr_index]
        comps["sr"] = sr_loss(Y, target, batch.labels, sr_weights, batch.hi_valid)
        masks = [s.mask for s in states] if cfg.train.mask_all_layers else [states[-1].mask]
        comps["mask"] = sum(mask_loss(m, batch.labels, cw_tensor, batch.hi_valid)
                            for m in masks) / len(masks)
    return comps, logits


def split_dataset(data: RangeDataset, val_fraction):
    n = len(data)
    n_val = int(round(n * val_fraction))
    if n_val == 0:
        return data, None
    if n_val >= n:
        raise InvalidConfig("validation split leaves no training scans")
    return data.subset(range(n - n_val)), data.subset(range(n - n_val, n))


@torch.no_grad()
def predict(model, data: RangeDataset, batch_size=8):
    model.eval()
    out = []
    for i in range(0, len(data), batch_size):
        logits, _, _ = model(data.subset(range(i, min(i + batch_size, len(data)))))
        out.append(logits.argmax(dim=1))
    return torch.cat(out).numpy()


@torch.no_grad()
def sr_range_error(model, data: RangeDataset, batch_size=8):
    """Mean absolute SR range error (meters) over valid high-res pixels."""
    model.eval()
    err, count = 0.0, 0
    for i in range(0, len(data), batch_size):
        b = data.subset(range(i, min(i + batch_size, len(data))))
        full, _, _ = model.super_resolve(b.lo, b.lo_valid)
        diff = (full[:, 0] - b.hi_planes[:, 3]).abs()[b.hi_valid]
        err += float(diff.sum())
        count += int(diff.numel())
    return err / max(count, 1)


def evaluate_dataset(model, data: RangeDataset, num_classes):
    cm = ConfusionMatrix(num_classes)
    pred = predict(model, data)
    accumulate(cm, pred, data.labels.numpy())
    return cm


def train(cfg: ExperimentConfig, corpus, val_corpus=None, log_path=None, out_path=None,
          backbone=None, callback=None, weights: Optional[ClassWeights] = None) -> Checkpoint:
    """Train one regime; returns the final Checkpoint.

    `corpus` is a list of labeled PointClouds or a prepared RangeDataset. With
    no explicit `val_corpus` the last `val_fraction` of scans is held out.
    `weights` replaces the class weights otherwise counted on the train split.
    Deterministic for a fixed seed (single process).
    """
    tc = cfg.train
    torch.manual_seed(tc.seed)
    np.random.seed(tc.seed)
    data = corpus if isinstance(corpus, RangeDataset) else prepare_corpus(corpus, cfg.geometry, cfg.spec)
    if val_corpus is not None:
        train_set = data
        val_set = val_corpus if isinstance(val_corpus, RangeDataset) else \
            prepare_corpus(val_corpus, cfg.geometry, cfg.spec)
    else:
        train_set, val_set = split_dataset(data, tc.val_fraction)

    num_classes = cfg.seg.num_classes
    cw = weights if weights is not None else class_weights(train_set.labels.numpy(), num_classes)
    if cw.num_classes != num_classes:
        raise InvalidConfig(f"class weights list {cw.num_classes} classes, model has {num_classes}")
    cw_tensor = cw.tensor()
    sr_weights = cw_tensor if tc.context_aware_sr else ClassWeights.uniform(num_classes).tensor()

    model = RangeSegModel(cfg, backbone)
    mean, std = plane_statistics(train_set)
    model.seg.set_normalization(mean, std)

    opt = torch.optim.AdamW(model.parameters(), lr=tc.lr, weight_decay=tc.weight_decay)
    n = len(train_set)
    steps_per_epoch = math.ceil(n / tc.batch_size)
    total_steps = tc.epochs * steps_per_epoch
    if tc.max_steps > 0:
        total_steps = min(total_steps, tc.max_steps)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: cosine_lr(1.0, s, total_steps))
    gen = torch.Generator().manual_seed(tc.seed)

    history = []
    last_good = None
    step = 0
    log_fh = open(log_path, "w") if log_path else None
    try:
        for epoch in range(tc.epochs):
            model.train()
            perm = torch.randperm(n, generator=gen)
            sums, batches, last_lr = {}, 0, opt.param_groups[0]["lr"]
            for i in range(0, n, tc.batch_size):
                if step >= total_steps:
                    break
                batch = train_set.subset(perm[i:i + tc.batch_size])
                sr_only = model.sr is not None and step < tc.sr_warmstart_steps
                comps, _ = compute_losses(model, batch, cw_tensor, sr_weights, cfg, sr_only)
                try:
                    loss = total_loss(comps, cfg.loss)
                except NonFiniteLoss as exc:
                    exc.checkpoint = last_good
                    if out_path and last_good is not None:
                        save_checkpoint(last_good, out_path)
                    raise
                opt.zero_grad(set_to_none=True)
                loss.backward()
                if tc.clip_grad:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), tc.grad_clip_norm)
                last_lr = opt.param_groups[0]["lr"]
                opt.step()
                sched.step()
                step += 1
                batches += 1
                for k, v in comps.items():
                    sums[k] = sums.get(k, 0.0) + float(v.detach())
                sums["total"] = sums.get("total", 0.0) + float(loss.detach())
            if batches == 0:
                break
            record = {"epoch": epoch, "losses": {k: v / batches for k, v in sums.items()},
                      "val_miou": None, "lr": last_lr, "step": step}
            if val_set is not None:
                _, record["val_miou"] = iou(evaluate_dataset(model, val_set, num_classes))
            history.append(record)
            if log_fh:
                log_fh.write(json.dumps(record, sort_keys=True) + "\n")
                log_fh.flush()
            log.info("epoch %d step %d loss %.4f val_miou %s", epoch, step,
                     record["losses"]["total"], record["val_miou"])
            last_good = make_checkpoint(model, cfg, cw, epoch, history)
            if callback:
                callback(record, model)
            if step >= total_steps:
                break
    finally:
        if log_fh:
            log_fh.close()
    model.eval()
    ckpt = make_checkpoint(model, cfg, cw, history[-1]["epoch"] if history else 0, history)
    if out_path:
        save_checkpoint(ckpt, out_path)
    return ckpt


# -- inference ----------------------------------------------------------------


@torch.no_grad()
def predict_image(model, cfg, cloud: PointCloud):
    """Project, run the model; returns (output RangeImage, predicted LabelImage)."""
    img, _ = project(cloud, cfg.geometry)
    planes = torch.from_numpy(seg_planes(img)).unsqueeze(0).float()
    valid = torch.from_numpy(img.valid).unsqueeze(0)
    if model.regime == "hires_seg_only":
        logits = model.seg(planes, valid)
        pred = logits.argmax(dim=1)[0].numpy()
        return img, LabelImage(np.where(img.valid, pred, 0))

    lo = degrade(img, cfg.spec)
    lo_t = torch.from_numpy(lo.data[:2]).unsqueeze(0).float()
    lo_v = torch.from_numpy(lo.valid).unsqueeze(0)
    logits, full, _, _ = model.forward_lores(lo_t, lo_v)
    rng = full[0, 0]
    out_valid = rng > 0
    if model.sr is None:
        out_valid &= nearest_row_upsample(lo_v, cfg.spec)[0]
    out_planes = model.planes_from_range(full[:, 0], full[:, 1])[0].numpy()
    data = np.stack([out_planes[3], out_planes[4], out_planes[0], out_planes[1], out_planes[2]])
    ov = out_valid.numpy()
    data[:, ~ov] = -1.0
    out = RangeImage(data.astype(np.float32), ov, cfg.geometry)
    pred = logits.argmax(dim=1)[0].numpy()
    return out, LabelImage(np.where(ov, pred, 0))


def infer_with_model(model, cfg, cloud: PointCloud) -> PointCloud:
    out, pred = predict_image(model, cfg, cloud)
    return back_project(out, pred)


def infer(checkpoint, cloud: PointCloud) -> PointCloud:
    """Labeled point cloud from the (super-resolved) range image of `cloud`."""
    model, cfg = build_model(checkpoint)
    return infer_with_model(model, cfg, cloud)


def evaluate(checkpoint_or_model, clouds, mode="pixel", name="model", cfg=None):
    """IoU over labeled clouds, scored per range-view pixel or per 3D point."""
    if isinstance(checkpoint_or_model, nn.Module):
        model = checkpoint_or_model
        cfg = cfg or model.cfg
    else:
        model, cfg = build_model(checkpoint_or_model)
    num_classes = cfg.seg.num_classes
    cm = ConfusionMatrix(num_classes)
    if mode == "pixel":
        data = prepare_corpus(clouds, cfg.geometry, cfg.spec)
        accumulate(cm, predict(model, data), data.labels.numpy())
    elif mode == "point":
        for cloud in clouds:
            _, pred = predict_image(model, cfg, cloud)
            c = cloud.drop_zero_points()
            v, u = pixel_indices(c, cfg.geometry)
            accumulate(cm, pred.labels[v, u], c.labels)
    else:
        raise InvalidConfig(f"unknown scoring mode {mode!r}")
    return result_from_confusion(name, cm, cfg.class_names(), model.parameter_counts())
