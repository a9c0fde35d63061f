import json

import numpy as np
import pytest
import torch

from rangesr.errors import IncompatibleCheckpoint, NonFiniteLoss, ShapeMismatch
from rangesr.losses import wce_loss
from rangesr.pipeline import (
    IdentitySR,
    RangeSegModel,
    build_model,
    checkpoint_bytes,
    cosine_lr,
    end_to_end_forward,
    evaluate,
    infer,
    load_checkpoint,
    predict_image,
    save_checkpoint,
    train,
)
from rangesr.segnet import StubBackbone, segment
from rangesr.sr_core import nearest_row_upsample


def kitti_cfg(**kw):
    from rangesr.config import ExperimentConfig

    return ExperimentConfig().replace(**kw)


@pytest.fixture(scope="module")
def short_ckpt(desk_cfg, desk_data):
    return train(desk_cfg.replace(**{"train.max_steps": 3}), desk_data)


def test_kitti_logits_shape():
    cfg = kitti_cfg(**{"seg.widths": (16, 16, 16, 16), "seg.depths": (1, 1, 1, 1),
                       "seg.decoder_widths": (16, 16, 16), "seg.stem_width": 8})
    model = RangeSegModel(cfg).eval()
    with torch.no_grad():
        logits, states = end_to_end_forward(model, torch.rand(1, 2, 16, 1024) * 40,
                                            torch.ones(1, 16, 1024, dtype=torch.bool))
    assert logits.shape == (1, 20, 64, 1024)
    assert len(states) == cfg.unroll.K


def test_wrong_lores_height(desk_cfg):
    model = RangeSegModel(desk_cfg)
    with pytest.raises(ShapeMismatch):
        end_to_end_forward(model, torch.rand(1, 2, 5, 256), torch.ones(1, 5, 256, dtype=torch.bool))


def test_identity_stub_equals_segment_on_replicated(desk_cfg):
    torch.manual_seed(0)
    model = RangeSegModel(desk_cfg, sr=IdentitySR(desk_cfg.spec)).eval()
    lo = torch.rand(2, 2, 8, 256) * 40
    lo_valid = torch.ones(2, 8, 256, dtype=torch.bool)
    with torch.no_grad():
        logits, _ = end_to_end_forward(model, lo, lo_valid)
        rep = nearest_row_upsample(lo, desk_cfg.spec)
        planes = model.planes_from_range(rep[:, 0], rep[:, 1])
        ref = segment(model.seg, planes, torch.ones(2, 32, 256, dtype=torch.bool))
    assert torch.equal(logits, ref)


def test_wce_gradient_reaches_every_sr_parameter(desk_cfg, desk_data):
    torch.manual_seed(0)
    model = RangeSegModel(desk_cfg)
    batch = desk_data.subset([0, 1])
    logits, _, _ = model(batch)
    wce_loss(logits, batch.labels, torch.ones(5)).backward()
    for name, p in model.sr.named_parameters():
        assert p.grad is not None and p.grad.abs().sum() > 0, name


def test_hires_regime_has_no_sr(desk_cfg):
    model = RangeSegModel(desk_cfg.replace(**{"train.regime": "hires_seg_only"}))
    assert model.sr is None
    assert not any(n.startswith("sr.") for n, _ in model.named_parameters())
    assert model.parameter_counts()["sr"] == 0


def test_cosine_final_lr():
    assert cosine_lr(2e-3, 0, 100) == pytest.approx(2e-3)
    assert cosine_lr(2e-3, 99, 100) < 0.02 * 2e-3
    assert cosine_lr(2e-3, 100, 100) == pytest.approx(0.0, abs=1e-18)


def test_logged_lr_decays(desk_cfg, desk_data, tmp_path):
    log = tmp_path / "m.jsonl"
    cfg = desk_cfg.replace(**{"train.epochs": 6, "train.regime": "hires_seg_only"})
    train(cfg, desk_data, log_path=log)
    rec = [json.loads(l) for l in log.read_text().splitlines()]
    assert len(rec) == 6
    assert set(rec[0]) >= {"epoch", "losses", "val_miou", "lr"}
    # each record carries the rate of its epoch's last step; 3 steps/epoch, 18 in total
    assert rec[0]["lr"] == pytest.approx(cosine_lr(2e-3, 2, 18))
    assert rec[-1]["lr"] == pytest.approx(cosine_lr(2e-3, 17, 18))
    assert rec[-1]["lr"] < 0.02 * 2e-3


def test_same_seed_same_epoch0_loss(desk_cfg, desk_data):
    cfg = desk_cfg.replace(**{"train.max_steps": 3})
    a = train(cfg, desk_data).history[0]["losses"]
    b = train(cfg, desk_data).history[0]["losses"]
    assert a == b


def test_checkpoint_bytes_round_trip(short_ckpt, tmp_path):
    p1 = save_checkpoint(short_ckpt, tmp_path / "a.pt")
    loaded = load_checkpoint(p1)
    p2 = save_checkpoint(loaded, tmp_path / "b.pt")
    assert p1.read_bytes() == p2.read_bytes()
    assert checkpoint_bytes(loaded) == p1.read_bytes()


def test_checkpoint_forward_identical(short_ckpt, desk_data, tmp_path):
    path = save_checkpoint(short_ckpt, tmp_path / "a.pt")
    m1, _ = build_model(short_ckpt)
    m2, _ = build_model(path)
    batch = desk_data.subset([0, 1])
    with torch.no_grad():
        assert torch.equal(m1(batch)[0], m2(batch)[0])


def test_incompatible_checkpoint(short_ckpt, desk_cfg, tmp_path):
    path = save_checkpoint(short_ckpt, tmp_path / "a.pt")
    with pytest.raises(IncompatibleCheckpoint):
        load_checkpoint(path, desk_cfg.replace(**{"unroll.K": 2}))
    load_checkpoint(path, desk_cfg.replace(**{"train.lr": 1e-3}))  # non-structural key
    bad = tmp_path / "bad.pt"
    torch.save({"schema": "other/9"}, bad)
    with pytest.raises(IncompatibleCheckpoint):
        load_checkpoint(bad)
    bad.write_bytes(b"not a checkpoint")
    with pytest.raises(IncompatibleCheckpoint):
        load_checkpoint(bad)


def test_infer_point_count_and_repeatable(short_ckpt, desk_clouds):
    model, cfg = build_model(short_ckpt)
    out_img, _ = predict_image(model, cfg, desk_clouds[0])
    a = infer(short_ckpt, desk_clouds[0])
    b = infer(short_ckpt, desk_clouds[0])
    assert len(a.points) == int(out_img.valid.sum())
    np.testing.assert_array_equal(a.labels, b.labels)


def test_stub_backbone_trains(desk_cfg, desk_data):
    ck = train(desk_cfg.replace(**{"train.max_steps": 2}), desk_data, backbone=StubBackbone(5))
    model, _ = build_model(ck, backbone=StubBackbone(5))
    assert model.parameter_counts()["seg"] == 5 * 5 + 5
    with torch.no_grad():
        logits, _, _ = model(desk_data.subset([0]))
    assert logits.shape == (1, 5, 32, 256)


def test_nan_aborts_with_last_good(desk_cfg, desk_data, tmp_path):
    def poison(record, model):
        with torch.no_grad():
            next(model.seg.parameters()).fill_(float("nan"))

    cfg = desk_cfg.replace(**{"train.epochs": 3})
    out = tmp_path / "last.pt"
    with pytest.raises(NonFiniteLoss) as exc:
        train(cfg, desk_data, out_path=out, callback=poison)
    assert exc.value.checkpoint is not None
    assert out.exists()
    saved = load_checkpoint(out)
    assert saved.epoch == exc.value.checkpoint.epoch == 0
    assert all(torch.isfinite(v).all() for v in saved.seg_state.values() if v.is_floating_point())


def test_point_and_pixel_scoring(short_ckpt, desk_clouds):
    for mode in ("pixel", "point"):
        r = evaluate(short_ckpt, desk_clouds[:2], mode=mode)
        assert 0.0 <= r.miou <= 1.0
        assert r.params["sr"] > 0
