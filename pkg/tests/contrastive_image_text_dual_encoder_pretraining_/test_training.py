import math

import numpy as np
import pytest

from rovit import autodiff as ad
from rovit.autodiff import Tensor
from rovit.config import ConfigError, RunConfig, dump_config, parse_config
from rovit.encoders import VitConfig
from rovit.train import SGD, TrainingDiverged, build_model, finetune_detector, pretrain


def small(steps=20, **kw):
    cfg = RunConfig().replace(run__steps=steps, run__log_every=0)
    return cfg.replace(**kw) if kw else cfg


# ---- loss trace

def test_step0_softmax_loss_near_uniform_limit():
    # a large temperature flattens every logit row, so each direction costs ~ln B
    cfg = small(1, loss__kind="softmax", run__tau_init=50.0)
    res = pretrain(cfg)
    expect = 2 * math.log(cfg.run.batch_size)
    assert abs(res.losses[0] - expect) / expect < 0.10


@pytest.mark.parametrize("kind", ["softmax", "focal"])
def test_500_steps_halve_the_loss(kind):
    res = pretrain(small(500, loss__kind=kind))
    assert np.mean(res.losses[-50:]) < 0.5 * res.losses[0]
    assert np.all(np.isfinite(res.losses))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_aborts_with_step():
    cfg = small(50, optim__lr=1e6, optim__clip_norm=0.0, optim__warmup_steps=0)
    with pytest.raises(TrainingDiverged) as err:
        pretrain(cfg)
    assert err.value.step >= 0
    assert len(ad.get_tape()) == 0


# ---- determinism

def test_identical_runs_are_bit_identical(tmp_path):
    cfg = small(15, vit__pe_mode="cpe")
    pretrain(cfg, tmp_path / "a")
    pretrain(cfg, tmp_path / "b")
    for name in ("checkpoint.rovt", "loss_trace.csv", "config.txt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_different_seeds_differ():
    a = pretrain(small(3)).losses
    b = pretrain(small(3, run__seed=1)).losses
    assert a != b


# ---- freeze contract

def _backbone(model):
    return {k: v.data.copy() for k, v in model.params.items() if model.group_of(k) == "backbone"}


def test_freeze_backbone_keeps_backbone_bits():
    cfg = small(10, run__freeze_backbone=True)
    model = build_model(cfg)
    before = _backbone(model)
    res = pretrain(cfg, model=model)
    after = _backbone(res.model)
    assert all(before[k].tobytes() == after[k].tobytes() for k in before)
    text0 = build_model(cfg).params["text.tok"].data
    assert not np.array_equal(res.model.params["text.tok"].data, text0)


def test_zero_backbone_multiplier_equals_freeze():
    frozen = pretrain(small(10, run__freeze_backbone=True)).model
    zero = pretrain(small(10, optim__backbone_lr_mult=0.0)).model
    for k in frozen.params:
        assert frozen.params[k].data.tobytes() == zero.params[k].data.tobytes()


def test_freeze_temperature():
    cfg = small(10, run__freeze_temperature=True)
    res = pretrain(cfg)
    assert res.model.params["logit_temp"].data == np.log(cfg.run.tau_init)


def test_finetune_frozen_backbone_is_untouched():
    cfg = small(5).replace(finetune__steps=10, finetune__n_tasks=4)
    base = build_model(cfg)
    ft_model, head, losses = finetune_detector(base, cfg)
    for k, v in base.params.items():
        assert ft_model.params[k].data.tobytes() == v.data.tobytes()
    assert len(losses) > 0
    assert not np.array_equal(head.params["det.proj.w"].data, np.eye(cfg.vit.dim))


def test_finetune_unfrozen_moves_backbone_only():
    cfg = small(5).replace(finetune__steps=5, finetune__n_tasks=2, finetune__freeze_backbone=False)
    base = build_model(cfg)
    ft_model, _, _ = finetune_detector(base, cfg)
    assert not np.array_equal(ft_model.params["image.patch.w"].data, base.params["image.patch.w"].data)
    for k, v in base.params.items():
        if not k.startswith("image."):
            assert ft_model.params[k].data.tobytes() == v.data.tobytes()


# ---- optimizer

def test_sgd_momentum_and_warmup():
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = SGD({"w": p}, lr=0.1, momentum=0.5, warmup_steps=2)
    p.grad = np.array([1.0])
    opt.step()
    assert p.data[0] == pytest.approx(1.0 - 0.05)
    p.grad = np.array([1.0])
    opt.step()
    assert p.data[0] == pytest.approx(0.95 - 0.1 * 1.5)


def test_sgd_clips_global_norm():
    a = Tensor(np.zeros(2), requires_grad=True)
    opt = SGD({"a": a}, lr=1.0, momentum=0.0, clip_norm=1.0)
    a.grad = np.array([3.0, 4.0])
    opt.step()
    np.testing.assert_allclose(a.data, [-0.6, -0.8])


# ---- config

def test_config_round_trip_and_overrides():
    cfg = parse_config("run.steps = 7\nvit.pe_mode = cpe\ncpe.scale_range = 0.2, 0.9\n"
                       "run.freeze_backbone = true  # comment\n")
    assert cfg.run.steps == 7 and cfg.vit.pe_mode == "cpe" and cfg.run.freeze_backbone
    assert cfg.cpe.scale_range == (0.2, 0.9)
    assert parse_config(dump_config(cfg)) == cfg


def test_config_follows_grid_for_cpe():
    cfg = parse_config("vit.image_size = 48\nvit.patch_size = 8\n")
    assert cfg.cpe.out_size == 6 and cfg.cpe.upsample_size == 24


@pytest.mark.parametrize("text", [
    "run.stpes = 3", "bogus.key = 1", "run.steps", "steps = 3",
    "run.batch_size = 0", "optim.lr = -1", "run.steps = many", "vit.pe_mode = fourier",
])
def test_config_errors(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_vit_config_validation():
    with pytest.raises(ValueError):
        VitConfig(image_size=30, patch_size=8)
