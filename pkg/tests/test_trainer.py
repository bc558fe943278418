import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from lesioncascade.augment import AugmentConfig
from lesioncascade.checkpoint import load_checkpoint, save_checkpoint
from lesioncascade.clsmodel import build_cls_model
from lesioncascade.dataio import NormalizationPolicy, load_cls_manifest, load_seg_manifest, split
from lesioncascade.segmodel import build_seg_model
from lesioncascade.synthgen import SynthConfig, render_arrays
from lesioncascade.trainer import (Adam, TrainConfig, adam_step, early_stop_check, fit, train_classification,
                                   train_segmentation)
from toy import small_cls, small_seg


def seg_data(n=4, size=32, seed=0):
    x, m, _ = render_arrays(SynthConfig(n_samples=n, image_size=(size, size), seed=seed), labeled=False)
    return x.astype(np.float64), m.astype(np.float64)


def params_of(model):
    return {k: v.detach().clone() for k, v in model.named_parameters()}


# optimizer

def test_adam_zero_grad_fresh_state():
    p = torch.tensor([1.0, -2.0], dtype=torch.float64)
    state = {}
    adam_step([p], [torch.zeros(2, dtype=torch.float64)], state, lr=0.1)
    assert p.tolist() == [1.0, -2.0]
    assert state["m"][0].abs().sum() == 0 and state["v"][0].abs().sum() == 0


def test_adam_moments_decay():
    p = torch.zeros(1, dtype=torch.float64)
    state = {}
    adam_step([p], [torch.ones(1, dtype=torch.float64)], state, lr=0.1)
    m0, v0 = state["m"][0].item(), state["v"][0].item()
    adam_step([p], [torch.zeros(1, dtype=torch.float64)], state, lr=0.1)
    assert state["m"][0].item() == pytest.approx(0.9 * m0, rel=1e-15)
    assert state["v"][0].item() == pytest.approx(0.999 * v0, rel=1e-15)


def test_adam_first_step_is_lr():
    p = torch.tensor([3.0], dtype=torch.float64)
    adam_step([p], [torch.tensor([1.0], dtype=torch.float64)], {}, lr=0.01)
    # bias-corrected m/sqrt(v) = 1 on the first step, so the move is lr / (1 + eps)
    assert p.item() == pytest.approx(3.0 - 0.01 / (1 + 1e-8), abs=1e-15)


def test_adam_sign_flip_second_moment():
    p = torch.zeros(3, dtype=torch.float64)
    state = {}
    for g in (1.0, -1.0):
        adam_step([p], [torch.full((3,), g, dtype=torch.float64)], state, lr=0.1)
    assert (state["v"][0] > 0).all()


def test_adam_matches_torch(rng):
    shapes = [(3, 4), (5,)]
    ours = [torch.tensor(rng.normal(size=s)) for s in shapes]
    ref = [p.clone().requires_grad_(True) for p in ours]
    torch_opt = torch.optim.Adam(ref, lr=0.003, eps=1e-8)
    state = {}
    for _ in range(6):
        grads = [torch.tensor(rng.normal(size=s)) for s in shapes]
        adam_step(ours, grads, state, lr=0.003)
        for r, g in zip(ref, grads):
            r.grad = g.clone()
        torch_opt.step()
    for a, b in zip(ours, ref):
        torch.testing.assert_close(a, b.detach(), rtol=1e-12, atol=1e-14)


def test_adam_rejects_bad_grads():
    p = torch.zeros(2)
    with pytest.raises(FloatingPointError):
        adam_step([p], [torch.tensor([1.0, float("nan")])], {}, lr=0.1)
    with pytest.raises(ValueError):
        adam_step([p], [torch.zeros(3)], {}, lr=0.1)


# early stopping

def test_early_stop_trace():
    losses = [1.0, 0.9, 0.95, 0.96]
    fired = [early_stop_check(losses[:t], patience=2) for t in range(1, 5)]
    assert fired == [False, False, False, True]


def test_early_stop_edges():
    assert not early_stop_check([], 3)
    assert not early_stop_check([1.0, 2.0], 3)
    assert not early_stop_check(list(np.linspace(1, 0, 50)), 1)
    assert early_stop_check([1.0, 0.99995, 0.9999], 2, min_delta=1e-3)


@settings(max_examples=200, deadline=None)
@given(history=st.lists(st.floats(0, 10, allow_nan=False), min_size=1, max_size=30),
       patience=st.integers(1, 6))
def test_early_stop_never_before_patience(history, patience):
    if early_stop_check(history, patience):
        best_epoch = next(i for i, v in enumerate(history) if v == min(history))
        assert len(history) - 1 - best_epoch >= patience


# training loop

def test_zero_epochs():
    model = build_seg_model(small_seg(32), seed=0).double()
    before = {k: v.clone() for k, v in model.state_dict().items()}
    x, y = seg_data()
    _, records = fit(model, x, y, TrainConfig(max_epochs=0))
    assert records == []
    for k, v in model.state_dict().items():
        assert torch.equal(v, before[k])


def test_zero_learning_rate():
    model = build_cls_model(small_cls(3, 32), seed=0).double()
    x, _, y = render_arrays(SynthConfig(n_samples=6, image_size=(32, 32), texture_classes=3))
    before = params_of(model)
    fit(model, x.astype(np.float64), y, TrainConfig(learning_rate=0.0, max_epochs=3, batch_size=4),
        augment=AugmentConfig())
    for k, v in model.named_parameters():
        assert torch.equal(v.detach(), before[k]), k


def test_determinism_float64():
    x, y = seg_data()
    runs = []
    for _ in range(2):
        model = build_seg_model(small_seg(32), seed=3).double()
        _, records = fit(model, x, y, TrainConfig(max_epochs=3, batch_size=2, seed=5), augment=AugmentConfig())
        runs.append(([r.log_line() for r in records], params_of(model)))
    assert runs[0][0] == runs[1][0]
    for k in runs[0][1]:
        assert torch.equal(runs[0][1][k], runs[1][1][k])


def test_seed_changes_trajectory():
    x, y = seg_data()
    losses = []
    for seed in (0, 1):
        model = build_seg_model(small_seg(32), seed=3)
        _, records = fit(model, x, y, TrainConfig(max_epochs=2, batch_size=2, seed=seed), augment=AugmentConfig())
        losses.append([r.loss_total for r in records])
    assert losses[0] != losses[1]


def test_log_file_and_best_weights(tmp_path):
    x, y = seg_data()
    model = build_seg_model(small_seg(32), seed=0)
    _, records = fit(model, x, y, TrainConfig(max_epochs=4, batch_size=4), log_path=tmp_path / "e.jsonl")
    lines = (tmp_path / "e.jsonl").read_text().splitlines()
    assert lines == [r.log_line() for r in records]
    assert "wall_time_s" not in json.loads(lines[0])
    assert {"dice", "miou"} <= set(records[-1].metric_snapshot)


def test_early_stop_halts_training():
    x, y = seg_data()
    model = build_seg_model(small_seg(32), seed=0)
    # a huge min_delta means no epoch ever counts as an improvement
    _, records = fit(model, x, y, TrainConfig(max_epochs=10, early_stop_patience=2, early_stop_min_delta=1e9))
    assert len(records) == 3


def test_non_finite_loss_names_batch():
    x, y = seg_data()
    x[2, 0, 0, 0] = np.nan
    model = build_seg_model(small_seg(32), seed=0).double()
    with pytest.raises(FloatingPointError, match=r"batch \d"):
        fit(model, x, y, TrainConfig(max_epochs=1, batch_size=2))


def test_val_monitor_requires_data():
    x, y = seg_data()
    with pytest.raises(ValueError):
        fit(build_seg_model(small_seg(32)), x, y, TrainConfig(monitor="val_loss"))


def test_checkpoint_roundtrip(tmp_path, rng):
    for model in (build_seg_model(small_seg(32), seed=0), build_cls_model(small_cls(4, 32), seed=0)):
        model.eval()
        save_checkpoint(tmp_path / "m.pt", model, policy={"mode": "unit_interval"}, config_digest="d")
        loaded, payload = load_checkpoint(tmp_path / "m.pt")
        x = torch.tensor(rng.random((2, 3, 32, 32)), dtype=torch.float32)
        with torch.no_grad():
            assert torch.equal(model(x), loaded(x))
        assert payload["config_digest"] == "d"


def test_resume_matches_uninterrupted(tmp_path):
    x, y = seg_data()
    cfg = TrainConfig(max_epochs=4, batch_size=2, seed=1)
    full = build_seg_model(small_seg(32), seed=2).double()
    _, ref = fit(full, x, y, cfg, augment=AugmentConfig(), checkpoint_path=tmp_path / "a.pt")

    part = build_seg_model(small_seg(32), seed=2).double()
    fit(part, x, y, TrainConfig(max_epochs=2, batch_size=2, seed=1), augment=AugmentConfig(),
        checkpoint_path=tmp_path / "b.pt")
    resumed = build_seg_model(small_seg(32), seed=99).double()
    _, records = fit(resumed, x, y, cfg, augment=AugmentConfig(), checkpoint_path=tmp_path / "b.pt", resume=True)
    assert [r.log_line() for r in records] == [r.log_line() for r in ref]
    for (k, a), b in zip(full.state_dict().items(), resumed.state_dict().values()):
        assert torch.equal(a, b), k


def test_manifest_entry_points(seg_dir, cls_dir):
    seg = split(load_seg_manifest(seg_dir), 0.8, seed=0)
    model = build_seg_model(small_seg(32), seed=0)
    _, records = train_segmentation(model, seg.subset("train"), seg.subset("test"), TrainConfig(max_epochs=2))
    assert len(records) == 2 and records[0].val_loss is not None

    cls = split(load_cls_manifest(cls_dir), 0.5, seed=0)
    model = build_cls_model(small_cls(7, 32), seed=0)
    _, records = train_classification(model, cls.subset("train"), None, TrainConfig(max_epochs=1),
                                      policy=NormalizationPolicy("symmetric_unit", (32, 32)))
    assert records[0].val_loss is None and "accuracy" in records[0].metric_snapshot
    with pytest.raises(ValueError, match="target size"):
        train_classification(model, cls.subset("train"), None, TrainConfig(max_epochs=1),
                             policy=NormalizationPolicy("unit_interval", (64, 64)))


def test_two_class_separable():
    x, _, y = render_arrays(SynthConfig(n_samples=16, image_size=(32, 32), texture_classes=2, seed=0))
    model = build_cls_model(small_cls(2, 32), seed=0)
    _, records = fit(model, x, y, TrainConfig(max_epochs=100, early_stop_patience=100))
    assert max(r.metric_snapshot["accuracy"] for r in records) == 1.0


def test_adam_wrapper_skips_missing_grads():
    a = torch.nn.Parameter(torch.ones(2, dtype=torch.float64))
    b = torch.nn.Parameter(torch.ones(2, dtype=torch.float64))
    opt = Adam([a, b], lr=0.5)
    (a * 3).sum().backward()
    opt.step()
    assert b.tolist() == [1.0, 1.0]
    assert a.tolist() == pytest.approx([0.5, 0.5])
    saved = opt.state_dict()
    opt.zero_grad()
    assert a.grad is None and saved["step"] == 1
