import csv
import json
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cyclevos import tensor as T
from cyclevos import trainer as tr
from cyclevos.data import SynthSpec, VideoSequence, generate_synthetic
from cyclevos.losses import seg_loss
from cyclevos.segnet import ModelConfig, SegNet, Weights
from cyclevos.tensor import Tensor
from cyclevos.trainer import (
    OptimizerState,
    TrainConfig,
    TrainingDiverged,
    adam_update,
    clip_losses,
    max_interval,
    run_training,
    sample_clip,
    train_step,
)

SMALL = ModelConfig(height=16, width=16, feat_channels=4, key_channels=2, value_channels=4)


def _videos(n=2, size=16, length=8):
    spec = dict(size=size, length=length, radius=(3, 4), velocity=(0.5, 1.0))
    return [generate_synthetic(SynthSpec(seed=s, name=f"v{s}", **spec)) for s in range(n)]


def test_curriculum_examples():
    cfg = TrainConfig()
    assert max_interval(0, cfg) == 5
    assert max_interval(19, cfg) == 5
    assert max_interval(20, cfg) == 10
    assert max_interval(40, cfg) == 15


@given(st.integers(0, 500), st.integers(0, 500))
@settings(max_examples=50, deadline=None)
def test_curriculum_non_decreasing(e1, e2):
    cfg = TrainConfig()
    lo, hi = sorted((e1, e2))
    assert max_interval(lo, cfg) <= max_interval(hi, cfg)


@given(st.integers(0, 2**31 - 1), st.integers(0, 100))
@settings(max_examples=60, deadline=None)
def test_sample_clip_indices(seed, epoch):
    video = _VIDEO16
    cfg = TrainConfig()
    clip = sample_clip(video, epoch, np.random.default_rng(seed), cfg)
    a, b, c = clip.indices
    assert 0 <= a < b < c < len(video)
    assert c - a <= max_interval(epoch, cfg)


_VIDEO16 = generate_synthetic(SynthSpec(size=16, length=16, radius=(3, 4), seed=0))


def test_sample_clip_without_augmentation_returns_video_data():
    clip = sample_clip(_VIDEO16, 0, np.random.default_rng(0), TrainConfig(augment=False))
    for i, f, m in zip(clip.indices, clip.frames, clip.masks):
        assert np.array_equal(f, _VIDEO16.frames[i])
        assert np.array_equal(m, _VIDEO16.planes(i))


def test_augmentation_keeps_frames_and_masks_aligned():
    rng = np.random.default_rng(3)
    for _ in range(10):
        clip = sample_clip(_VIDEO16, 0, rng, TrainConfig())
        for i, f, m in zip(clip.indices, clip.frames, clip.masks):
            # pixel multiset per channel is preserved, masks move with the frame
            assert sorted(np.sort(f.reshape(3, -1), axis=1).tolist()) == sorted(
                np.sort(_VIDEO16.frames[i].reshape(3, -1), axis=1).tolist()
            )
            assert m.sum() == _VIDEO16.planes(i).sum()
            obj = f[:, m[0] > 0].mean(axis=1)
            src = _VIDEO16.frames[i][:, _VIDEO16.planes(i)[0] > 0].mean(axis=1)
            np.testing.assert_allclose(sorted(obj), sorted(src), rtol=1e-6)


def test_short_video_skipped_with_warning(caplog):
    v = VideoSequence("tiny", np.zeros((2, 3, 8, 8), np.float32), [np.zeros((8, 8), np.uint8)] * 2, 1)
    with caplog.at_level("WARNING"):
        assert sample_clip(v, 0, np.random.default_rng(0), TrainConfig()) is None
    assert "tiny" in caplog.text


def test_config_validation():
    with pytest.raises(ValueError, match="cycle_mode"):
        TrainConfig(cycle_mode="other")
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(lr=-1)


def _clip(seed=0, cfg=TrainConfig(augment=False)):
    return sample_clip(_videos(1)[0], 0, np.random.default_rng(seed), cfg)


def test_adam_first_step_matches_hand_formula():
    w = Weights({"a": Tensor(np.array([1.0, -2.0, 0.5]))})
    g = {"a": np.array([0.3, -0.1, 0.0], dtype=np.float32)}
    cfg = TrainConfig(lr=0.01)
    out = adam_update(w, g, OptimizerState.for_weights(w), cfg)
    m, v = (1 - cfg.beta1) * g["a"], (1 - cfg.beta2) * g["a"] ** 2
    mhat, vhat = m / (1 - cfg.beta1), v / (1 - cfg.beta2)
    expected = w["a"].data - cfg.lr * mhat / (np.sqrt(vhat) + cfg.adam_eps)
    np.testing.assert_allclose(out["a"].data, expected, rtol=1e-6)


def test_zero_learning_rate_leaves_weights_bit_identical():
    w = Weights.init(SMALL, 0)
    cfg = TrainConfig(lr=0.0)
    new, losses, _ = train_step(SMALL, w, OptimizerState.for_weights(w), [_clip()], cfg)
    assert np.isfinite(losses.total)
    assert new.fingerprint() == w.fingerprint()


def test_cycle_weight_zero_is_forward_only():
    w = Weights.init(SMALL, 0)
    cfg = TrainConfig(cycle_weight=0.0, augment=False)
    _, losses, _ = train_step(SMALL, w, OptimizerState.for_weights(w), [_clip()], cfg)
    assert losses.total == pytest.approx(losses.forward, abs=1e-7)
    assert losses.cycle == 0.0


def test_total_is_forward_plus_cycle():
    w = Weights.init(SMALL, 0)
    _, losses, _ = train_step(SMALL, w, OptimizerState.for_weights(w), [_clip()], TrainConfig(augment=False))
    assert losses.total == pytest.approx(losses.forward + losses.cycle, abs=1e-6)


def _cycle_grads(cfg, clip):
    tw = Weights.init(SMALL, 1).trainable()
    net = SegNet(SMALL, tw)
    with T.Tape() as tape:
        _, cyc = clip_losses(net, clip, cfg)
    return tape.grad(cyc, *tw.values()), tw


def test_detach_cycle_blocks_gradient_through_forward_prediction():
    clip = _clip()
    g_det, tw = _cycle_grads(TrainConfig(detach_cycle=True), clip)
    g_full, _ = _cycle_grads(TrainConfig(detach_cycle=False), clip)
    # reference: treat the forward prediction as a constant input to the cycle
    net = SegNet(SMALL, tw)
    (x1, xa, xt), (y1, _, _) = clip.frames, clip.masks
    with T.no_tape():
        pred_a = net.segment([(x1, y1)], xa)
        pred_t = net.segment([(x1, y1), (xa, pred_a)], xt).data
    with T.Tape() as tape:
        ref = seg_loss(net.segment([(xt, pred_t)], x1), y1)
    g_ref = tape.grad(ref, *tw.values())
    det_gap = max(float(np.abs(a - b).max()) for a, b in zip(g_det, g_ref))
    full_gap = max(float(np.abs(a - b).max()) for a, b in zip(g_full, g_ref))
    assert det_gap < 1e-6
    assert full_gap > 100 * max(det_gap, 1e-8)


def test_full_history_mode_differs_from_simple():
    w = Weights.init(SMALL, 0)
    clip = _clip()
    _, simple, _ = train_step(SMALL, w, OptimizerState.for_weights(w), [clip], TrainConfig(augment=False))
    _, full, _ = train_step(
        SMALL, w, OptimizerState.for_weights(w), [clip], TrainConfig(augment=False, cycle_mode="full-history")
    )
    assert simple.forward == full.forward
    assert simple.cycle != full.cycle


def test_loss_decreases_over_200_steps():
    videos = _videos(2)
    cfg = TrainConfig(epochs=100, batch_size=1, lr=3e-3, seed=0)
    res = run_training(videos, cfg, SMALL)
    totals = np.array([r[4] for r in res.log])
    assert len(totals) == 200 and np.all(np.isfinite(totals))
    assert totals[-40:].mean() < totals[:40].mean() - 0.1


def test_same_seed_bit_identical_checkpoints(tmp_path):
    videos = _videos(2)
    cfg = TrainConfig(epochs=3, seed=5)
    run_training(videos, cfg, SMALL, out_dir=tmp_path / "a")
    run_training(videos, cfg, SMALL, out_dir=tmp_path / "b")
    assert (tmp_path / "a" / "model.cvos").read_bytes() == (tmp_path / "b" / "model.cvos").read_bytes()
    assert (tmp_path / "a" / "losses.csv").read_text() == (tmp_path / "b" / "losses.csv").read_text()


def test_cyclic_and_baseline_runs_differ():
    videos = _videos(2)
    a = run_training(videos, TrainConfig(epochs=2, cycle_weight=1.0), SMALL)
    b = run_training(videos, TrainConfig(epochs=2, cycle_weight=0.0), SMALL)
    assert a.weights.fingerprint() != b.weights.fingerprint()


def test_every_parameter_receives_gradient():
    res = run_training(_videos(2), TrainConfig(epochs=3), SMALL)
    dead = [k for k, v in res.grad_norm_max.items() if v == 0.0]
    assert dead == []
    assert sorted(res.grad_norm_max) == sorted(Weights.init(SMALL))


def test_loss_csv_columns(tmp_path):
    run_training(_videos(2), TrainConfig(epochs=2), SMALL, out_dir=tmp_path)
    rows = list(csv.reader(open(tmp_path / "losses.csv")))
    assert rows[0] == ["epoch", "step", "forward_loss", "cycle_loss", "total"]
    assert len(rows) == 1 + 2  # 2 epochs x 1 batch of 2 clips


def test_empty_dataset_is_an_error():
    with pytest.raises(ValueError, match="empty"):
        run_training([], TrainConfig(), SMALL)


def test_non_finite_loss_aborts_with_diagnostics(tmp_path, monkeypatch):
    def bad_loss(pred, gt, cfg=None):
        return T.mul_scalar(T.sum_all(pred), float("nan"))

    monkeypatch.setattr(tr, "seg_loss", bad_loss)
    with pytest.raises(TrainingDiverged, match="non-finite"):
        run_training(_videos(2), TrainConfig(epochs=1), SMALL, out_dir=tmp_path)
    diag = json.loads((tmp_path / "diagnostics.json").read_text())
    assert diag["step"] == 1 and "weight_norms" in diag


def test_500_steps_at_64px_within_ten_minutes():
    videos = [generate_synthetic(SynthSpec(seed=s, name=f"v{s}")) for s in range(2)]
    start = time.perf_counter()
    res = run_training(videos, TrainConfig(epochs=250, batch_size=1), ModelConfig())
    elapsed = time.perf_counter() - start
    assert len(res.log) == 500
    assert elapsed < 600
