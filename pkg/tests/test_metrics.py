import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cyclevos.data import VideoSequence, render_shape
from cyclevos.metrics import (
    boundary,
    boundary_f,
    default_tolerance,
    evaluate,
    evaluate_sequence,
    jaccard,
    write_report,
)
from oracles import boundary_oracle, f_oracle, jaccard_oracle, shape_fixtures


def test_jaccard_random_pairs_exact():
    rng = np.random.default_rng(0)
    for _ in range(100):
        a = rng.integers(0, 3, size=(16, 16)).astype(np.uint8)
        b = rng.integers(0, 3, size=(16, 16)).astype(np.uint8)
        for obj in (1, 2):
            assert jaccard(a, b, obj) == jaccard_oracle(a, b, obj)


def test_jaccard_edge_cases():
    z = np.zeros((4, 4), np.uint8)
    assert jaccard(z, z) == 1.0
    one = z.copy()
    one[0, 0] = 1
    assert jaccard(one, z) == 0.0
    with pytest.raises(ValueError, match="object id"):
        jaccard(z, z, 3, n_objects=2)
    with pytest.raises(ValueError, match="object id"):
        jaccard(z, z, 0)
    with pytest.raises(ValueError, match="shape"):
        jaccard(z, np.zeros((3, 3), np.uint8))


def test_boundary_matches_oracle():
    rng = np.random.default_rng(1)
    for _ in range(30):
        m = rng.random((9, 11)) > 0.4
        got = set(zip(*np.nonzero(boundary(m))))
        assert got == set(boundary_oracle(m))


def test_boundary_includes_image_border():
    full = np.ones((3, 3), bool)
    assert boundary(full).sum() == 8


def test_boundary_f_allshape_fixtures():
    fixtures = shape_fixtures()
    by_size = {}
    for f in fixtures:
        by_size.setdefault(f.shape, []).append(f.astype(np.uint8))
    for group in by_size.values():
        for a, b in itertools.product(group, repeat=2):
            for r in (0, 1, 2):
                assert abs(boundary_f(a, b, 1, r) - f_oracle(a, b, 1, r)) < 1e-9


@given(st.integers(0, 2**32 - 1), st.integers(0, 3))
@settings(max_examples=40, deadline=None)
def test_boundary_f_random_masks(seed, r):
    rng = np.random.default_rng(seed)
    a = (rng.random((10, 10)) > 0.5).astype(np.uint8)
    b = (rng.random((10, 10)) > 0.5).astype(np.uint8)
    assert abs(boundary_f(a, b, 1, r) - f_oracle(a, b, 1, r)) < 1e-9


def test_boundary_f_identical_is_one():
    m = render_shape("disc", (20, 20), 7, 0, 40, 40).astype(np.uint8)
    assert boundary_f(m, m) == 1.0


def test_boundary_f_shifted_square():
    gt = np.zeros((40, 40), np.uint8)
    gt[10:20, 10:20] = 1
    pred = np.roll(gt, 3, axis=1)
    assert boundary_f(pred, gt, 1, 3) == 1.0
    assert boundary_f(pred, gt, 1, 1) < 1.0
    assert boundary_f(pred, gt, 1, 1) == pytest.approx(f_oracle(pred, gt, 1, 1), abs=1e-12)


def test_boundary_f_empty_cases():
    z = np.zeros((6, 6), np.uint8)
    m = z.copy()
    m[2:4, 2:4] = 1
    assert boundary_f(z, z) == 1.0
    assert boundary_f(m, z) == 0.0
    assert boundary_f(z, m) == 0.0
    with pytest.raises(ValueError, match="tolerance"):
        boundary_f(m, m, 1, -1)


def test_default_tolerance():
    assert default_tolerance((64, 64)) == 1
    assert default_tolerance((480, 854)) == round(0.0075 * np.hypot(480, 854))


def _seq(masks, n_objects=1):
    h, w = masks[0].shape
    return VideoSequence("s", np.zeros((len(masks), 3, h, w), np.float32), masks, n_objects)


def test_evaluate_perfect_prediction():
    rng = np.random.default_rng(2)
    masks = [(rng.random((12, 12)) > 0.5).astype(np.uint8) for _ in range(4)]
    rep = evaluate({"s": np.stack(masks)}, [_seq(masks)])
    assert rep.J == 1.0 and rep.F == 1.0 and rep.JF == 1.0


def test_evaluate_all_background_prediction():
    m = np.zeros((8, 8), np.uint8)
    m[2:6, 2:6] = 1
    rep = evaluate({"s": np.zeros((3, 8, 8), np.uint8)}, [_seq([m, m, m])])
    assert rep.J == 0.0 and rep.F == 0.0


def test_evaluate_two_frame_hand_case():
    gt = np.zeros((8, 8), np.uint8)
    gt[0:4, 0:4] = 1  # 16 px
    pred = np.zeros((8, 8), np.uint8)
    pred[0:4, 0:2] = 1  # 8 px inside
    rep = evaluate({"s": np.stack([gt, pred])}, [_seq([gt, gt])], tolerance=0)
    # frame 0 is the given reference and is not scored
    assert rep.J == pytest.approx(0.5)
    assert rep.F == pytest.approx(f_oracle(pred, gt, 1, 0))


def test_evaluate_skips_frames_without_gt_and_missing_sequences():
    gt = np.ones((4, 4), np.uint8)
    seq = _seq([gt, None, gt])
    res = evaluate_sequence(np.stack([gt, np.zeros_like(gt), gt]), seq.masks, 1)
    assert res[1]["J"] == 1.0
    rep = evaluate({}, [seq])
    assert rep.per_sequence == {} and rep.JF == 0.0
    assert evaluate_sequence(np.stack([gt, gt]), [gt, None], 1) is None


def test_write_report(tmp_path):
    m = np.ones((4, 4), np.uint8)
    rep = evaluate({"s": np.stack([m, m])}, [_seq([m, m])], fps=12.5)
    write_report(rep, tmp_path, "r")
    assert (tmp_path / "r.csv").read_text().splitlines()[0] == "sequence,object,J,F,JF"
    assert json.loads((tmp_path / "r.json").read_text())["fps"] == 12.5
