"""Measured properties of the benchmark checkpoints (shared with the acceptance suite)."""

import numpy as np

from cyclevos.experiments import correction_trend, score
from cyclevos.metrics import jaccard
from cyclevos.segnet import SegNet, labels_from_scores


def test_self_segmentation_of_first_frame(bench):
    """Segmenting frame 1 from its own (frame, mask) pair should recover the mask."""
    js = []
    for seed in bench.cfg.seeds:
        net = SegNet(bench.cfg.model, bench.models[("cyclic", seed)])
        for seq in bench.suite["eval"]:
            lab = labels_from_scores(net.segment([(seq.frames[0], seq.planes(0))], seq.frames[0]).data)
            js += [jaccard(lab, seq.masks[0], o) for o in range(1, seq.n_objects + 1)]
    print(f"self-segmentation J {np.mean(js):.4f} over {len(js)} (model, object) pairs")
    assert np.mean(js) > 0.9


def test_correction_lowers_reconstruction_loss(bench):
    """With the tuned step, the final correction loss is no higher than the initial one on >= 90% of frames."""
    ok = total = 0
    for seed in bench.cfg.seeds:
        net = SegNet(bench.cfg.model, bench.models[("cyclic", seed)])
        _, props = score(net, bench.suite["eval"], bench.cfg.pipeline(), bench.cfg.correction(bench.alpha))
        a, b = correction_trend(props)
        ok, total = ok + a, total + b
    print(f"non-increasing correction loss on {ok}/{total} corrected frames (step {bench.alpha:g})")
    assert total > 0 and ok >= 0.9 * total
