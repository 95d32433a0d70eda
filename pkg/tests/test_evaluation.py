import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lshg.blocks import VARIANTS, BlockSpec, block_mac_count
from lshg.evaluation import COLUMNS, GROUPS, bench, decode_heatmaps, head_size, pckh, predict
from lshg.hourglass import build_network, count_macs, count_parameters
from lshg.pipeline.annotations import Annotation
from lshg.pipeline.synth import make_synthetic_dataset
from lshg.pipeline.transforms import make_targets, prepare_sample

from conftest import pckh_recount, tiny_config

IDENTITY = np.array([[1.0, 0, 0], [0, 1.0, 0]])


def test_decode_single_peak():
    hm = np.zeros((16, 64, 64))
    hm[0, 10, 20] = 1.0
    coords, conf = decode_heatmaps(hm, IDENTITY)
    np.testing.assert_array_equal(coords[0], (80, 40))
    assert conf[0] == 1.0


def test_decode_uniform_tie_break():
    coords, _ = decode_heatmaps(np.full((16, 8, 8), 0.3), IDENTITY)
    np.testing.assert_array_equal(coords, 0)


def test_quarter_offset():
    hm = np.zeros((1, 8, 8))
    hm[0, 4, 4] = 1.0
    hm[0, 4, 5] = 0.5
    hm[0, 3, 4] = 0.2
    coords, _ = decode_heatmaps(hm, IDENTITY, quarter_offset=True, stride=1)
    np.testing.assert_allclose(coords[0], (4.25, 3.75))
    plain, _ = decode_heatmaps(hm, IDENTITY, quarter_offset=False, stride=1)
    np.testing.assert_allclose(plain[0], (4, 4))


def test_decode_applies_meta():
    hm = np.zeros((1, 4, 4))
    hm[0, 1, 2] = 1
    meta = np.array([[2.0, 0, 10], [0, 2.0, -4]])
    coords, _ = decode_heatmaps(hm, meta, stride=4)
    np.testing.assert_allclose(coords[0], (2 * 8 + 10, 2 * 4 - 4))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2 ** 16), sigma=st.sampled_from([0.5, 1.0, 2.0]))
def test_decode_inverts_targets(seed, sigma):
    cells = np.random.default_rng(seed).integers(0, 64, (16, 2)).astype(float)
    t, w = make_targets(cells, np.ones(16, bool), sigma=sigma)
    coords, conf = decode_heatmaps(t, IDENTITY, stride=1)
    np.testing.assert_array_equal(coords, cells)
    np.testing.assert_array_equal(conf, 1.0)


def _ann(joints, box=(0, 0, 10, 10), vis=None):
    vis = np.ones(16) if vis is None else vis
    return Annotation("x", (0, 0), 1.0, np.column_stack([joints, vis]), box)


def test_perfect_predictions(rng):
    anns = [_ann(rng.uniform(0, 100, (16, 2))) for _ in range(5)]
    rep = pckh(np.array([a.joints[:, :2] for a in anns]), anns)
    assert all(rep.scores[g] == 100.0 for g in GROUPS) and rep.mean == 100.0


def test_threshold_boundary():
    side = 10 / (0.6 * np.sqrt(2))  # head size exactly 10
    ann = _ann(np.zeros((16, 2)), (0, 0, side, side))
    assert head_size(ann.head_box) == pytest.approx(10)
    pred = np.zeros((16, 2))
    pred[:8, 0] = 4.9
    pred[8:, 0] = 5.1
    rep = pckh(pred[None], [ann])
    # joints 0-5 and 7 hit, 8-15 miss
    assert rep.scores["Ankle"] == 100 and rep.scores["Knee"] == 100 and rep.scores["Hip"] == 100
    assert rep.scores["Head"] == 0 and rep.scores["Wrist"] == 0


def test_recount_on_synthetic_batch():
    data = make_synthetic_dataset(20, 21, image_size=128)
    anns = [a for _, a in data]
    r = np.random.default_rng(0)
    preds = []
    for a in anns:
        hs = head_size(a.head_box)
        noise = r.normal(size=(16, 2))
        noise *= (r.uniform(0, 1.2, 16) * hs / np.linalg.norm(noise, axis=1))[:, None]
        preds.append(a.joints[:, :2] + noise)
        a.joints[r.random(16) < 0.1, 2] = 0
    rep = pckh(np.array(preds), anns)
    scores, mean = pckh_recount(preds, anns)
    assert rep.scores == scores
    assert rep.mean == pytest.approx(mean, abs=1e-12)
    assert 0 < rep.mean < 100


def test_zero_head_size_skipped(rng):
    good = _ann(np.zeros((16, 2)))
    bad = _ann(np.zeros((16, 2)))
    bad.head_box = np.array([5.0, 5.0, 5.0, 5.0])
    rep = pckh(np.zeros((2, 16, 2)), [good, bad])
    assert rep.skipped == 1 and rep.mean == 100.0 and rep.counts["Head"] == 2


def test_invisible_joints_excluded_and_empty_groups_nan():
    vis = np.ones(16)
    vis[[0, 5]] = 0
    ann = _ann(np.zeros((16, 2)), vis=vis)
    pred = np.zeros((16, 2))
    pred[[0, 5]] = 1e6
    rep = pckh(pred[None], [ann])
    assert np.isnan(rep.scores["Ankle"]) and rep.counts["Ankle"] == 0
    assert rep.mean == 100.0


def test_mean_is_group_average_not_joint_average():
    vis = np.ones(16)
    vis[1] = 0  # Knee keeps one joint
    ann = _ann(np.zeros((16, 2)), vis=vis)
    pred = np.zeros((16, 2))
    pred[4] = 100  # the remaining knee misses
    rep = pckh(pred[None], [ann])
    assert rep.mean == pytest.approx(600 / 7)
    assert rep.joint_weighted_mean == pytest.approx(100 * 12 / 13)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2 ** 16), dx=st.floats(-500, 500), dy=st.floats(-500, 500),
       k=st.floats(0.1, 10))
def test_translation_and_scale_invariance(seed, dx, dy, k):
    r = np.random.default_rng(seed)
    anns, preds = [], []
    for _ in range(4):
        j = r.uniform(0, 100, (16, 2))
        anns.append(_ann(j, (10, 10, 30, 40)))
        preds.append(j + r.normal(0, 6, (16, 2)))
    base = pckh(np.array(preds), anns)
    shift = np.array([dx, dy])
    moved = [_ann(a.joints[:, :2] + shift, a.head_box + np.tile(shift, 2)) for a in anns]
    assert pckh(np.array(preds) + shift, moved).scores == base.scores
    scaled = [_ann(a.joints[:, :2] * k, a.head_box * k) for a in anns]
    assert pckh(np.array(preds) * k, scaled).scores == base.scores


def test_csv_columns(tmp_path):
    rep = pckh(np.zeros((1, 16, 2)), [_ann(np.zeros((16, 2)))])
    rows = list(csv.reader(open(rep.to_csv(tmp_path / "p.csv"))))
    assert tuple(rows[0]) == COLUMNS == ("Head", "Shoulder", "Elbow", "Wrist", "Hip", "Knee", "Ankle", "Mean")
    assert rows[1][-1] == "100.00"


def test_prediction_count_mismatch():
    with pytest.raises(ValueError):
        pckh(np.zeros((2, 16, 2)), [_ann(np.zeros((16, 2)))])


def test_predict_decodes_final_stack():
    data = make_synthetic_dataset(2, 1, image_size=64)
    net = build_network(tiny_config(num_stacks=2), seed=0)
    samples = [prepare_sample(im, a, res=32) for im, a in data]
    preds = predict(net, samples)
    assert preds.shape == (2, 16, 2)
    heat = net.forward(np.stack([s.input for s in samples]), keep=False)[-1]
    np.testing.assert_allclose(preds[1], decode_heatmaps(heat[1], samples[1].meta)[0])


def test_bench_counts_and_passthrough():
    net = build_network(tiny_config(), seed=0)
    r = bench(net, None, iterations=3, warmup=1)
    assert len(r["times"]) == 3
    assert r["params"] == count_parameters(net)
    assert r["macs"] == count_macs(net)
    assert r["p10"] <= r["median"] <= r["p90"]
    with pytest.raises(ValueError):
        bench(net, None, iterations=2)


def test_dw1_fewer_macs_than_original():
    orig = count_macs(build_network(tiny_config(variant="original", hg_channels=32), seed=None))
    dw1 = count_macs(build_network(tiny_config(variant="dw1", hg_channels=32), seed=None))
    assert dw1 < orig


def test_network_mac_ordering_matches_block_ordering():
    net = {v: count_macs(build_network(tiny_config(variant=v, hg_channels=32, stem_channels=(16, 32)), seed=None))
           for v in VARIANTS}
    blk = {v: block_mac_count(BlockSpec(v, 32, 32), 8, 8) for v in VARIANTS}
    assert sorted(VARIANTS, key=net.get) == sorted(VARIANTS, key=blk.get)
