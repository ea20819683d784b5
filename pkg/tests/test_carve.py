import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deepcarve import carve, data, nn
from deepcarve.tensor import Rng
from oracles import naive_pseudo_labels


def _random_instance(seed):
    """Random (net, dataset) with 2-4 conv maps, M in {2,3,4}, at most 20 images."""
    r = np.random.default_rng(seed)
    M = int(r.integers(2, 5))
    per_class = int(r.integers(1, 20 // M + 1))
    maps = int(r.integers(2, 5))
    two_layers = maps == 4 and r.random() < 0.5
    if two_layers:
        specs = [nn.conv(1, 2, 3, padding=1), nn.relu(), nn.conv(2, 2, 3), nn.relu()]
        flat = 2 * 4 * 4
    else:
        specs = [nn.conv(1, maps, 3, padding=1), nn.relu()]
        flat = maps * 6 * 6
    net = nn.build_network(specs + [nn.fc(flat, M)], Rng(seed), (1, 6, 6))
    for k in net.params:
        if k.endswith(".b"):
            net.params[k] = r.normal(0.0, 0.3, size=net.params[k].shape)
    labels = np.repeat(np.arange(M), per_class)
    images = r.random((len(labels), 1, 6, 6))
    split = data.Split(images, [f"i{n}" for n in range(len(labels))], labels)
    empty = data.Split(np.zeros((0, 1, 6, 6)), [], np.zeros(0, dtype=np.int64))
    test = data.Split(images[:1], ["t0"], full_labels=np.eye(M, dtype=bool)[:1])
    return net, data.WeakDataset([f"a{m}" for m in range(M)], split, empty, test)


@pytest.mark.parametrize("seed", range(25))
def test_matches_naive_reference(seed):
    net, ds = _random_instance(seed)
    h_ref, p_ref = naive_pseudo_labels(net, ds.train.images, ds.train.weak_labels, ds.num_classes)
    hist = carve.compute_response_histogram(net, ds)
    pls = carve.generate_pseudo_labels(net, ds, hist, 0.7)
    assert np.allclose(hist.h, h_ref, atol=1e-9, rtol=0)
    assert np.allclose(pls.labels, p_ref, atol=1e-9, rtol=0)


def test_constant_maps_give_unit_histogram():
    net = nn.build_network([nn.conv(1, 3, 3, padding=1), nn.relu(), nn.fc(3 * 16, 2)], Rng(0), (1, 4, 4))
    net.params["conv0.W"][...] = 0.0
    net.params["conv0.b"][...] = 1.0
    labels = np.array([0, 0, 1])
    ds = data.WeakDataset(["a", "b"], data.Split(np.random.default_rng(0).random((3, 1, 4, 4)),
                                                 ["x", "y", "z"], labels),
                          data.Split(np.zeros((0, 1, 4, 4)), [], np.zeros(0, dtype=np.int64)),
                          data.Split(np.zeros((0, 1, 4, 4)), [], full_labels=np.zeros((0, 2), bool)))
    hist = carve.compute_response_histogram(net, ds)
    assert np.all(hist.h == 1.0)
    assert hist.counts.tolist() == [2, 1]
    assert hist.map_ids == ["conv0:0", "conv0:1", "conv0:2"]


def test_histogram_hand_mean():
    hist = carve.histogram_from_responses(np.array([[0.2], [0.4], [1.0]]), np.array([0, 0, 1]), 2)
    assert hist.h[0, 0] == pytest.approx(0.3, abs=1e-15)
    hist1 = carve.histogram_from_responses(np.ones((4, 5)), np.zeros(4, dtype=int), 1)
    assert hist1.h.shape == (5, 1)


def test_empty_class_is_named():
    with pytest.raises(data.DatasetError, match="class 1"):
        carve.histogram_from_responses(np.ones((2, 1)), np.array([0, 0]), 2)


def _single_map(v, h, gamma=0.7):
    return carve.pseudo_labels_from_responses(np.array([[v]]), np.array([0]), np.array([[1.0, h]]), gamma)[0]


def test_pseudo_label_branches():
    assert _single_map(0.3, 0.5)[0] == 0.95            # own class
    assert _single_map(0.5, 0.5)[1] == 1.0             # v == h
    assert _single_map(0.6 * 0.5, 0.5)[1] == 0.05      # below the band
    assert _single_map(0.7, 1.0)[1] == pytest.approx(0.7)  # lower edge inclusive
    assert _single_map(1.2, 1.0)[1] == 0.05            # above the class mean
    assert _single_map(0.0, 1e-9)[1] == 0.05           # dead map
    assert _single_map(0.0, 0.0)[1] == 0.05


def test_pseudo_labels_average_over_maps():
    v = np.array([[0.8, 0.1]])
    h = np.array([[1.0, 1.0], [1.0, 1.0]])
    p = carve.pseudo_labels_from_responses(v, np.array([0]), h)
    assert p[0, 1] == pytest.approx((0.8 + 0.05) / 2)


def test_gamma_validated():
    with pytest.raises(ValueError):
        carve.pseudo_labels_from_responses(np.ones((1, 1)), np.array([0]), np.ones((1, 2)), gamma=0.0)


def test_histogram_mismatch_rejected():
    net, ds = _random_instance(1)
    other, _ = _random_instance(2)
    hist = carve.compute_response_histogram(net, ds)
    hist.map_ids = hist.map_ids[:-1]
    with pytest.raises(ValueError):
        carve.generate_pseudo_labels(net, ds, hist)


@settings(max_examples=200)
@given(st.lists(st.floats(0, 5), min_size=1, max_size=6), st.integers(0, 100), st.floats(0.05, 1.0))
def test_pseudo_label_invariants(vs, seed, gamma):
    r = np.random.default_rng(seed)
    F, M = len(vs), 3
    h = r.random((F, M)) * 3
    labels = np.array([seed % M])
    p = carve.pseudo_labels_from_responses(np.array([vs]), labels, h, gamma)[0]
    assert p[labels[0]] == 0.95
    assert np.all(p >= 0.05) and np.all(p <= 1.0)


@settings(max_examples=200)
@given(st.floats(0.7, 1.0), st.floats(0.7, 1.0), st.floats(0.1, 10.0))
def test_monotone_within_band(a, b, h):
    lo, hi = sorted((a, b))
    p_lo = _single_map(lo * h, h)[1]
    p_hi = _single_map(hi * h, h)[1]
    assert p_hi >= p_lo


def test_per_map_credits_lie_in_floor_or_band():
    r = np.random.default_rng(0)
    v = r.random((50, 1)) * 2
    h = np.array([[1.0, 1.0]])
    p = carve.pseudo_labels_from_responses(v, np.zeros(50, dtype=int), h)
    other = p[:, 1]
    assert np.all((other == 0.05) | ((other >= 0.7) & (other <= 1.0)))


def test_permutation_invariance():
    net, ds = _random_instance(7)
    hist, pls = carve.carve(net, ds)
    perm = np.random.default_rng(0).permutation(len(ds.train))
    shuffled = data.WeakDataset(ds.attributes,
                                data.Split(ds.train.images[perm], [ds.train.ids[i] for i in perm],
                                           ds.train.weak_labels[perm]), ds.val, ds.test)
    hist2, pls2 = carve.carve(net, shuffled)
    assert np.allclose(hist.h, hist2.h, atol=1e-12, rtol=0)
    assert np.allclose(pls.labels[perm], pls2.labels, atol=1e-12, rtol=0)


@pytest.mark.parametrize("epoch, expected", [(60, True), (62, False), (75, True), (59, False), (0, False)])
def test_schedule(epoch, expected):
    assert carve.carving_schedule(epoch, 60, 5) is expected


def test_schedule_short_run():
    fired = [e for e in range(1, 13) if carve.carving_schedule(e, 6, 3)]
    assert fired == [6, 9, 12]


def test_pseudo_label_csv(tmp_path):
    pls = carve.PseudoLabelSet(2, np.array([[0.95, 0.05], [0.5, 0.95]]), 0.7, ["a", "b"])
    carve.write_pseudo_labels_csv(tmp_path / "p.csv", pls, ["x", "y"])
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[0] == "image_id,class_0,class_1"
    assert lines[1] == "a,0.95,0.05"
