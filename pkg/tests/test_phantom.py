from __future__ import annotations

import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tweedieflow import phantom
from tweedieflow.errors import ConfigError
from tweedieflow.phantom import Severity


@given(st.integers(0, 2**40), st.sampled_from(list(Severity)))
@settings(max_examples=25, deadline=None)
def test_generation_is_deterministic(seed, sev):
    a, b = phantom.gen_phantom(seed, sev), phantom.gen_phantom(seed, sev)
    assert a.image.tobytes() == b.image.tobytes() and a.mask.tobytes() == b.mask.tobytes()


def test_none_severity_is_smooth_ellipse():
    assert phantom.AMPLITUDE[Severity.NONE] == 0.0
    size = 32
    geom = phantom._geometry(11, size)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dy, dx = yy - geom.center[0], xx - geom.center[1]
    phi = np.arctan2(dy, dx) - geom.rotation
    a, b = geom.axes
    r = a * b / np.sqrt((b * np.cos(phi)) ** 2 + (a * np.sin(phi)) ** 2)
    assert np.array_equal(phantom.organ_mask(11, Severity.NONE, size), (np.hypot(dx, dy) < r).astype(np.uint8))


def test_tables_monotone():
    assert list(phantom.AMPLITUDE) == sorted(phantom.AMPLITUDE)
    assert list(phantom.SPECKLE_VAR) == sorted(phantom.SPECKLE_VAR)


def test_intra_organ_variance_matches_table():
    est = {s: np.mean([phantom.intra_organ_variance(p.image, p.mask) for p in (phantom.gen_phantom(k, s) for k in range(100))]) for s in Severity}
    values = [est[s] for s in Severity]
    assert values == sorted(values)
    for s in Severity:
        assert abs(est[s] - phantom.SPECKLE_VAR[s]) <= 0.2 * phantom.SPECKLE_VAR[s]


@pytest.mark.parametrize("sev", [Severity.NONE, Severity.LOW, Severity.MILD])
def test_threshold_recovers_mask(sev):
    for seed in range(30):
        p = phantom.gen_phantom(seed, sev)
        assert phantom.iou(p.image > phantom.THRESHOLD, p.mask) >= 0.8


def test_mask_single_component():
    from scipy import ndimage

    for seed in range(20):
        for size in (8, 32):
            _, count = ndimage.label(phantom.organ_mask(seed, Severity.SEVERE, size))
            assert count == 1


def test_bad_inputs():
    with pytest.raises(ConfigError):
        phantom.gen_phantom(0, 7)
    with pytest.raises(ConfigError):
        phantom.gen_phantom(0, 0, size=12)
    with pytest.raises(ConfigError):
        phantom.build_dataset(9, [0.25] * 4, 0)
    with pytest.raises(ConfigError):
        phantom.build_dataset(20, [0.5, 0.5, 0.5, 0.0], 0)


def test_split_sizes_and_disjointness():
    ds = phantom.build_dataset(10, [0.25] * 4, 3)
    assert [len(ds.splits[k]) for k in ("train", "val", "test")] == [8, 1, 1]
    big = phantom.build_dataset(200, [0.25] * 4, 3, size=8)
    sets = [set(big.splits[k]) for k in ("train", "val", "test")]
    assert not (sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2])
    assert set.union(*sets) == set(range(200))


def test_pure_mix():
    ds = phantom.build_dataset(30, [1, 0, 0, 0], 1, size=8)
    assert all(s.severity == Severity.NONE for s in ds.samples)


def test_condition_encoding():
    p = phantom.gen_phantom(0, Severity.LOW)
    c = phantom.encode_condition(p)
    assert c.shape == (phantom.COND_DIM,) == (68,)
    assert np.array_equal(c[64:], [0, 1, 0, 0])
    assert np.all(phantom.condition_vector(np.zeros((32, 32)), 0)[:64] == 0)
    assert np.all(phantom.condition_vector(np.ones((32, 32)), 0)[:64] == 1)


def test_sample_roundtrip(tmp_path):
    p = phantom.gen_phantom(123, Severity.MILD)
    phantom.write_sample(tmp_path / "a.bin", p)
    q = phantom.read_sample(tmp_path / "a.bin")
    assert np.array_equal(p.image, q.image) and np.array_equal(p.mask, q.mask)
    assert (q.severity, q.seed) == (p.severity, p.seed)
    (tmp_path / "bad.bin").write_bytes(b"nope")
    with pytest.raises(ConfigError):
        phantom.read_sample(tmp_path / "bad.bin")


def test_export_manifest(tmp_path):
    ds = phantom.build_dataset(20, [0.25] * 4, 0, size=8)
    manifest = phantom.export_dataset(tmp_path / "ph", ds)
    rows = list(csv.DictReader(open(manifest)))
    assert len(rows) == 20
    assert sum(r["split"] == "train" for r in rows) == 16
    back = phantom.read_sample(tmp_path / "ph" / rows[5]["file"])
    assert np.array_equal(back.image, ds.samples[5].image)


def test_iou_edge_cases():
    assert phantom.iou(np.zeros((2, 2)), np.zeros((2, 2))) == 1.0
    assert phantom.iou([[1, 0]], [[0, 1]]) == 0.0
