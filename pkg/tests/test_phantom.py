import json
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from reladiff import phantom as P
from reladiff.errors import ConfigError, FormatError, ShapeError, UnsupportedVersionError
from reladiff.metrics import mae
from reladiff.volume import (Volume, decode_volume, encode_volume, from_model_range, read_volume,
                             to_model_range, write_volume)


def _bytes(s):
    parts = [s.cond_t1, s.cond_t2f, s.labels, *s.targets]
    return [encode_volume(v) for v in parts]


def test_same_seed_is_bit_identical():
    assert _bytes(P.gen_phantom(11)) == _bytes(P.gen_phantom(11))
    assert _bytes(P.gen_phantom(11)) != _bytes(P.gen_phantom(12))


def test_mask_area_fraction_over_consecutive_seeds():
    for seed in range(200):
        frac = float((P.gen_phantom(seed).labels.data > 0).mean())
        assert 0.30 <= frac <= 0.65, (seed, frac)


def test_tracers_differ():
    s = P.gen_phantom(5)
    for a in range(3):
        for b in range(a + 1, 3):
            assert np.abs(s.target(a) - s.target(b)).max() > 0.05


@given(st.integers(0, 10_000), st.sampled_from([(16, 16), (32, 24), (16, 16, 16)]), st.integers(2, 8))
def test_sample_invariants(seed, dims, k):
    s = P.gen_phantom(seed, dims, k)
    vols = [s.cond_t1, s.cond_t2f, s.labels, *s.targets]
    assert all(v.dims == tuple(dims) and v.channels == 1 for v in vols)
    for v in (s.cond_t1, s.cond_t2f, *s.targets):
        assert v.data.min() >= 0 and v.data.max() <= 1
    labels = s.labels.data
    assert set(np.unique(labels)) <= set(range(k + 1))
    assert s.condition().shape == (2, *dims)
    assert s.tracer_count == 3


@pytest.mark.parametrize("dims,k", [((8, 32), 5), ((32, 32), 1), ((32, 32), 9), ((32,), 5)])
def test_bad_phantom_arguments(dims, k):
    with pytest.raises(ConfigError):
        P.gen_phantom(0, dims, k)


def test_hotspots_follow_tracer_preference():
    s = P.gen_phantom(3)
    lab = s.labels.data[0]
    for tau in range(3):
        pref = P.preferred_region(tau, 5)
        lut = P.LUT_TRACER[tau][pref]
        assert s.target(tau)[0][lab == pref].max() > lut + 0.1


def test_region_lut_baseline_is_learnable():
    train = [P.gen_phantom(s) for s in range(1000, 1100)]
    test = [P.gen_phantom(s) for s in range(5000, 5020)]
    lut = P.fit_region_lut(train, 5)
    for tau in range(3):
        err = np.mean([mae(P.predict_region_lut(lut, s, tau), s.target(tau)) for s in test])
        assert err < 0.03


def test_model_range_mapping():
    x = np.random.default_rng(0).random((1, 8, 8)).astype(np.float32)
    y = to_model_range(x)
    np.testing.assert_array_equal(y, x * 2 - 1)
    assert y.min() >= -1 and y.max() <= 1
    np.testing.assert_allclose(from_model_range(y), x, atol=1e-7)


volumes = st.builds(
    lambda data, meta: Volume(data, meta),
    hnp.arrays(np.float32, st.tuples(st.integers(1, 3), st.integers(1, 5), st.integers(1, 5)),
               elements=st.floats(-1e6, 1e6, width=32)),
    st.dictionaries(st.text(max_size=5), st.integers() | st.text(max_size=5), max_size=3),
)


@given(volumes)
def test_rdvf_round_trip_is_bit_exact(v):
    back = decode_volume(encode_volume(v))
    assert back.data.tobytes() == v.data.tobytes() and back.data.shape == v.data.shape
    assert back.meta == v.meta


def test_rdvf_layout_and_file_io(tmp_path):
    v = Volume(np.arange(24, dtype=np.float32).reshape(2, 3, 4), {"kind": "x"})
    blob = encode_volume(v)
    assert blob[:4] == b"RDVF" and blob[4:8] == bytes([1, 2, 2, 0])
    assert struct.unpack_from("<2I", blob, 8) == (3, 4)
    assert np.frombuffer(blob, "<f4", 24, 16).tolist() == list(range(24))
    path = tmp_path / "sub" / "v.rdvf"
    write_volume(path, v)
    assert path.read_bytes() == blob
    assert read_volume(path).data.tobytes() == v.data.tobytes()
    assert not [p for p in path.parent.iterdir() if p.name.startswith(".tmp")]


def test_rdvf_errors():
    blob = encode_volume(Volume(np.zeros((1, 4, 4)), {}))
    with pytest.raises(FormatError, match="offset 0"):
        decode_volume(b"NOPE" + blob[4:])
    for cut in (3, 10, 40, len(blob) - 1):
        with pytest.raises(FormatError, match="offset"):
            decode_volume(blob[:cut])
    with pytest.raises(UnsupportedVersionError, match="offset 4"):
        decode_volume(blob[:4] + b"\x02" + blob[5:])
    with pytest.raises(FormatError):
        decode_volume(blob + b"\x00")


def test_volume_rejects_bad_data():
    with pytest.raises(ShapeError):
        Volume(np.zeros((4, 4)))
    with pytest.raises(ValueError):
        Volume(np.full((1, 2, 2), np.nan))


def test_make_dataset(tmp_path):
    out = tmp_path / "d"
    m = P.make_dataset(out, 9, 4, 2, dims=(16, 16))
    assert len(m["train"]) + len(m["test"]) == 6
    train_seeds = {e["seed"] for e in m["train"]}
    assert not train_seeds & {e["seed"] for e in m["test"]}
    on_disk = json.loads((out / "manifest.json").read_text())
    assert on_disk == m and on_disk["tracers"] == list(P.TRACERS)
    loaded = P.load_split(out / "manifest.json", "test")
    ref = P.gen_phantom(m["test"][0]["seed"], (16, 16))
    assert _bytes(loaded[0]) == _bytes(ref)

    with pytest.raises(FileExistsError):
        P.make_dataset(out, 9, 4, 2, dims=(16, 16))
    again = tmp_path / "e"
    m2 = P.make_dataset(again, 9, 4, 2, dims=(16, 16))
    assert m2 == m
    for e in m["train"] + m["test"]:
        for f in ("t1.rdvf", "target_PIB.rdvf"):
            assert (out / e["path"] / f).read_bytes() == (again / e["path"] / f).read_bytes()
    P.make_dataset(out, 10, 1, 1, dims=(16, 16), force=True)


def test_make_dataset_rejects_empty_split(tmp_path):
    with pytest.raises(ConfigError):
        P.make_dataset(tmp_path / "x", 0, 0, 1)


def test_manifest_version_checked(tmp_path):
    (tmp_path / "manifest.json").write_text(json.dumps({"version": 99}))
    with pytest.raises(UnsupportedVersionError):
        P.load_manifest(tmp_path / "manifest.json")
