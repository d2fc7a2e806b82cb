import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from nsscale.fields import make_grid, random_divfree_field
from nsscale.io import (
    SnapshotFormatError,
    load_trajectory,
    read_snapshot,
    read_vector_field,
    save_trajectory,
    write_snapshot,
    write_vector_field,
)


def _rewrite_header(path, **changes):
    raw = path.read_bytes()
    cut = raw.index(b"\n")
    header = json.loads(raw[:cut])
    header.update(changes)
    path.write_bytes(json.dumps(header).encode() + raw[cut:])


@pytest.fixture
def field3():
    return random_divfree_field(make_grid(3, 8, 2 * np.pi), seed=4)


def test_roundtrip_is_bitwise(tmp_path, field3):
    p = tmp_path / "u.bin"
    write_vector_field(p, field3, time=0.1 + 0.2)
    u, t, header = read_vector_field(p)
    assert np.array_equal(u.data, field3.data)
    assert t == 0.1 + 0.2
    assert header["fields"] == ["u", "v", "w"]
    assert u.grid == field3.grid


@given(seed=st.integers(0, 2**31 - 1), n=st.sampled_from([8, 16]), length=st.floats(0.1, 100.0))
def test_roundtrip_random_2d(tmp_path_factory, seed, n, length):
    g = make_grid(2, n, length)
    data = np.random.default_rng(seed).standard_normal((2,) + g.shape) * 1e300
    p = tmp_path_factory.mktemp("rt") / "f.bin"
    write_snapshot(p, g, list(data), time=seed * 1e-7, names=["a", "b"])
    g2, header, arrays = read_snapshot(p)
    assert g2 == g
    assert all(np.array_equal(a, b) for a, b in zip(arrays, data))


def test_header_is_one_json_line(tmp_path, field3):
    p = tmp_path / "u.bin"
    write_vector_field(p, field3)
    first = p.read_bytes().split(b"\n", 1)[0]
    header = json.loads(first)
    for key in ("dim", "n_per_axis", "box_length", "time", "fields", "dtype", "layout"):
        assert key in header
    assert header["dtype"] == "f64le" and header["layout"] == "row-major"
    assert len(p.read_bytes()) == len(first) + 1 + 3 * 512 * 8


def test_truncated_is_size_mismatch(tmp_path, field3):
    p = tmp_path / "u.bin"
    write_vector_field(p, field3)
    p.write_bytes(p.read_bytes()[:-8])
    with pytest.raises(SnapshotFormatError, match="size mismatch"):
        read_snapshot(p)


def test_trailing_bytes_rejected(tmp_path, field3):
    p = tmp_path / "u.bin"
    write_vector_field(p, field3)
    p.write_bytes(p.read_bytes() + b"\0" * 8)
    with pytest.raises(SnapshotFormatError, match="size mismatch"):
        read_snapshot(p)


@pytest.mark.parametrize("dtype", ["f64be", "f32le", ">f8"])
def test_foreign_dtype_rejected(tmp_path, field3, dtype):
    p = tmp_path / "u.bin"
    write_vector_field(p, field3)
    _rewrite_header(p, dtype=dtype)
    with pytest.raises(SnapshotFormatError, match="unsupported dtype"):
        read_snapshot(p)


@pytest.mark.parametrize("payload", [b"not json\n", b"[1, 2]\n", b"", b'{"dim": 3}\n'])
def test_malformed_header(tmp_path, payload):
    p = tmp_path / "bad.bin"
    p.write_bytes(payload)
    with pytest.raises(SnapshotFormatError):
        read_snapshot(p)


def test_invalid_grid_in_header(tmp_path, field3):
    p = tmp_path / "u.bin"
    write_vector_field(p, field3)
    _rewrite_header(p, n_per_axis=7)
    with pytest.raises(SnapshotFormatError, match="invalid grid"):
        read_snapshot(p)


def test_metadata_kept_and_protected(tmp_path, field3):
    p = tmp_path / "u.bin"
    write_vector_field(p, field3, metadata={"frame": {"epsilon": 0.125}})
    _, header, _ = read_snapshot(p)
    assert header["frame"] == {"epsilon": 0.125}
    with pytest.raises(ValueError):
        write_vector_field(p, field3, metadata={"dtype": "f32le"})


def test_non_grid_shapes(tmp_path):
    g = make_grid(2, 8, 1.0)
    arrays = [np.arange(5.0), np.ones((2, 3))]
    p = tmp_path / "x.bin"
    write_snapshot(p, g, arrays, names=["a", "b"])
    _, header, out = read_snapshot(p)
    assert header["shapes"] == [[5], [2, 3]]
    assert np.array_equal(out[0], arrays[0]) and np.array_equal(out[1], arrays[1])


def test_no_partial_file_left(tmp_path, field3):
    p = tmp_path / "u.bin"
    write_vector_field(p, field3)
    assert [q.name for q in tmp_path.iterdir()] == ["u.bin"]


def test_trajectory_roundtrip(tmp_path, random_traj):
    save_trajectory(random_traj, tmp_path / "run")
    back = load_trajectory(tmp_path / "run")
    assert np.array_equal(back.times, random_traj.times)
    assert back.config == random_traj.config
    assert back.seed == random_traj.seed
    assert back.initial_energy == random_traj.initial_energy
    for a, b in zip(back.snapshots, random_traj.snapshots):
        assert np.array_equal(a.data, b.data)
    manifest = json.loads((tmp_path / "run" / "manifest.json").read_text())
    assert len(manifest["snapshots"]) == len(random_traj)
