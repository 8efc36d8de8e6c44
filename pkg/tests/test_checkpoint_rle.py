import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from exemseg.checkpoint import load_tensors, save_tensors
from exemseg.rle import decode_mask, encode_mask, encode_slice_runs


def test_checkpoint_round_trip_exact(tmp_path, rng):
    tensors = {
        "enc.w": rng.standard_normal((4, 7)).astype(np.float32),
        "enc.b": rng.standard_normal(7).astype(np.float64),
        "scalar": np.float32(3.5).reshape(()),
    }
    manifest = {"seed": 3, "channels": 64}
    save_tensors(tmp_path / "m.ckpt", tensors, manifest)
    back, mf = load_tensors(tmp_path / "m.ckpt")
    assert mf == manifest
    assert set(back) == set(tensors)
    for k in tensors:
        assert back[k].dtype == tensors[k].dtype
        assert back[k].tobytes() == np.ascontiguousarray(tensors[k]).tobytes()


def test_checkpoint_rejects_bad_magic(tmp_path):
    p = tmp_path / "x.ckpt"
    p.write_bytes(b"NOTMAGIC" + b"\x00" * 32)
    with pytest.raises(ValueError, match="magic"):
        load_tensors(p)


def test_checkpoint_rejects_truncation(tmp_path, rng):
    p = tmp_path / "m.ckpt"
    save_tensors(p, {"w": rng.standard_normal((8, 8)).astype(np.float32)}, {})
    raw = p.read_bytes()
    p.write_bytes(raw[:-16])
    with pytest.raises(ValueError, match="truncated|bytes"):
        load_tensors(p)


# -- rle ---------------------------------------------------------------------------


def test_rle_known_runs():
    m = np.zeros((2, 4, 1), dtype=bool)
    m[0, 1:3, 0] = True     # flat positions 1, 2
    m[1, 3, 0] = True       # flat position 7
    runs = encode_slice_runs(m[:, :, 0])
    np.testing.assert_array_equal(runs, [[1, 2], [7, 1]])


def test_rle_round_trip_random_masks(rng):
    for _ in range(100):
        shape = tuple(rng.integers(1, 9, size=3))
        m = rng.random(shape) > rng.uniform(0.2, 0.8)
        back = decode_mask(encode_mask(m))
        np.testing.assert_array_equal(back, m)


def test_rle_canonical_equal_masks_equal_bytes(rng):
    m = rng.random((5, 5, 3)) > 0.5
    e1 = json.dumps(encode_mask(m), sort_keys=True)
    e2 = json.dumps(encode_mask(m.copy()), sort_keys=True)
    assert e1 == e2


def test_rle_rejects_overrun():
    env = encode_mask(np.ones((2, 2, 1), dtype=bool))
    env["shape"] = [1, 2, 1]   # shrink the declared extent under the runs
    with pytest.raises(ValueError, match="exceeds"):
        decode_mask(env)


@given(st.integers(0, 2 ** 32 - 1))
def test_rle_runs_are_sorted_and_maximal(seed):
    r = np.random.default_rng(seed)
    m = r.random((6, 6)) > 0.5
    runs = encode_slice_runs(m)
    starts = runs[:, 0].astype(np.int64)
    lengths = runs[:, 1].astype(np.int64)
    assert np.all(lengths >= 1)
    assert np.all(np.diff(starts) > 0)
    # maximality: runs never touch (a shared boundary would merge them)
    assert np.all(starts[1:] > (starts + lengths)[:-1])
