import struct

import numpy as np
import pytest

from lors import serialize
from lors.decoder import MixerDecoder, StackConfig
from lors.params import StaticLorsParam, init_static

TINY = StackConfig(n_layers=2, d_q=8, channels=4, points_in=4, points_out=8, groups=2, rank_adaptive=2, rank_static=2)


def test_round_trip(rng):
    tensors = {"a/shared/W": rng.standard_normal((3, 4)), "b": rng.standard_normal(5), "scalar": np.array(2.5)}
    back = serialize.loads(serialize.dumps(tensors))
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].dtype == np.float64
        assert np.array_equal(back[k], tensors[k])


def test_layout_by_hand():
    blob = serialize.dumps([("w", np.array([[1.0, 2.0]]))])
    expected = b"LORS1" + struct.pack("<I", 1) + struct.pack("<I", 1) + b"w"
    expected += struct.pack("<III", 2, 1, 2) + struct.pack("<2d", 1.0, 2.0)
    assert blob == expected


def test_bad_magic():
    with pytest.raises(serialize.FormatError):
        serialize.loads(b"LORS2" + bytes(4))


def test_truncated():
    blob = serialize.dumps({"w": np.ones(4)})
    with pytest.raises(serialize.FormatError):
        serialize.loads(blob[:-3])
    with pytest.raises(serialize.FormatError):
        serialize.loads(blob + b"\0")


def test_model_round_trip(tmp_path):
    a, b = MixerDecoder(TINY, seed=1), MixerDecoder(TINY, seed=2)
    path = tmp_path / "m.lors"
    serialize.save_model(path, a)
    serialize.load_model(path, b)
    for (na, ta), (nb, tb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and np.array_equal(ta.data, tb.data)


def test_model_mismatch(tmp_path):
    p = StaticLorsParam(3, 3, 2, rank=1)
    init_static(p, 0)
    path = tmp_path / "p.lors"
    serialize.save_model(path, type("M", (), {"named_parameters": lambda self: p.named_parameters()})())
    with pytest.raises(serialize.FormatError):
        serialize.load_model(path, MixerDecoder(TINY))
