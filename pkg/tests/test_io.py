import numpy as np
import pytest

from regionattn.checkpoint import MAGIC, load_tensors, save_tensors
from regionattn.imageio import (bytes_to_pixels, decode_netpbm, encode_pgm, encode_ppm, pixels_to_bytes,
                                read_ppm, write_ppm)


def test_ppm_bytes_round_trip(tmp_path):
    b = np.random.default_rng(0).integers(0, 256, (5, 7, 3)).astype(np.uint8)
    write_ppm(tmp_path / "a.ppm", bytes_to_pixels(b))
    raw = (tmp_path / "a.ppm").read_bytes()
    assert raw == b"P6\n7 5\n255\n" + b.tobytes()
    assert np.array_equal(pixels_to_bytes(read_ppm(tmp_path / "a.ppm")), b)


def test_pgm_with_comment():
    g = np.arange(6, dtype=np.uint8).reshape(2, 3)
    data = b"P5\n# made by hand\n3 2\n255\n" + g.tobytes()
    assert np.array_equal(decode_netpbm(data), g)
    assert decode_netpbm(encode_pgm(g)).tolist() == g.tolist()


def test_bad_inputs():
    with pytest.raises(ValueError):
        decode_netpbm(b"P3\n1 1\n255\n0 0 0")
    with pytest.raises(ValueError):
        decode_netpbm(b"P6\n2 2\n255\n\x00")
    with pytest.raises(ValueError):
        encode_ppm(np.zeros((2, 2), np.uint8))


def test_checkpoint_layout(tmp_path):
    t = {"a": np.arange(6.0).reshape(2, 3), "b.c": np.array(2.5), "e": np.zeros((0, 4))}
    save_tensors(tmp_path / "x.bin", {"kind": "test", "n": 1}, t)
    raw = (tmp_path / "x.bin").read_bytes()
    assert raw[:8] == MAGIC
    hlen = int.from_bytes(raw[8:12], "little")
    assert raw[12:12 + hlen] == b'{"kind": "test", "n": 1}'
    header, back = load_tensors(tmp_path / "x.bin")
    assert header == {"kind": "test", "n": 1}
    for k in t:
        assert back[k].shape == t[k].shape and np.array_equal(back[k], t[k])
    # first tensor payload is six little-endian doubles after its name/ndim/dims
    off = 12 + hlen + 4 + 2 + 1 + 1 + 8
    assert np.array_equal(np.frombuffer(raw[off:off + 48], "<f8"), np.arange(6.0))


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "bad").write_bytes(b"NOTACKPT" + b"\x00" * 8)
    with pytest.raises(ValueError):
        load_tensors(tmp_path / "bad")
