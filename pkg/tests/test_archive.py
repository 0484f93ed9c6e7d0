import struct

import numpy as np
import pytest

from asrvc.archive import (config_from_kv, config_to_kv, dump_kv, pack_archive, pack_features, parse_kv,
                           require, tensor_to_text, text_to_tensor, unpack_archive, unpack_features)
from asrvc.decoder import DecoderConfig
from asrvc.encoder import EncoderConfig
from asrvc.errors import ConfigMismatch, MissingTensor, ShapeMismatch, UnsupportedFormat, VersionMismatch
from asrvc.train import TrainConfig


def test_ntar_layout_by_hand():
    t = {"ab": np.array([[1.0, 2.0]], np.float32), "n": np.array([3.5], np.float32)}
    expected = (b"NTAR" + struct.pack("<II", 1, 2)
                + struct.pack("<H", 2) + b"ab" + struct.pack("<B", 2) + struct.pack("<II", 1, 2)
                + struct.pack("<2f", 1.0, 2.0)
                + struct.pack("<H", 1) + b"n" + struct.pack("<B", 1) + struct.pack("<I", 1)
                + struct.pack("<f", 3.5))
    assert pack_archive(t) == expected
    back = unpack_archive(expected)
    assert list(back) == ["ab", "n"] and np.array_equal(back["ab"], t["ab"])


def test_ntar_round_trip_byte_identical():
    rng = np.random.default_rng(0)
    t = {f"t{i}": rng.standard_normal(rng.integers(1, 5, size=i % 4)).astype(np.float32) for i in range(8)}
    blob = pack_archive(t)
    assert pack_archive(unpack_archive(blob)) == blob


def test_ntar_errors():
    blob = pack_archive({"x": np.zeros(3, np.float32)})
    with pytest.raises(UnsupportedFormat):
        unpack_archive(b"XXXX" + blob[4:])
    with pytest.raises(VersionMismatch):
        unpack_archive(blob[:4] + struct.pack("<I", 2) + blob[8:])
    with pytest.raises(UnsupportedFormat):
        unpack_archive(blob[:-2])
    with pytest.raises(UnsupportedFormat):
        unpack_archive(blob + b"\0")


def test_require():
    t = {"a": np.zeros((2, 3), np.float32)}
    assert require(t, "a", (2, 3)) is t["a"]
    with pytest.raises(MissingTensor, match="'b'"):
        require(t, "b")
    with pytest.raises(ShapeMismatch):
        require(t, "a", (3, 2))


def test_text_tensor_round_trip():
    s = "alice\nbob\nzoë"
    assert tensor_to_text(text_to_tensor(s)) == s


def test_feat_layout():
    m = np.arange(6, dtype=np.float32).reshape(2, 3)
    blob = pack_features(m)
    assert blob[:16] == b"FEAT" + struct.pack("<III", 1, 2, 3)
    assert np.array_equal(unpack_features(blob), m)
    with pytest.raises(UnsupportedFormat):
        unpack_features(blob[:-4])


@pytest.mark.parametrize("cfg", [EncoderConfig.paper(), EncoderConfig.toy(tap_block=3),
                                 DecoderConfig.toy(use_f0=True), TrainConfig(lr=3.3e-4, update_old_rows=True)])
def test_config_kv_round_trip(cfg):
    text = dump_kv(config_to_kv(cfg, "p."))
    assert config_from_kv(type(cfg), parse_kv(text), "p.") == cfg


def test_kv_parsing():
    assert parse_kv("# c\n a = 1 \n\nb=x=y\n") == {"a": "1", "b": "x=y"}
    with pytest.raises(UnsupportedFormat):
        parse_kv("novalue\n")
    with pytest.raises(ConfigMismatch):
        config_from_kv(TrainConfig, {"steps": "many"})
