"""TNS1 tensor files and DCK1 checkpoints"""

import struct

import numpy as np
import pytest

from dcml_nn import Linear
from dcml_shared import FormatError
from dcml_storage import (decode_checkpoint, decode_tns, encode_checkpoint, encode_tns, load_checkpoint,
                          load_tns, save_checkpoint, save_tns)


def test_tns_layout_by_hand():
    payload = encode_tns(np.array([[1.0, 2.0, 3.0]]))
    assert payload[:4] == b'TNS1'
    assert payload[4] == 2
    assert struct.unpack('<2I', payload[5:13]) == (1, 3)
    assert np.array_equal(np.frombuffer(payload[13:], dtype='<f4'), [1.0, 2.0, 3.0])


def test_tns_file_round_trip(tmp_path, rng):
    array = rng.standard_normal((4, 5, 3)).astype(np.float32)
    save_tns(tmp_path / "x.tns", array)
    loaded = load_tns(tmp_path / "x.tns")
    assert loaded.dtype == np.float32 and np.array_equal(loaded, array)
    assert not list(tmp_path.glob(".x.tns.*"))


def test_tns_bad_magic_and_truncation():
    payload = encode_tns(np.ones((2, 2)))
    with pytest.raises(FormatError):
        decode_tns(b'TNS2' + payload[4:])
    with pytest.raises(FormatError):
        decode_tns(payload[:-3])
    with pytest.raises(FormatError):
        decode_tns(payload[:6])
    with pytest.raises(FormatError):
        decode_tns(payload + b'\x00')


def test_checkpoint_keeps_order_and_values(tmp_path, rng):
    params = {'b.weight': rng.standard_normal((3, 2)).astype(np.float32),
              'a.bias': np.zeros(2, dtype=np.float32)}
    save_checkpoint(tmp_path / "m.dck", params)
    loaded = load_checkpoint(tmp_path / "m.dck")
    assert list(loaded) == ['b.weight', 'a.bias']
    for name in params:
        assert np.array_equal(loaded[name], params[name])


def test_checkpoint_restores_module():
    source = Linear(4, 3, np.random.default_rng(0))
    target = Linear(4, 3, np.random.default_rng(9))
    target.load_state_dict(decode_checkpoint(encode_checkpoint(source.state_dict())))
    assert target.checksum() == source.checksum()


def test_checkpoint_header_by_hand():
    payload = encode_checkpoint({'w': np.array([1.5])})
    assert payload[:4] == b'DCK1'
    assert struct.unpack('<I', payload[4:8]) == (1,)
    assert struct.unpack('<H', payload[8:10]) == (1,)
    assert payload[10:11] == b'w'


def test_checkpoint_corruption():
    payload = encode_checkpoint({'w': np.ones((2, 2)), 'v': np.ones(3)})
    with pytest.raises(FormatError):
        decode_checkpoint(b'XXXX' + payload[4:])
    with pytest.raises(FormatError):
        decode_checkpoint(payload[:-1])
    with pytest.raises(FormatError):
        decode_checkpoint(payload[:6])
    with pytest.raises(FormatError):
        decode_checkpoint(payload + b'\x01\x02')


def test_checkpoint_name_must_be_utf8():
    entry = struct.pack('<H', 2) + b'\xff\xfe' + struct.pack('<BI', 1, 1) + struct.pack('<f', 1.0)
    with pytest.raises(FormatError) as info:
        decode_checkpoint(b'DCK1' + struct.pack('<I', 1) + entry)
    assert info.value.code == "format_error"
    with pytest.raises(FormatError):
        decode_checkpoint(b'DCK1' + struct.pack('<I', 1) + struct.pack('<H', 9) + b'ab')
