import struct

import numpy as np
import pytest

from ztrans.checkpoint import load_checkpoint, load_model, read_checkpoint, save_checkpoint
from ztrans.errors import ConfigMismatchError, FormatError
from ztrans.model import TransformerConfig, init_params


@pytest.fixture()
def saved(tmp_path):
    c = TransformerConfig(vocab_size=20, num_languages=3, enc_layers=1, dec_layers=1,
                          d_model=8, heads=2, d_ffn=8, lole_enabled=True, d_e=4, d_h=4)
    p = init_params(c, 0)
    p["lole.E"].data[:] = np.random.default_rng(0).normal(size=p["lole.E"].shape)
    path = tmp_path / "m.ztrx"
    save_checkpoint(p, path, c, meta={"step": 12})
    return c, p, path


class TestCheckpoint:
    def test_bit_exact_round_trip(self, saved):
        c, p, path = saved
        q, cfg, meta = load_model(path)
        assert cfg == c and meta == {"step": 12}
        assert set(q) == set(p)
        for k in p:
            assert np.array_equal(p[k].data, q[k].data)

    def test_resave_is_byte_identical(self, saved, tmp_path):
        c, p, path = saved
        other = tmp_path / "again.ztrx"
        save_checkpoint(load_checkpoint(path), other, c, meta={"step": 12})
        assert other.read_bytes() == path.read_bytes()

    def test_bad_magic(self, saved):
        _, _, path = saved
        raw = bytearray(path.read_bytes())
        raw[:4] = b"NOPE"
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="magic"):
            read_checkpoint(path)

    def test_unsupported_version(self, saved):
        _, _, path = saved
        raw = bytearray(path.read_bytes())
        raw[4:6] = struct.pack("<H", 99)
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="version"):
            read_checkpoint(path)

    @pytest.mark.parametrize("cut", [3, 20, -8])
    def test_truncation(self, saved, cut):
        _, _, path = saved
        raw = path.read_bytes()
        path.write_bytes(raw[:cut])
        with pytest.raises(FormatError):
            read_checkpoint(path)

    def test_shape_mismatch(self, saved):
        c, _, path = saved
        wider = TransformerConfig(**(c.to_dict() | {"d_model": 16, "d_ffn": 16}))
        with pytest.raises(ConfigMismatchError):
            load_checkpoint(path, wider)

    def test_missing_config(self, tmp_path):
        c = TransformerConfig(vocab_size=10, num_languages=3, d_model=8, heads=2, d_ffn=8,
                              enc_layers=1, dec_layers=1, d_e=4, d_h=4)
        p = init_params(c, 0)
        path = tmp_path / "bare.ztrx"
        save_checkpoint(p, path)
        with pytest.raises(FormatError, match="config"):
            load_model(path)
