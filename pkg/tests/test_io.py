import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from beyondlog import io, nn


class TestEmbeddings:
    @given(hnp.arrays(np.float32, st.tuples(st.integers(0, 6), st.integers(1, 5)),
                      elements=st.floats(-1e6, 1e6, width=32)))
    @settings(max_examples=30, deadline=None)
    def test_roundtrip_bit_identical(self, tmp_path_factory, m):
        path = tmp_path_factory.mktemp("emb") / "h.bin"
        ids = list(range(10, 10 + len(m)))
        io.write_embeddings(path, ids, m)
        back_ids, back = io.read_embeddings(path)
        assert back_ids == ids
        assert back.tobytes() == m.astype("<f4").tobytes() and back.shape == m.shape

    def test_layout(self, tmp_path):
        io.write_embeddings(tmp_path / "h.bin", [7], np.array([[1.0, 2.0]], dtype=np.float32))
        raw = (tmp_path / "h.bin").read_bytes()
        assert raw[:8] == b"RSEQEMB1"
        assert raw[8:16] == (1).to_bytes(8, "little") and raw[16:20] == (2).to_bytes(4, "little")
        assert len(raw) == 20 + 8
        assert (tmp_path / "h.bin.ids").read_text() == "7\n"

    def test_empty_valid(self, tmp_path):
        io.write_embeddings(tmp_path / "e.bin", [], np.zeros((0, 4), dtype=np.float32))
        ids, m = io.read_embeddings(tmp_path / "e.bin")
        assert ids == [] and m.shape == (0, 4)

    def test_bad_magic(self, tmp_path):
        io.write_embeddings(tmp_path / "h.bin", [1], np.ones((1, 2), dtype=np.float32))
        raw = bytearray((tmp_path / "h.bin").read_bytes())
        raw[0:8] = b"NOTMAGIC"
        (tmp_path / "h.bin").write_bytes(bytes(raw))
        with pytest.raises(io.FormatError) as e:
            io.read_embeddings(tmp_path / "h.bin")
        assert e.value.offset == 0

    def test_truncated(self, tmp_path):
        io.write_embeddings(tmp_path / "h.bin", [1, 2], np.ones((2, 3), dtype=np.float32))
        raw = (tmp_path / "h.bin").read_bytes()
        (tmp_path / "h.bin").write_bytes(raw[:-5])
        with pytest.raises(io.FormatError, match="byte"):
            io.read_embeddings(tmp_path / "h.bin")


def _store(shape=(3, 2), seed=0):
    rng = np.random.default_rng(seed)
    s = nn.ParamStore()
    s.add("a.w", rng.normal(size=shape).astype(np.float32))
    s.add("a.b", rng.normal(size=shape[1:]).astype(np.float32))
    s.add("c", np.array(3.5, dtype=np.float64))
    return s


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        s = _store()
        io.save_checkpoint(tmp_path / "m.ckpt", s, {"preset": "desk"})
        back, meta = io.load_checkpoint(tmp_path / "m.ckpt")
        assert meta == {"preset": "desk"} and back.names() == s.names()
        for n in s.names():
            assert back[n].dtype == s[n].dtype
            assert back[n].tobytes() == s[n].tobytes()

    def test_load_into(self, tmp_path):
        io.save_checkpoint(tmp_path / "m.ckpt", _store(seed=1))
        target = _store(seed=2)
        io.load_checkpoint(tmp_path / "m.ckpt", into=target)
        np.testing.assert_array_equal(target["a.w"], _store(seed=1)["a.w"])

    def test_missing_name_listed(self, tmp_path):
        s = _store()
        io.save_checkpoint(tmp_path / "m.ckpt", s)
        target = _store()
        target.add("extra.w", np.zeros(2, dtype=np.float32))
        with pytest.raises(io.CheckpointMismatch, match="extra.w"):
            io.load_checkpoint(tmp_path / "m.ckpt", into=target)

    def test_shape_refused(self, tmp_path):
        io.save_checkpoint(tmp_path / "m.ckpt", _store((3, 2)))
        with pytest.raises(io.CheckpointMismatch, match="a.w"):
            io.load_checkpoint(tmp_path / "m.ckpt", into=_store((4, 2)))

    def test_unknown_version(self, tmp_path):
        io.save_checkpoint(tmp_path / "m.ckpt", _store())
        raw = bytearray((tmp_path / "m.ckpt").read_bytes())
        raw[8:12] = (99).to_bytes(4, "little")
        (tmp_path / "m.ckpt").write_bytes(bytes(raw))
        with pytest.raises(io.FormatError, match="version 99"):
            io.load_checkpoint(tmp_path / "m.ckpt")
