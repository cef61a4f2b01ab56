import numpy as np
import pytest

from nvg.errors import FormatError, InvariantError
from nvg.grid import Codebook, LatentGrid, StructureMap
from nvg.hierarchy import build_hierarchy
from nvg.io import (
    codebook_hash,
    gray_to_structure_map,
    read_checkpoint,
    read_pgm,
    read_sequence,
    read_tensor,
    structure_map_to_gray,
    write_checkpoint,
    write_pgm,
    write_sequence,
    write_tensor,
)
from nvg.quantize import build_contents, fit_codebook, identity_refiners


@pytest.fixture()
def seq_and_codebook():
    rng = np.random.default_rng(0)
    grid = LatentGrid(rng.normal(size=(4, 4, 3)).astype(np.float32))
    codebook = fit_codebook([grid], 8, seed=0)
    refiners = identity_refiners(4, 3)
    seq, _ = build_contents(grid, build_hierarchy(grid), codebook, refiners)
    return seq, codebook


class TestTensorFile:
    def test_roundtrip_bitexact(self, tmp_path):
        rng = np.random.default_rng(1)
        arr = rng.normal(size=(3, 5, 2)).astype(np.float32)
        path = tmp_path / "a.nvgt"
        write_tensor(path, arr)
        back = read_tensor(path)
        assert back.dtype == np.float32
        assert np.array_equal(back, arr)
        # write -> read -> write gives identical bytes
        path2 = tmp_path / "b.nvgt"
        write_tensor(path2, back)
        assert path.read_bytes() == path2.read_bytes()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.nvgt"
        path.write_bytes(b"XXXX" + b"\x00" * 20)
        with pytest.raises(FormatError):
            read_tensor(path)

    def test_truncated_payload_rejected(self, tmp_path):
        path = tmp_path / "短.nvgt"
        write_tensor(path, np.ones((2, 2), dtype=np.float32))
        blob = path.read_bytes()
        path.write_bytes(blob[:-4])
        with pytest.raises(FormatError):
            read_tensor(path)


class TestSequenceFile:
    def test_roundtrip_preserves_everything(self, tmp_path, seq_and_codebook):
        seq, codebook = seq_and_codebook
        path = tmp_path / "seq.json"
        write_sequence(path, seq, codebook)
        back = read_sequence(path, codebook)
        for (t1, s1), (t2, s2) in zip(seq.stages, back.stages):
            assert np.array_equal(t1.indices, t2.indices)
            assert np.array_equal(s1.labels, s2.labels)
        path2 = tmp_path / "seq2.json"
        write_sequence(path2, back, codebook)
        assert path.read_bytes() == path2.read_bytes()

    def test_codebook_hash_mismatch_is_hard_error(self, tmp_path, seq_and_codebook):
        seq, codebook = seq_and_codebook
        path = tmp_path / "seq.json"
        write_sequence(path, seq, codebook)
        other = Codebook(codebook.vectors + 1.0)
        with pytest.raises(InvariantError):
            read_sequence(path, other)

    def test_tampered_label_fails_validation(self, tmp_path, seq_and_codebook):
        seq, codebook = seq_and_codebook
        path = tmp_path / "seq.json"
        write_sequence(path, seq, codebook)
        text = path.read_text()
        # break balance in the stage-1 labels: flip one 0 to 1
        import json as j

        obj = j.loads(text)
        obj["stages"][1]["labels"][obj["stages"][1]["labels"].index(0)] = 1
        path.write_text(j.dumps(obj))
        with pytest.raises(InvariantError):
            read_sequence(path, codebook)

    def test_not_json_is_format_error(self, tmp_path):
        path = tmp_path / "garbage.json"
        path.write_text("{nope")
        with pytest.raises(FormatError):
            read_sequence(path)

    def test_hash_is_stable(self, seq_and_codebook):
        _, codebook = seq_and_codebook
        assert codebook_hash(codebook) == codebook_hash(Codebook(codebook.vectors.copy()))


class TestCheckpointFile:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(2)
        arrays = {"a.w": rng.normal(size=(3, 4)).astype(np.float32),
                  "b": rng.normal(size=(5,)).astype(np.float32)}
        meta = {"type": "model", "depth": 2}
        path = tmp_path / "ck.nvgc"
        write_checkpoint(path, meta, arrays)
        m2, a2 = read_checkpoint(path)
        assert m2 == meta
        assert set(a2) == set(arrays)
        for k in arrays:
            assert np.array_equal(arrays[k], a2[k])

    def test_write_is_deterministic(self, tmp_path):
        arrays = {"z": np.ones(3, dtype=np.float32), "a": np.zeros(2, dtype=np.float32)}
        p1, p2 = tmp_path / "1.nvgc", tmp_path / "2.nvgc"
        write_checkpoint(p1, {"k": 1}, arrays)
        write_checkpoint(p2, {"k": 1}, dict(reversed(list(arrays.items()))))
        assert p1.read_bytes() == p2.read_bytes()

    def test_corrupt_rejected(self, tmp_path):
        path = tmp_path / "ck.nvgc"
        path.write_bytes(b"NVGC" + b"\x01\x00\x00\x00" + b"\xff\xff\xff\xff")
        with pytest.raises(FormatError):
            read_checkpoint(path)


class TestPgm:
    def test_roundtrip(self, tmp_path):
        gray = (np.arange(12, dtype=np.uint8) * 20).reshape(3, 4)
        path = tmp_path / "m.pgm"
        write_pgm(path, gray)
        assert np.array_equal(read_pgm(path), gray)

    def test_structure_map_rendering_spreads_levels(self):
        smap = StructureMap(1, np.array([[0, 0], [1, 1]]))
        gray = structure_map_to_gray(smap)
        assert set(np.unique(gray).tolist()) == {0, 255}

    def test_binary_override_parses_darker_as_zero(self):
        gray = np.zeros((2, 4), dtype=np.uint8)
        gray[:, 2:] = 255
        smap = gray_to_structure_map(gray)
        assert np.array_equal(smap.labels, np.array([[0, 0, 1, 1], [0, 0, 1, 1]]))

    def test_unbalanced_override_rejected(self):
        gray = np.zeros((2, 4), dtype=np.uint8)
        gray[0, 0] = 255
        with pytest.raises(InvariantError):
            gray_to_structure_map(gray)

    def test_three_level_override_rejected(self):
        gray = np.zeros((2, 4), dtype=np.uint8)
        gray[0, :2] = 128
        gray[1, :2] = 255
        with pytest.raises(InvariantError):
            gray_to_structure_map(gray)

    def test_non_p5_rejected(self, tmp_path):
        path = tmp_path / "p2.pgm"
        path.write_bytes(b"P2\n2 2\n255\n0 0 0 0\n")
        with pytest.raises(FormatError):
            read_pgm(path)
