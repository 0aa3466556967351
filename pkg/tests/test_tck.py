import numpy as np
import pytest

from tractkit.errors import FormatError
from tractkit.tck import read_tck, write_tck


def random_streamlines(rng, n=5):
    return [rng.normal(size=(rng.integers(2, 30), 3)) * 10 for _ in range(n)]


class TestTck:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        sls = random_streamlines(rng)
        p = tmp_path / "t.tck"
        write_tck(p, sls)
        got, fields = read_tck(p)
        assert fields["count"] == "5"
        assert fields["datatype"] == "Float32LE"
        assert len(got) == len(sls)
        for a, b in zip(got, sls):
            assert np.abs(a - b.astype(np.float32)).max() == 0.0

    def test_empty_tractogram(self, tmp_path):
        p = tmp_path / "e.tck"
        write_tck(p, [])
        got, fields = read_tck(p)
        assert got == []
        assert fields["count"] == "0"

    def test_header_structure(self, tmp_path):
        p = tmp_path / "h.tck"
        write_tck(p, [np.zeros((2, 3))], extra_fields={"step_size": "0.6"})
        raw = p.read_bytes()
        assert raw.startswith(b"mrtrix tracks\n")
        header = raw.split(b"END\n")[0].decode()
        assert "datatype: Float32LE" in header
        assert "step_size: 0.6" in header
        offset = int(header.split("file: . ")[1].split("\n")[0])
        assert raw[offset - 4 : offset] == b"END\n"
        # body = 2 points + NaN sep + Inf terminator = 4 triplets
        assert len(raw) - offset == 4 * 12

    def test_deterministic_bytes(self, tmp_path):
        rng = np.random.default_rng(1)
        sls = random_streamlines(rng)
        p1, p2 = tmp_path / "a.tck", tmp_path / "b.tck"
        write_tck(p1, sls, extra_fields={"seed": "42"})
        write_tck(p2, sls, extra_fields={"seed": "42"})
        assert p1.read_bytes() == p2.read_bytes()

    def test_rejects_non_tck(self, tmp_path):
        p = tmp_path / "x.tck"
        p.write_bytes(b"not tracks\nEND\n")
        with pytest.raises(FormatError):
            read_tck(p)

    def test_rejects_missing_terminator(self, tmp_path):
        p = tmp_path / "y.tck"
        write_tck(p, [np.zeros((2, 3))])
        raw = p.read_bytes()
        p.write_bytes(raw[:-12])  # drop the Inf triplet
        with pytest.raises(FormatError):
            read_tck(p)

    def test_rejects_other_datatype(self, tmp_path):
        p = tmp_path / "z.tck"
        write_tck(p, [np.zeros((2, 3))])
        raw = p.read_bytes().replace(b"Float32LE", b"Float32BE")
        p.write_bytes(raw)
        with pytest.raises(FormatError):
            read_tck(p)
