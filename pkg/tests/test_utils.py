import numpy as np
import pytest

from src.exceptions import ParseError
from src.utils import chunk_ranges, parallel_map, read_json, read_raw, stage_outputs, write_json, write_raw


def test_chunk_ranges():
    assert chunk_ranges(10, 4) == [(0, 4), (4, 8), (8, 10)]
    assert chunk_ranges(0, 4) == []
    assert chunk_ranges(3, 0) == [(0, 1), (1, 2), (2, 3)]


@pytest.mark.parametrize("workers", [1, 4])
def test_parallel_map_keeps_order(workers):
    assert parallel_map(lambda x: x * x, range(20), workers=workers) == [x * x for x in range(20)]


def test_parallel_map_propagates_errors():
    def fail(x):
        if x == 3:
            raise ValueError("bad item")
        return x

    with pytest.raises(ValueError):
        parallel_map(fail, range(5), workers=2)


def test_raw_round_trip_and_size_check(tmp_path):
    values = np.arange(12, dtype=np.float32).reshape(3, 4)
    path = write_raw(tmp_path / "a.f32", values, "f4")
    assert path.stat().st_size == 48
    assert np.array_equal(read_raw(path, "f4", 12).reshape(3, 4), values)
    with pytest.raises(ParseError) as info:
        read_raw(path, "f4", 13)
    assert info.value.offset == 48


def test_json_helpers(tmp_path):
    path = write_json(tmp_path / "nested" / "a.json", {"b": [1, 2]})
    assert read_json(path) == {"b": [1, 2]}
    path.write_text('{"b": [1, 2')
    with pytest.raises(ParseError):
        read_json(path)


def test_failed_stage_removes_its_outputs(tmp_path):
    (tmp_path / "keep.txt").write_text("earlier stage")
    with pytest.raises(RuntimeError):
        with stage_outputs(tmp_path) as out:
            out.path("sub/partial.bin").write_bytes(b"\x00")
            raise RuntimeError("stage failed")
    assert not (tmp_path / "sub" / "partial.bin").exists()
    assert (tmp_path / "keep.txt").exists()

    with stage_outputs(tmp_path) as out:
        out.path("done.bin").write_bytes(b"\x01")
    assert (tmp_path / "done.bin").exists()
