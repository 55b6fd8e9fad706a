import math

import pytest

from store import StoreError, checksum, dumps, read_csv, read_json, write_csv, write_json


def test_csv_rfc4180(tmp_path):
    path = write_csv(tmp_path / "out" / "t.csv", ["x", "note"], [(0.1, "a,b"), (math.nan, 'say "hi"'), (True, "")])
    raw = path.read_bytes()
    assert raw.startswith(b"x,note\r\n")
    assert b'"a,b"' in raw
    assert b'"say ""hi"""' in raw
    header, rows = read_csv(path)
    assert header == ["x", "note"]
    assert rows[0] == ["0.1", "a,b"]
    assert rows[1][0] == "nan"
    assert rows[2][0] == "1"


def test_json_is_canonical(tmp_path):
    a = write_json(tmp_path / "a.json", {"b": 1, "a": [1.5, math.inf]})
    b = write_json(tmp_path / "b.json", {"a": [1.5, math.inf], "b": 1})
    assert checksum(a) == checksum(b)
    assert read_json(a) == {"a": [1.5, "inf"], "b": 1}
    assert dumps({"z": 1, "y": 2}).index('"y"') < dumps({"z": 1, "y": 2}).index('"z"')


def test_errors(tmp_path):
    with pytest.raises(StoreError):
        read_json(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("{", encoding="utf-8")
    with pytest.raises(StoreError):
        read_json(tmp_path / "bad.json")
    (tmp_path / "empty.csv").write_text("", encoding="utf-8")
    with pytest.raises(StoreError):
        read_csv(tmp_path / "empty.csv")
    with pytest.raises(StoreError):
        checksum(tmp_path / "nothing")
