import json

import numpy as np
import pytest

from bangbang import io as bio
from bangbang.model import RNG_NAME, generate_instance
from bangbang.statevector import BangBangProtocol, Protocol


def test_instance_round_trip_is_exact(tmp_path):
    inst = generate_instance(6, 99)
    path = bio.write_instance(tmp_path / "a.json", inst)
    back = bio.read_instance(path)
    assert back == inst
    assert back.seed == 99 and back.rng == RNG_NAME
    assert np.array_equal(back.J, inst.J)


def test_seed_only_instance():
    inst = bio.instance_from_dict({"n": 5, "seed": 42})
    assert inst == generate_instance(5, 42)


def test_explicit_tables_win():
    d = {"n": 3, "seed": 1, "J": [[0, 1, 0.5], [1, 2, -1.0]], "h": [0.1, 0.2, 0.3]}
    inst = bio.instance_from_dict(d)
    assert inst.J[0, 1] == 0.5 and inst.J[0, 2] == 0.0 and inst.J[1, 2] == -1.0
    assert inst.h.tolist() == [0.1, 0.2, 0.3]
    assert inst != generate_instance(3, 1)
    # one explicit table overrides only its own part
    partial = bio.instance_from_dict({"n": 3, "seed": 1, "h": [0.0, 0.0, 0.0]})
    assert np.array_equal(partial.J, generate_instance(3, 1).J)
    assert partial.h.tolist() == [0.0, 0.0, 0.0]


@pytest.mark.parametrize("bad", [
    {},
    {"n": 3},
    {"n": 3, "seed": 1, "rng": "mersenne"},
    {"n": 3, "J": [[0, 0, 1.0]], "h": [0, 0, 0]},
    {"n": 3, "J": [[0, 5, 1.0]], "h": [0, 0, 0]},
    {"n": 3, "J": [], "h": [0, 0]},
    {"n": "x", "seed": 1},
])
def test_malformed_instances(bad):
    with pytest.raises(bio.FormatError):
        bio.instance_from_dict(bad)


def test_bad_json_file(tmp_path):
    p = tmp_path / "x.json"
    p.write_text("{not json")
    with pytest.raises(bio.FormatError):
        bio.read_instance(p)


def test_protocol_round_trips(tmp_path):
    bb = BangBangProtocol(1, (0.1, 0.7, 0.2))
    assert bio.read_protocol(bio.write_protocol(tmp_path / "b.json", bb)) == bb
    p = Protocol(((0.25, 0.5), (1.0, 0.5)))
    assert bio.read_protocol(bio.write_protocol(tmp_path / "p.json", p)) == p
    assert json.loads((tmp_path / "p.json").read_text()) == {
        "T": 1.0, "segments": [{"dt": 0.5, "g": 0.25}, {"dt": 0.5, "g": 1.0}]}


def test_malformed_protocol():
    with pytest.raises(bio.FormatError):
        bio.protocol_from_dict({"T": 1.0})
    with pytest.raises(bio.FormatError):
        bio.protocol_from_dict({"T": 1.0, "segments": [{"g": 0.5}]})
    with pytest.raises(ValueError):
        bio.protocol_from_dict({"T": 2.0, "start": 0, "durations": [1.0]})


def test_csv_header_and_exact_floats(tmp_path):
    rows = [{"a": 0.1, "b": 3, "c": "x"}, {"a": 1 / 3, "b": None, "c": True}]
    path = bio.write_csv(tmp_path / "t.csv", ("a", "b", "c"), rows)
    lines = path.read_text().splitlines()
    assert lines[0] == "a,b,c"
    back = bio.read_csv(path)
    assert float(back[1]["a"]) == 1 / 3
    assert back[1]["c"] == "true" and back[1]["b"] == ""
    with pytest.raises(ValueError):
        bio.write_csv(tmp_path / "u.csv", ("a",), [{"a": 1, "z": 2}])


def test_manifest_claims(tmp_path):
    m = bio.RunManifest("gen", {"n": 3}, 0)
    assert bio.claim_output_dir(tmp_path / "o", m) is False
    bio.write_manifest(tmp_path / "o", m)
    same = bio.RunManifest("gen", {"n": 3}, 0, wall_clock=99.0)
    assert same.key == m.key
    assert bio.claim_output_dir(tmp_path / "o", same) is True
    with pytest.raises(FileExistsError):
        bio.claim_output_dir(tmp_path / "o", bio.RunManifest("gen", {"n": 4}, 0))
    back = bio.read_manifest(tmp_path / "o")
    assert back.key == m.key and back.command == "gen"
