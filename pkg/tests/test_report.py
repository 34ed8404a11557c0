import os

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from impulse_qvi.impulse import ValueFunction
from impulse_qvi.report import SCHEMA_VERSION, RunReport, parse_report, read_surface, surface_csv, write_atomic, write_surface

finite = st.floats(-1e300, 1e300, allow_nan=False, allow_subnormal=True)


@given(
    values=arrays(np.float64, (3, 4, 2), elements=finite),
    stderr=arrays(np.float64, (3, 4, 2), elements=st.floats(0, 1e10)),
)
def test_surface_round_trip_is_bit_exact(tmp_path_factory, values, stderr):
    times = np.array([0.0, 0.1, 1 / 3])
    axes = [np.linspace(-1, 2, 4), np.array([np.pi, 7.25])]
    vf = ValueFunction(times, axes, values, stderr)
    path = tmp_path_factory.mktemp("s") / "surface.csv"
    write_surface(path, vf)
    back = read_surface(path)
    assert np.array_equal(back.values, vf.values) and np.array_equal(back.stderr, vf.stderr)
    for a, b in zip(back.axes, vf.axes):
        assert np.array_equal(a, b)
    assert np.array_equal(back.times, vf.times)


def test_surface_layout():
    vf = ValueFunction.constant(np.array([0.0, 0.5]), [[0.0, 1.0]], 2, 3.0)
    lines = surface_csv(vf).splitlines()
    assert lines[0] == "t,x1,value,stderr"
    assert lines[1:] == ["0,0,3,0", "0,1,3,0", "0.5,0,3,0", "0.5,1,3,0"]


def test_read_surface_rejects_ragged(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("t,x1,value,stderr\n0,0,1,0\n0,1,1,0\n0.5,0,1,0\n")
    with pytest.raises(ValueError, match="full grid"):
        read_surface(p)


def test_write_atomic_leaves_nothing_on_failure(tmp_path):
    target = tmp_path / "out.txt"
    target.write_text("old")
    with pytest.raises(TypeError):
        write_atomic(target, object())
    assert target.read_text() == "old"
    assert sorted(os.listdir(tmp_path)) == ["out.txt"]
    write_atomic(tmp_path / "nested" / "new.txt", "fresh")
    assert (tmp_path / "nested" / "new.txt").read_text() == "fresh"


def test_report_render_and_parse_are_inverse():
    rep = RunReport()
    rep.set("run", subcommand="solve", seed=2**63 + 5, ratio=0.1 + 0.2, flags=[1, 2], nested={"b": 1, "a": None})
    rep.set("solver", converged=True, value=np.float64(1e-300), n=np.int64(4), arr=np.array([1.5, 2.0]))
    rep.table("estimates", ["x1", "note", "ok"], [[0.25, 'has, comma "q"', True], [1 / 3, "", False]])
    text = rep.render()
    assert text.startswith(f"schema_version = {SCHEMA_VERSION}\n")
    got = parse_report(text)
    assert got["schema_version"] == SCHEMA_VERSION
    assert got["sections"]["run"] == {"subcommand": "solve", "seed": 2**63 + 5, "ratio": 0.1 + 0.2, "flags": [1, 2], "nested": {"a": None, "b": 1}}
    assert got["sections"]["solver"] == {"converged": True, "value": 1e-300, "n": 4, "arr": [1.5, 2.0]}
    tab = got["tables"]["estimates"]
    assert tab["columns"] == ["x1", "note", "ok"]
    assert tab["rows"] == [["0.25", 'has, comma "q"', "true"], ["%.17g" % (1 / 3), "", "false"]]
    assert float(tab["rows"][1][0]) == 1 / 3


def test_report_rendering_is_deterministic():
    def build():
        r = RunReport()
        r.set("a", z=1, y={"q": 2, "p": 3})
        r.table("t", ["c"], [[0.1]])
        return r.render()

    assert build() == build()
    assert '{"p": 3, "q": 2}' in build()
