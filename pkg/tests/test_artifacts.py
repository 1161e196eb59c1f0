import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from qotbilevel import __version__
from qotbilevel.artifacts import (ConfigError, check_keys, config_hash, dumps, eval_expression,
                                  field_source, load_config, measure_source, parse_grid2,
                                  read_duals, read_field, read_measure, read_sparse_plan,
                                  write_duals, write_field, write_json, write_jsonl,
                                  write_measure, write_sparse_plan)
from qotbilevel.grid import Field, build_grid, product_grid
from qotbilevel.lp import TransportPlan
from qotbilevel.measures import DiscreteMeasure

G = product_grid(build_grid(0, 1, 3), build_grid(-1, 1, 4))


@settings(max_examples=40, deadline=None)
@given(arrays(float, (3, 4), elements=st.floats(-1e300, 1e300, allow_nan=False)))
def test_field_csv_roundtrip_is_exact(tmp_path_factory, v):
    path = tmp_path_factory.mktemp("f") / "f.csv"
    write_field(path, Field(G, v), {"k": 1})
    np.testing.assert_array_equal(read_field(path, G).values, v)


def test_field_csv_layout(tmp_path):
    write_field(tmp_path / "f.csv", Field(G, np.arange(12.0)), {"k": 1})
    lines = (tmp_path / "f.csv").read_text().splitlines()
    assert lines[0].startswith(f"# qotbilevel {__version__} config_sha256=")
    assert lines[1] == "x1,x2,value"
    assert lines[2] == "0.16666666666666666,-0.75,0"
    assert lines[3].startswith("0.16666666666666666,-0.25,")
    write_field(tmp_path / "g.csv", Field(G.gx, [1.0, 2.0, 3.0]))
    assert (tmp_path / "g.csv").read_text().splitlines()[0] == "x,value"


def test_reader_rejects_wrong_header_and_size(tmp_path):
    write_field(tmp_path / "f.csv", Field(G.gx, [1.0, 2.0, 3.0]))
    with pytest.raises(ConfigError):
        read_field(tmp_path / "f.csv", G)
    with pytest.raises(ConfigError):
        read_field(tmp_path / "f.csv", build_grid(0, 1, 4))
    with pytest.raises(ConfigError):
        read_measure(tmp_path / "f.csv", G.gx)
    with pytest.raises(ConfigError, match="cannot read"):
        read_field(tmp_path / "missing.csv", G)
    (tmp_path / "empty.csv").write_text("# only a comment\n")
    with pytest.raises(ConfigError, match="empty"):
        read_field(tmp_path / "empty.csv", G)
    (tmp_path / "bad.csv").write_text("x,value\n0.5,abc\n")
    with pytest.raises(ConfigError, match="malformed"):
        read_field(tmp_path / "bad.csv", build_grid(0, 1, 1))


def test_measure_plan_and_duals_roundtrip(tmp_path):
    mu = DiscreteMeasure(G.gx, [0.2, 0.0, 0.8])
    write_measure(tmp_path / "m.csv", mu)
    np.testing.assert_array_equal(read_measure(tmp_path / "m.csv", G.gx).weights, mu.weights)
    plan = TransportPlan(G, {(2, 3): 0.5, (0, 1): 0.25, (1, 0): 0.25})
    write_sparse_plan(tmp_path / "p.csv", plan)
    assert (tmp_path / "p.csv").read_text().splitlines()[:2] == ["i,j,mass", "0,1,0.25"]
    assert read_sparse_plan(tmp_path / "p.csv", G).weights == plan.weights
    a1, a2 = Field(G.gx, [1.0, -2.0, 3.5]), Field(G.gy, [0.1, 0.2, 0.3, 1 / 3])
    write_duals(tmp_path / "d.csv", a1, a2)
    d = read_duals(tmp_path / "d.csv", G.gx, G.gy)
    np.testing.assert_array_equal(d.alpha1.values, a1.values)
    np.testing.assert_array_equal(d.alpha2.values, a2.values)
    with pytest.raises(ConfigError):
        read_duals(tmp_path / "d.csv", G.gy, G.gx)


def test_config_hash_ignores_key_order():
    assert config_hash({"a": 1, "b": [1, 2]}) == config_hash({"b": [1, 2], "a": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 1.5})
    assert len(config_hash({})) == 64


def test_json_outputs_are_canonical(tmp_path):
    obj = {"b": np.float64(0.1), "a": [np.int64(3), np.bool_(True)], "c": float("inf"),
           "d": float("nan"), "e": np.array([1.5, 2.0])}
    text = dumps(obj)
    back = json.loads(text)
    assert list(back) == ["a", "b", "c", "d", "e"]
    assert back["a"] == [3, True] and back["c"] == "inf" and back["d"] == "nan"
    assert back["e"] == [1.5, 2.0]
    write_json(tmp_path / "o.json", {"x": 1}, {"cfg": 2})
    payload = json.loads((tmp_path / "o.json").read_text())
    assert payload["meta"]["version"] == __version__
    assert payload["meta"]["config_sha256"] == config_hash({"cfg": 2})
    write_jsonl(tmp_path / "h.jsonl", [{"k": 1}, {"k": 2}], {"cfg": 2})
    recs = [json.loads(ln) for ln in (tmp_path / "h.jsonl").read_text().splitlines()]
    assert [r["k"] for r in recs] == [1, 2]
    assert all(r["config_sha256"] == config_hash({"cfg": 2}) for r in recs)
    write_jsonl(tmp_path / "e.jsonl", [])
    assert (tmp_path / "e.jsonl").read_text() == ""


def test_strict_keys():
    check_keys({"a": 1}, ("a", "b"), "cfg", required=("a",))
    with pytest.raises(ConfigError, match="unknown key"):
        check_keys({"a": 1, "zz": 2}, ("a",), "cfg")
    with pytest.raises(ConfigError, match="missing key"):
        check_keys({}, ("a",), "cfg", required=("a",))
    with pytest.raises(ConfigError):
        check_keys([1], ("a",), "cfg")
    with pytest.raises(ConfigError):
        parse_grid2({"x1": {"lo": 0, "hi": 1, "n": 2}, "x2": {"lo": 1, "hi": 0, "n": 2}})


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("{oops")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_config(tmp_path / "bad.json")
    (tmp_path / "list.json").write_text("[1, 2]")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "list.json")


@pytest.mark.parametrize("expr", ["().__class__", "__import__('os')", "x.sum()", "x[0]",
                                  "open('f')", "lambda: 1", "[i for i in x]", "1 +"])
def test_expressions_are_sandboxed(expr):
    with pytest.raises(ConfigError):
        eval_expression(expr, x=np.ones(3))


def test_field_and_measure_sources(tmp_path):
    f = field_source("abs(x1 - x2) ** 2", G, tmp_path, "cost")
    x1, x2 = G.mesh()
    np.testing.assert_allclose(f.values, (x1 - x2) ** 2)
    assert field_source(2, G, tmp_path, "cost").values.min() == 2.0
    # an expression in one variable broadcasts over the other
    assert field_source("x1", G, tmp_path, "cost").values.shape == G.shape
    write_field(tmp_path / "c.csv", f)
    np.testing.assert_array_equal(field_source({"path": "c.csv"}, G, tmp_path, "c").values, f.values)
    with pytest.raises(ConfigError):
        field_source([1, 2], G, tmp_path, "cost")
    mu = measure_source("1 + x", G.gx, tmp_path, "mu1", normalize=True)
    assert mu.total_mass == pytest.approx(1.0)
    with pytest.raises(ConfigError):
        measure_source("x - 1", G.gx, tmp_path, "mu1")
