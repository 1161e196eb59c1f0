"""CSV/JSON artifacts and strict config parsing.

CSV layouts (one header row, optional leading ``#`` comment lines):

* 1D field: ``x,value``; 2D field: ``x1,x2,value`` (row-major, first axis slowest)
* measure: ``x,weight`` (mass per cell)
* sparse plan: ``i,j,mass``
* dual potentials: ``axis,x,value`` with ``axis`` in {1, 2}
"""

from __future__ import annotations

import ast
import csv
import hashlib
import io
import json
import math
from pathlib import Path

import numpy as np

from . import __version__
from .grid import Field, Grid1D, Grid2D, build_grid, product_grid

FLOAT_FMT = "{:.17g}"


class ConfigError(ValueError):
    pass


def config_hash(cfg) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def meta(cfg) -> dict:
    return {"library": "qotbilevel", "version": __version__, "config_sha256": config_hash(cfg)}


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return FLOAT_FMT.format(float(v))


def _header_comment(cfg) -> str:
    m = meta(cfg)
    return f"# {m['library']} {m['version']} config_sha256={m['config_sha256']}\n"


def _write_rows(path: Path, header, rows, cfg=None):
    buf = io.StringIO()
    if cfg is not None:
        buf.write(_header_comment(cfg))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    Path(path).write_text(buf.getvalue())


def _read_rows(path):
    try:
        with open(path, newline="") as fh:
            lines = [ln for ln in fh if not ln.startswith("#") and ln.strip()]
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from exc
    if not lines:
        raise ConfigError(f"{path}: empty file")
    reader = csv.reader(lines)
    header = [h.strip() for h in next(reader)]
    try:
        rows = [[float(v) for v in row] for row in reader]
        return header, np.array(rows, dtype=float).reshape(len(rows), len(header))
    except ValueError as exc:
        raise ConfigError(f"{path}: malformed row ({exc})") from exc


def write_field(path, f: Field, cfg=None):
    if isinstance(f.grid, Grid2D):
        x1, x2 = f.grid.mesh()
        rows = zip(x1.ravel(), x2.ravel(), f.values.ravel())
        _write_rows(path, ["x1", "x2", "value"], rows, cfg)
    else:
        _write_rows(path, ["x", "value"], zip(f.grid.centers, f.values), cfg)


def read_field(path, grid) -> Field:
    header, data = _read_rows(path)
    want = ["x1", "x2", "value"] if isinstance(grid, Grid2D) else ["x", "value"]
    if header != want:
        raise ConfigError(f"{path}: expected header {','.join(want)}, got {','.join(header)}")
    if data.shape[0] != grid.size:
        raise ConfigError(f"{path}: {data.shape[0]} rows for a grid of {grid.size} cells")
    return Field(grid, data[:, -1])


def write_measure(path, mu, cfg=None):
    _write_rows(path, ["x", "weight"], zip(mu.grid.centers, mu.weights), cfg)


def read_measure(path, grid: Grid1D):
    from .measures import DiscreteMeasure

    header, data = _read_rows(path)
    if header != ["x", "weight"]:
        raise ConfigError(f"{path}: expected header x,weight")
    if data.shape[0] != grid.n:
        raise ConfigError(f"{path}: {data.shape[0]} rows for a grid of {grid.n} cells")
    return DiscreteMeasure(grid, data[:, 1])


def write_sparse_plan(path, plan, cfg=None):
    rows = [(i, j, w) for (i, j), w in sorted(plan.weights.items())]
    _write_rows(path, ["i", "j", "mass"], rows, cfg)


def read_sparse_plan(path, grid: Grid2D):
    from .lp import TransportPlan

    header, data = _read_rows(path)
    if header != ["i", "j", "mass"]:
        raise ConfigError(f"{path}: expected header i,j,mass")
    return TransportPlan(grid, {(int(i), int(j)): float(m) for i, j, m in data})


def write_duals(path, a1: Field, a2: Field, cfg=None):
    rows = [(1, x, v) for x, v in zip(a1.grid.centers, a1.values)]
    rows += [(2, x, v) for x, v in zip(a2.grid.centers, a2.values)]
    _write_rows(path, ["axis", "x", "value"], rows, cfg)


def read_duals(path, g1: Grid1D, g2: Grid1D):
    from .qot import DualPotentials

    header, data = _read_rows(path)
    if header != ["axis", "x", "value"]:
        raise ConfigError(f"{path}: expected header axis,x,value")
    a1 = data[data[:, 0] == 1, 2]
    a2 = data[data[:, 0] == 2, 2]
    if a1.size != g1.n or a2.size != g2.n:
        raise ConfigError(f"{path}: potential sizes do not match the grids")
    return DualPotentials(Field(g1, a1), Field(g2, a2))


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    return obj


def dumps(obj) -> str:
    return json.dumps(_clean(obj), sort_keys=True, indent=2) + "\n"


def write_json(path, obj, cfg=None):
    payload = dict(obj)
    if cfg is not None:
        payload["meta"] = meta(cfg)
    Path(path).write_text(dumps(payload))


def write_jsonl(path, records, cfg=None):
    lines = []
    m = meta(cfg) if cfg is not None else None
    for rec in records:
        rec = dict(rec)
        if m is not None:
            rec["config_sha256"] = m["config_sha256"]
        lines.append(json.dumps(_clean(rec), sort_keys=True))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


# --------------------------------------------------------------------------
# config helpers

_SAFE_NAMES = {
    name: getattr(np, name)
    for name in ("sin", "cos", "tan", "exp", "log", "sqrt", "abs", "sign", "where",
                 "minimum", "maximum", "pi", "tanh", "arctan", "heaviside")
}


def check_keys(d: dict, allowed, where: str, required=()):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object")
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    missing = [k for k in required if k not in d]
    if missing:
        raise ConfigError(f"{where}: missing key(s) {', '.join(missing)}")


def load_config(path) -> tuple[dict, Path]:
    p = Path(path)
    try:
        cfg = json.loads(p.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {p}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"{p}: top level must be an object")
    return cfg, p.parent


def parse_axis(d, where) -> Grid1D:
    check_keys(d, ("lo", "hi", "n"), where, required=("lo", "hi", "n"))
    try:
        return build_grid(d["lo"], d["hi"], d["n"])
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def parse_grid2(d, where="grid") -> Grid2D:
    check_keys(d, ("x1", "x2"), where, required=("x1", "x2"))
    return product_grid(parse_axis(d["x1"], f"{where}.x1"), parse_axis(d["x2"], f"{where}.x2"))


_ALLOWED_NODES = (ast.Expression, ast.BinOp, ast.UnaryOp, ast.Compare, ast.BoolOp, ast.IfExp,
                  ast.Call, ast.Name, ast.Constant, ast.Load, ast.operator, ast.unaryop,
                  ast.cmpop, ast.boolop)


def eval_expression(expr: str, **coords):
    """Evaluate an arithmetic expression in the coordinates and a few numpy functions."""
    try:
        tree = ast.parse(expr, mode="eval")
    except SyntaxError as exc:
        raise ConfigError(f"cannot parse expression {expr!r}: {exc.msg}") from exc
    names = {**_SAFE_NAMES, **coords}
    for node in ast.walk(tree):
        if not isinstance(node, _ALLOWED_NODES):
            raise ConfigError(f"expression {expr!r}: {type(node).__name__} is not allowed")
        if isinstance(node, ast.Name) and node.id not in names:
            raise ConfigError(f"expression {expr!r}: unknown name {node.id!r}")
        if isinstance(node, ast.Call) and not isinstance(node.func, ast.Name):
            raise ConfigError(f"expression {expr!r}: only named functions may be called")
    try:
        return eval(compile(tree, "<expr>", "eval"), {"__builtins__": {}}, names)  # noqa: S307
    except Exception as exc:  # noqa: BLE001
        raise ConfigError(f"cannot evaluate expression {expr!r}: {exc}") from exc


def field_source(spec, grid, base: Path, where: str) -> Field:
    """A field given as a number, an expression string, or ``{"path": csv}``."""
    if isinstance(spec, (int, float)):
        return Field(grid, np.full(grid.shape, float(spec)))
    if isinstance(spec, str):
        if isinstance(grid, Grid2D):
            x1, x2 = grid.mesh()
            vals = eval_expression(spec, x1=x1, x2=x2)
        else:
            vals = eval_expression(spec, x=grid.centers)
        return Field(grid, np.broadcast_to(np.asarray(vals, dtype=float), grid.shape))
    if isinstance(spec, dict):
        check_keys(spec, ("path",), where, required=("path",))
        return read_field(base / spec["path"], grid)
    raise ConfigError(f"{where}: expected a number, an expression or {{\"path\": ...}}")


def measure_source(spec, grid: Grid1D, base: Path, where: str, normalize=False):
    """A measure from ``{"path": csv}`` (weights) or a density expression/number."""
    from .measures import DiscreteMeasure

    if isinstance(spec, dict) and set(spec) == {"path"}:
        mu = read_measure(base / spec["path"], grid)
    else:
        f = field_source(spec, grid, base, where)
        try:
            mu = DiscreteMeasure.from_density(f)
        except ValueError as exc:
            raise ConfigError(f"{where}: {exc}") from exc
    if normalize:
        mu = DiscreteMeasure(grid, mu.weights / mu.total_mass)
    return mu
