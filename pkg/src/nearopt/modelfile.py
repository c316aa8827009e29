"""YAML model files.

Layout::

    coefficients:
      A: 0.0                      # number, or {breakpoints: [...], values: [...]}
      ...                         # B, C, D, a, b, c likewise
      M: 1.0
      x0: 0.0
    cost:
      running:                    # sum of coef * x^x * y^y * u^u
        - {coef: 1.0, x: 0, y: 0, u: 1}
      terminal: [0.0, 1.0, 0.5]   # ascending coefficients of phi(x)
      initial: [0.0, -1.0]        # ascending coefficients of gamma(y)
    control_set: {lower: 0.0, upper: 1.0, convex: true}
    multipliers: {theta0: 1.0, theta1: {const: 0.0, slope: 0.0}}

Unknown fields are rejected; errors carry the dotted field path and, when
available, the line number in the file.
"""
from __future__ import annotations

import numbers
from pathlib import Path

import yaml

from .errors import ModelFileError
from .model import (ControlSet, CostSpec, ModelCoefficients, MultiplierPair, PiecewiseConstant,
                    polynomial_cost)

COEFFICIENT_NAMES = ("A", "B", "C", "D", "a", "b", "c")
SECTIONS = {
    "coefficients": set(COEFFICIENT_NAMES) | {"M", "x0"},
    "cost": {"running", "terminal", "initial"},
    "control_set": {"lower", "upper", "convex"},
    "multipliers": {"theta0", "theta1"},
}
REQUIRED = {
    "coefficients": set(COEFFICIENT_NAMES) | {"M", "x0"},
    "cost": {"running", "terminal", "initial"},
    "control_set": {"lower", "upper"},
    "multipliers": {"theta0"},
}


class _Lines:
    """Map dotted field paths to 1-based line numbers using the YAML node tree."""

    def __init__(self, node):
        self.lines = {}
        if node is not None:
            self._walk(node, "")

    def _walk(self, node, prefix):
        self.lines[prefix] = node.start_mark.line + 1
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                path = f"{prefix}.{k.value}" if prefix else str(k.value)
                self.lines[path] = k.start_mark.line + 1
                self._walk(v, path)
                self.lines[path] = k.start_mark.line + 1
        elif isinstance(node, yaml.SequenceNode):
            for i, v in enumerate(node.value):
                self._walk(v, f"{prefix}[{i}]")

    def get(self, path):
        while path:
            if path in self.lines:
                return self.lines[path]
            cut = max(path.rfind("."), path.rfind("["))
            path = path[:cut] if cut > 0 else ""
        return self.lines.get("")


class _Reader:
    def __init__(self, lines):
        self.lines = lines

    def fail(self, msg, path):
        raise ModelFileError(msg, field=path, line=self.lines.get(path))

    def mapping(self, obj, path, allowed, required):
        if not isinstance(obj, dict):
            self.fail("expected a mapping", path)
        for key in obj:
            if key not in allowed:
                self.fail(f"unknown field {key!r}", f"{path}.{key}" if path else str(key))
        for key in sorted(required - set(obj)):
            self.fail(f"missing required field {key!r}", f"{path}.{key}" if path else str(key))
        return obj

    def number(self, v, path):
        if isinstance(v, bool) or not isinstance(v, numbers.Real):
            self.fail(f"expected a number, got {v!r}", path)
        return float(v)

    def integer(self, v, path):
        if isinstance(v, bool) or not isinstance(v, numbers.Integral) or v < 0:
            self.fail(f"expected a non-negative integer, got {v!r}", path)
        return int(v)

    def numbers(self, v, path):
        if not isinstance(v, list):
            self.fail("expected a list of numbers", path)
        return [self.number(e, f"{path}[{i}]") for i, e in enumerate(v)]

    def piecewise(self, v, path):
        if isinstance(v, dict):
            self.mapping(v, path, {"breakpoints", "values"}, {"breakpoints", "values"})
            try:
                return PiecewiseConstant(tuple(self.numbers(v["breakpoints"], f"{path}.breakpoints")),
                                         tuple(self.numbers(v["values"], f"{path}.values")))
            except ValueError as exc:
                self.fail(str(exc), path)
        return self.number(v, path)


def parse_model(data, lines=None):
    """Build (coeffs, cost, uset, multipliers) from already-loaded YAML data."""
    r = _Reader(lines or _Lines(None))
    if data is None:
        r.fail("empty model file", "")
    r.mapping(data, "", set(SECTIONS), set(SECTIONS))
    co = r.mapping(data["coefficients"], "coefficients", SECTIONS["coefficients"], REQUIRED["coefficients"])
    kw = {n: r.piecewise(co[n], f"coefficients.{n}") for n in COEFFICIENT_NAMES}
    coeffs = ModelCoefficients(M=r.number(co["M"], "coefficients.M"),
                               x0=r.number(co["x0"], "coefficients.x0"), **kw)

    cs = r.mapping(data["cost"], "cost", SECTIONS["cost"], REQUIRED["cost"])
    if not isinstance(cs["running"], list):
        r.fail("expected a list of monomials", "cost.running")
    running = []
    for i, term in enumerate(cs["running"]):
        p = f"cost.running[{i}]"
        r.mapping(term, p, {"coef", "x", "y", "u"}, {"coef"})
        running.append((r.number(term["coef"], f"{p}.coef"),
                        *(r.integer(term.get(v, 0), f"{p}.{v}") for v in ("x", "y", "u"))))
    cost = polynomial_cost(running, r.numbers(cs["terminal"], "cost.terminal"),
                           r.numbers(cs["initial"], "cost.initial"))

    us = r.mapping(data["control_set"], "control_set", SECTIONS["control_set"], REQUIRED["control_set"])
    convex = us.get("convex", True)
    if not isinstance(convex, bool):
        r.fail("expected true or false", "control_set.convex")
    try:
        uset = ControlSet(r.number(us["lower"], "control_set.lower"),
                          r.number(us["upper"], "control_set.upper"), convex)
    except ValueError as exc:
        r.fail(str(exc), "control_set")

    mu = r.mapping(data["multipliers"], "multipliers", SECTIONS["multipliers"], REQUIRED["multipliers"])
    t1 = mu.get("theta1", {})
    if isinstance(t1, dict):
        r.mapping(t1, "multipliers.theta1", {"const", "slope"}, set())
        const = r.number(t1.get("const", 0.0), "multipliers.theta1.const")
        slope = r.number(t1.get("slope", 0.0), "multipliers.theta1.slope")
    else:
        const, slope = r.number(t1, "multipliers.theta1"), 0.0
    try:
        mult = MultiplierPair(r.number(mu["theta0"], "multipliers.theta0"), const, slope)
    except ValueError as exc:
        r.fail(str(exc), "multipliers.theta0")
    return coeffs, cost, uset, mult


def loads(text: str):
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ModelFileError(f"invalid YAML: {getattr(exc, 'problem', exc)}",
                             line=mark.line + 1 if mark else None) from exc
    return parse_model(data, _Lines(node))


def parse_model_file(path):
    """Read a model file; returns (ModelCoefficients, CostSpec, ControlSet, MultiplierPair)."""
    return loads(Path(path).read_text())


def _coef_out(pc: PiecewiseConstant):
    if pc.is_constant:
        return pc.values[0]
    return {"breakpoints": list(pc.breakpoints), "values": list(pc.values)}


def to_data(coeffs: ModelCoefficients, cost: CostSpec, uset: ControlSet, mult: MultiplierPair):
    if cost.source is None:
        raise ValueError("only polynomial costs can be serialised")
    src = cost.source
    co = {n: _coef_out(getattr(coeffs, n)) for n in COEFFICIENT_NAMES}
    co["M"] = float(coeffs.M)
    co["x0"] = float(coeffs.x0)
    return {
        "coefficients": co,
        "cost": {
            "running": [{"coef": c, "x": px, "y": py, "u": pu} for c, px, py, pu in src["running"]],
            "terminal": list(src["terminal"]),
            "initial": list(src["initial"]),
        },
        "control_set": {"lower": uset.lower, "upper": uset.upper, "convex": bool(uset.convex_flag)},
        "multipliers": {"theta0": mult.theta0,
                        "theta1": {"const": mult.theta1_const, "slope": mult.theta1_slope}},
    }


def dumps(coeffs, cost, uset, mult) -> str:
    return yaml.safe_dump(to_data(coeffs, cost, uset, mult), sort_keys=False)


def write_model_file(path, coeffs, cost, uset, mult):
    Path(path).write_text(dumps(coeffs, cost, uset, mult))
