"""Command line front end: ``nearopt <command> [options]``.

Exit status: 0 on success or a passed certificate, 2 when a certificate fails
or a hypothesis probe is violated, 1 on any other error.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import adjoint, certify, fbsde
from .errors import HypothesisViolatedError, ModelFileError, NearOptError
from .model import ControlProcess, validate_model
from .modelfile import dumps, parse_model_file
from .paths import TimeGrid, sample_brownian
from .presets import FAMILIES, PRESETS, load_preset

SCHEMA_VERSION = "1"
COMMANDS = ("simulate", "adjoints", "certify-necessary", "certify-sufficient", "sweep-order",
            "validate", "duality")
DEFAULT_FAMILY = {"certify-necessary": "sqrt", "certify-sufficient": "square"}


@dataclass(frozen=True)
class RunConfig:
    command: str
    model_path: str | None = None
    preset: str | None = None
    n_paths: int = 10000
    n_steps: int = 200
    seed: int = 0
    epsilon: float = 0.04
    beta: float = certify.DEFAULT_BETA
    u_grid_size: int = certify.DEFAULT_U_GRID
    output_path: str | None = None
    format: str = "json"
    control: str | None = None
    family: str | None = None
    epsilons: tuple = (0.16, 0.04, 0.01)
    compare: str = "const:0.5"
    variant: str = "sufficient"
    method: str = "auto"
    basis_degree: int = 3
    ceiling: float = 1.0
    max_csv_paths: int = 1000

    def __post_init__(self):
        if self.command not in COMMANDS:
            raise ValueError(f"unknown command {self.command!r}")
        if (self.model_path is None) == (self.preset is None):
            raise ValueError("exactly one of --model and --preset is required")
        for name in ("n_paths", "n_steps", "epsilon", "u_grid_size", "ceiling", "max_csv_paths"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if any(e <= 0 for e in self.epsilons):
            raise ValueError("epsilons must be positive")


def _positive(kind):
    def conv(text):
        v = kind(text)
        if not v > 0:
            raise argparse.ArgumentTypeError(f"expected a positive value, got {text}")
        return v
    return conv


def _eps_list(text):
    try:
        vals = tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad epsilon list {text!r}")
    if not vals or any(v <= 0 for v in vals):
        raise argparse.ArgumentTypeError("epsilons must be positive")
    return vals


def build_parser():
    ap = argparse.ArgumentParser(prog="nearopt", description="Near-optimality certificates for controlled linear FBSDEs.")
    ap.add_argument("command", choices=COMMANDS)
    src = ap.add_mutually_exclusive_group(required=True)
    src.add_argument("--model", dest="model_path", help="YAML model file")
    src.add_argument("--preset", choices=PRESETS)
    ap.add_argument("--n-paths", type=_positive(int), default=10000)
    ap.add_argument("--n-steps", type=_positive(int), default=200)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epsilon", type=_positive(float), default=0.04)
    ap.add_argument("--beta", type=float, default=certify.DEFAULT_BETA)
    ap.add_argument("--u-grid-size", type=_positive(int), default=certify.DEFAULT_U_GRID)
    ap.add_argument("--output", dest="output_path")
    ap.add_argument("--format", choices=("csv", "json"), default="json")
    ap.add_argument("--control", help="const:V, or a family name evaluated at --epsilon")
    ap.add_argument("--family", choices=sorted(FAMILIES))
    ap.add_argument("--epsilons", type=_eps_list, default=(0.16, 0.04, 0.01))
    ap.add_argument("--compare", default="const:0.5", help="comparison control for duality")
    ap.add_argument("--variant", choices=adjoint.VARIANTS, default="sufficient")
    ap.add_argument("--method", choices=("auto", "closed-form", "lsmc"), default="auto")
    ap.add_argument("--basis-degree", type=_positive(int), default=3)
    ap.add_argument("--ceiling", type=_positive(float), default=1.0, help="constant ceiling for verdicts")
    ap.add_argument("--max-csv-paths", type=_positive(int), default=1000)
    return ap


def _control(spec, epsilon, uset):
    if spec.startswith("const:"):
        try:
            v = float(spec[6:])
        except ValueError:
            raise ValueError(f"bad constant control {spec!r}")
        if not uset.contains(v):
            raise ValueError(f"control value {v} outside [{uset.lower}, {uset.upper}]")
        return ControlProcess.constant(v, uset)
    if spec in FAMILIES:
        return _family(spec, uset)(epsilon)
    raise ValueError(f"unknown control {spec!r}; use const:V or one of {', '.join(sorted(FAMILIES))}")


def _family(name, uset):
    fn = FAMILIES[name]

    def make(eps):
        c = ControlProcess.constant(uset.clip(fn(eps)), uset)
        return ControlProcess(c.kind, c.values, uset=uset, label=f"{name}(eps={eps!r})")
    return make


def _sha(text):
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _write_table(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


class _Run:
    """State shared by the command handlers."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        if cfg.preset:
            self.coeffs, self.cost, self.uset, self.mult = load_preset(cfg.preset)
        else:
            self.coeffs, self.cost, self.uset, self.mult = parse_model_file(cfg.model_path)
        self.grid = TimeGrid(cfg.n_steps)
        self._ens = None
        self.table = None  # (header, rows) for csv output

    @property
    def ensemble(self):
        if self._ens is None:
            self._ens = sample_brownian(self.grid, self.cfg.n_paths, self.cfg.seed)
        return self._ens

    def candidate(self, default_family=None):
        cfg = self.cfg
        spec = cfg.control or cfg.family or default_family or "const:1"
        return _control(spec, cfg.epsilon, self.uset)

    def provenance(self):
        cfg = self.cfg
        config = {k: v for k, v in cfg.__dict__.items() if k not in ("output_path", "format")}
        return {
            "config_hash": _sha(json.dumps(_jsonable(config), sort_keys=True)),
            "model_hash": _sha(dumps(self.coeffs, self.cost, self.uset, self.mult)),
            "source": cfg.preset or str(cfg.model_path),
            "seed": cfg.seed, "n_paths": cfg.n_paths, "n_steps": cfg.n_steps,
        }


def _cmd_simulate(run: _Run):
    u = run.candidate()
    sol = fbsde.solve(run.coeffs, u, run.ensemble, run.cfg.method, run.cfg.basis_degree)
    mc = fbsde.evaluate_cost(run.cost, sol)
    result = {"control": u.label, "solver": sol.solver_tag, "cost_mc": mc.to_dict(),
              "y0_mean": float(sol.y[:, 0].mean()),
              "coupling_error_max": float(sol.coupling_error(run.coeffs.M).max())}
    if u.is_deterministic and run.cost.is_quadratic_in_state(run.uset):
        result["cost_exact"] = fbsde.exact_expected_cost(run.coeffs, run.cost, u.grid_values(run.grid), run.grid)
    summary = f"J({u.label}) = {mc.mean:.6f} +/- {mc.std_error:.6f} (MC, {mc.n_paths} paths)"
    if "cost_exact" in result:
        summary += f"; exact moment value {result['cost_exact']:.10f}"
    run.table = ("solution", sol)
    return result, summary, True


def _cmd_adjoints(run: _Run):
    cfg = run.cfg
    u = run.candidate()
    sol = fbsde.solve(run.coeffs, u, run.ensemble)
    b = adjoint.solve_adjoints(run.coeffs, run.cost, sol, run.mult, cfg.variant, cfg.method, cfg.basis_degree)
    dt = run.grid.dt
    result = {"control": u.label, "variant": cfg.variant, "theta": b.theta, "pk_method": b.first.method,
              "second_order_deterministic": b.second.deterministic_flag,
              "q0_mean": float(b.q[:, 0].mean()), "p0_mean": float(b.p[:, 0].mean()),
              "P1_0_mean": float(b.P1[:, 0].mean()),
              "first_order_moment": adjoint.first_order_moment(b, dt),
              "second_order_moment": adjoint.second_order_moment(b, dt)}
    summary = (f"adjoints ({cfg.variant}, {b.first.method}) along {u.label}: "
               f"E q(0) = {result['q0_mean']:.6f}, E p(0) = {result['p0_mean']:.6f}, "
               f"E P1(0) = {result['P1_0_mean']:.6f}")
    run.table = ("adjoints", b)
    return result, summary, True


def _certificate_table(run, cert):
    prof = cert.diagnostics["profile"]
    run.table = (("t", "value"), list(zip(prof["t"], prof["value"])))


def _cmd_certify_necessary(run: _Run):
    cfg = run.cfg
    u = run.candidate(DEFAULT_FAMILY[cfg.command])
    sol = fbsde.solve(run.coeffs, u, run.ensemble)
    b = adjoint.solve_adjoints(run.coeffs, run.cost, sol, run.mult, "necessary", cfg.method, cfg.basis_degree)
    cert = certify.necessary_residual(run.coeffs, run.cost, run.uset, u, run.mult, b, sol,
                                      u_grid_size=cfg.u_grid_size, epsilon=cfg.epsilon, beta=cfg.beta,
                                      ceiling=cfg.ceiling)
    _certificate_table(run, cert)
    result = cert.to_dict()
    result["control"] = u.label
    result.pop("diagnostics")
    result["profile"] = cert.diagnostics["profile"]
    result["bound"] = cert.diagnostics["bound"]
    return result, cert.to_text(), cert.verdict


def _cmd_certify_sufficient(run: _Run):
    cfg = run.cfg
    u = run.candidate(DEFAULT_FAMILY[cfg.command])
    sol = fbsde.solve(run.coeffs, u, run.ensemble)
    b = adjoint.solve_adjoints(run.coeffs, run.cost, sol, run.mult, "sufficient", cfg.method, cfg.basis_degree)
    cert = certify.sufficient_check(run.coeffs, run.cost, run.uset, u, b, sol, epsilon=cfg.epsilon,
                                    u_grid_size=cfg.u_grid_size, ceiling=cfg.ceiling)
    _certificate_table(run, cert)
    result = cert.to_dict()
    result["control"] = u.label
    diag = result.pop("diagnostics")
    result.update(diag)
    return result, cert.to_text(), cert.verdict


def _cmd_sweep_order(run: _Run):
    cfg = run.cfg
    name = cfg.family or "sqrt"
    fit = certify.near_optimality_order(run.coeffs, run.cost, run.uset, _family(name, run.uset),
                                        cfg.epsilons, run.ensemble)
    run.table = (("epsilon", "gap", "std_error"), list(zip(fit.epsilons, fit.gaps, fit.std_errors)))
    result = fit.to_dict()
    result["family"] = name
    lines = [f"family {name}: J* = {fit.J_star:.10g}"]
    lines += [f"  eps={e:<8g} gap={g:.6g}" for e, g in zip(fit.epsilons, fit.gaps)]
    lines.append(f"fit: gap = {fit.C:.4g} * eps^{fit.delta:.4g} (r2 = {fit.r2:.6g})")
    lines += [f"note: {n}" for n in fit.notes]
    return result, "\n".join(lines) + "\n", True


def _cmd_validate(run: _Run):
    rep = validate_model(run.coeffs, run.cost, run.uset, seed=run.cfg.seed)
    run.table = (("name", "assumption", "passed", "constant"),
                 [(c.name, c.assumption, c.passed, c.constant) for c in rep.checks])
    lines = [f"{'ok  ' if c.passed else 'FAIL'} {c.name}: {c.detail}" for c in rep.checks]
    return rep.to_dict(), "\n".join(lines) + "\n", rep.passed


def _cmd_duality(run: _Run):
    cfg = run.cfg
    u = run.candidate(DEFAULT_FAMILY["certify-sufficient"] if cfg.variant == "sufficient"
                      else DEFAULT_FAMILY["certify-necessary"])
    other = _control(cfg.compare, cfg.epsilon, run.uset)
    sol = fbsde.solve(run.coeffs, u, run.ensemble)
    sol_o = fbsde.solve(run.coeffs, other, run.ensemble)
    b = adjoint.solve_adjoints(run.coeffs, run.cost, sol, run.mult, cfg.variant, cfg.method, cfg.basis_degree)
    rep = adjoint.duality_check(run.coeffs, run.cost, sol, sol_o, b)
    result = rep.to_dict()
    result.update(control=u.label, compare=other.label, variant=cfg.variant)
    rows = [(name, ident.lhs, ident.rhs, ident.gap, ident.std_error, ident.passed)
            for name, ident in (("state", rep.state), ("backward", rep.backward))]
    run.table = (("identity", "lhs", "rhs", "gap", "std_error", "passed"), rows)
    lines = [f"{r[0]}: lhs={r[1]:.6g} rhs={r[2]:.6g} gap={r[3]:.3g} se={r[4]:.3g} "
             f"{'pass' if r[5] else 'fail'}" for r in rows]
    return result, "\n".join(lines) + "\n", rep.passed


HANDLERS = {
    "simulate": _cmd_simulate,
    "adjoints": _cmd_adjoints,
    "certify-necessary": _cmd_certify_necessary,
    "certify-sufficient": _cmd_certify_sufficient,
    "sweep-order": _cmd_sweep_order,
    "validate": _cmd_validate,
    "duality": _cmd_duality,
}


def _emit_csv(run: _Run, path):
    kind, payload = run.table
    if kind == "solution":
        fbsde.write_solution_csv(payload, path, run.cfg.max_csv_paths)
    elif kind == "adjoints":
        adjoint.write_adjoints_csv(payload, run.grid.times, path, run.cfg.max_csv_paths)
    else:
        _write_table(path, kind, payload)


def run(cfg: RunConfig, out=None, err=None) -> int:
    """Execute one command; returns the exit status."""
    out = out or sys.stdout
    err = err or sys.stderr
    try:
        r = _Run(cfg)
        result, summary, passed = HANDLERS[cfg.command](r)
        report = {"schema_version": SCHEMA_VERSION, "command": cfg.command,
                  "provenance": r.provenance(), "passed": bool(passed), "result": _jsonable(result)}
        body = json.dumps(report, indent=2, sort_keys=True) + "\n"
        if cfg.output_path:
            path = Path(cfg.output_path)
            if cfg.format == "csv":
                _emit_csv(r, path)
                path.with_suffix(".json").write_text(body)
            else:
                path.write_text(body)
            out.write(summary)
        else:
            err.write(summary)
            out.write(body)
        return 0 if passed else 2
    except HypothesisViolatedError as exc:
        err.write(f"hypothesis violated: {exc.probe}: {exc.detail}\n")
        return 2
    except ModelFileError as exc:
        err.write(f"model file error: {exc}\n")
        return 1
    except (NearOptError, ValueError, OSError) as exc:
        err.write(f"error: {exc}\n")
        return 1
    except Exception as exc:  # noqa: BLE001 - any other failure is an operational error
        err.write(f"error: {type(exc).__name__}: {exc}\n")
        return 1


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        # argparse uses 2 for usage errors; 2 is reserved for failed certificates here
        return 0 if exc.code == 0 else 1
    try:
        cfg = RunConfig(**vars(args))
    except ValueError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 1
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
