"""Command-line front end: ``tvcert <command> [flags]``.

A run is described by a RunConfig, a JSON object validated against a strict
schema before any computation.  It can come from ``--config`` (a file or
inline JSON), and command-line flags override its keys.  Certificates and
metric reports are written as JSON; series are written as CSV with ``# ``
header lines echoing the configuration.

Exit codes: 0 ok, 1 numeric failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import io
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime, timezone

import jsonschema
import numpy as np

from . import __version__
from .errors import ConfigError, TvcertError

COMMANDS = ("certify", "metrics", "dynsys", "clt", "check-dominated")
MODE_ALIASES = {"paper": "paper_faithful", "paper_faithful": "paper_faithful", "tight": "tight"}

_POS = {"type": "number", "exclusiveMinimum": 0}
_DIST = {"type": "object", "required": ["family"], "properties": {"family": {"type": "string"}}}

COMMON = {
    "command": {"enum": list(COMMANDS)},
    "seed": {"type": "integer", "minimum": 0, "maximum": 2**64 - 1},
    "threads": {"oneOf": [{"type": "integer", "minimum": 1}, {"const": "auto"}]},
    "out": {"type": "string", "minLength": 1},
    "mode": {"enum": list(MODE_ALIASES)},
    "variant": {"type": "string", "pattern": "^(fm|cf|dk:[1-9][0-9]*)$"},
}

SECTIONS = {
    "certify": {
        "a": _DIST,
        "b": _DIST,
        "metric_upper": {"type": "number", "minimum": 0},
        "delta": _POS,
        "regime": {"enum": ["polynomial", "exp"]},
        "params": {
            "type": "object",
            "additionalProperties": False,
            "required": ["gamma", "c_phi", "delta", "c_f"],
            "properties": {
                "d": {"enum": [1, 2]},
                "gamma": _POS,
                "c_phi": _POS,
                "delta": _POS,
                "c_f": _POS,
            },
        },
        "exp": {
            "type": "object",
            "additionalProperties": False,
            "required": ["r", "C_r"],
            "properties": {"r": _POS, "C_r": _POS, "d": {"enum": [1, 2]}},
        },
        "u_window": {"type": "array", "items": _POS, "minItems": 2, "maxItems": 2},
        "gamma_cap": _POS,
    },
    "metrics": {
        "a": _DIST,
        "b": _DIST,
        "metrics": {
            "type": "array",
            "items": {"enum": ["tv", "supdist", "w1", "dcf", "fm_bracket", "dk_lower"]},
            "uniqueItems": True,
        },
        "k": {"type": "integer", "minimum": 1},
        "box": _POS,
        "grid_pts": {"type": "integer", "minimum": 16},
    },
    "dynsys": {
        "recursion": {"type": "object"},
        "horizon": {"type": "integer", "minimum": 1, "maximum": 10**4},
        "reference_horizon": {"type": "integer", "minimum": 1},
        "paths": {"type": "integer", "minimum": 16},
        "h": _POS,
        "grid": {"type": "array", "prefixItems": [{"type": "number"}, {"type": "number"}, {"type": "integer", "minimum": 16}], "minItems": 3, "maxItems": 3},
    },
    "clt": {
        "base": {"oneOf": [{"type": "string"}, _DIST]},
        "n_list": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
        "grid_pts": {"type": "integer", "minimum": 16},
        "box": _POS,
    },
    "check-dominated": {
        "sequence": {"type": "array", "items": _DIST, "minItems": 1},
        "limit": _DIST,
        "psi": {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind"],
            "properties": {
                "kind": {"enum": ["gaussian", "power"]},
                "c": _POS,
                "C": _POS,
                "a": _POS,
            },
        },
        "labels": {"type": "array"},
        "u_max": _POS,
        "box": _POS,
        "grid_pts": {"type": "integer", "minimum": 16},
    },
}

REQUIRED = {
    "certify": [],
    "metrics": ["a", "b"],
    "dynsys": ["recursion", "horizon"],
    "clt": ["base", "n_list"],
    "check-dominated": ["sequence", "limit", "psi"],
}


def schema_for(command):
    return {
        "type": "object",
        "additionalProperties": False,
        "required": ["command", *REQUIRED[command]],
        "properties": {**COMMON, **SECTIONS[command]},
    }


def _field(err):
    path = ".".join(str(p) for p in err.absolute_path)
    if err.validator == "required":
        missing = err.message.split("'")[1] if "'" in err.message else ""
        return ".".join(p for p in (path, missing) if p)
    if err.validator == "additionalProperties" and "'" in err.message:
        extra = err.message.split("'")[1]
        return ".".join(p for p in (path, extra) if p)
    return path or "<root>"


def validate_config(cfg):
    """Raise ConfigError naming the first offending field."""
    command = cfg.get("command")
    if command not in COMMANDS:
        raise ConfigError("command", f"must be one of {', '.join(COMMANDS)}")
    validator = jsonschema.Draft202012Validator(schema_for(command))
    errors = sorted(validator.iter_errors(cfg), key=lambda e: (list(e.absolute_path), e.message))
    if errors:
        e = errors[0]
        raise ConfigError(_field(e), e.message)
    if command == "certify":
        if "params" not in cfg and not ("a" in cfg and "b" in cfg) and cfg.get("regime") != "exp":
            raise ConfigError("params", "give either params or the pair a, b")
        if cfg.get("regime") == "exp" and "exp" not in cfg:
            raise ConfigError("exp", "required when regime is exp")
        if "metric_upper" not in cfg and not ("a" in cfg and "b" in cfg):
            raise ConfigError("metric_upper", "required unless the pair a, b is given")
    return cfg


def _load_config(text):
    if text is None:
        return {}
    if os.path.exists(text):
        with open(text, encoding="utf-8") as fh:
            raw = fh.read()
        where = text
    else:
        raw, where = text, "--config"
    try:
        obj = json.loads(raw)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{where}:line {e.lineno}", e.msg) from None
    if not isinstance(obj, dict):
        raise ConfigError(where, "configuration must be a JSON object")
    return obj


def _json_arg(text, name):
    if os.path.exists(text):
        with open(text, encoding="utf-8") as fh:
            text = fh.read()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text if name == "base" else _raise(ConfigError(name, "not valid JSON"))


def _raise(exc):
    raise exc


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError("n_list", f"cannot read integers from {text!r}") from None


def build_parser():
    p = argparse.ArgumentParser(prog="tvcert", description="Certified total-variation bounds and experiments.")
    p.add_argument("--version", action="version", version=f"tvcert {__version__}")
    glob = argparse.ArgumentParser(add_help=False)
    glob.add_argument("--config", help="RunConfig JSON file or inline JSON")
    glob.add_argument("--seed", type=int)
    glob.add_argument("--threads", help="worker count or 'auto' (falls back to TVCERT_THREADS)")
    glob.add_argument("--out", help="output path (JSON report or CSV series)")
    glob.add_argument("--mode", choices=["paper", "tight"])
    glob.add_argument("--variant", help="fm, cf or dk:<k>")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("certify", parents=[glob], help="TV certificate from a metric bound")
    c.add_argument("--metric-upper", type=float, dest="metric_upper")
    c.add_argument("--regime", choices=["polynomial", "exp"])

    m = sub.add_parser("metrics", parents=[glob], help="distances between two laws")
    m.add_argument("--a")
    m.add_argument("--b")
    m.add_argument("--grid-pts", type=int, dest="grid_pts")
    m.add_argument("--box", type=float)

    d = sub.add_parser("dynsys", parents=[glob], help="convergence of a causal recursion")
    d.add_argument("--recursion")
    d.add_argument("--horizon", type=int)
    d.add_argument("--paths", type=int)

    t = sub.add_parser("clt", parents=[glob], help="TV distance of normalised sums to the Gaussian")
    t.add_argument("--base")
    t.add_argument("--n-list", dest="n_list")
    t.add_argument("--grid-pts", type=int, dest="grid_pts")
    t.add_argument("--box", type=float)

    sub.add_parser("check-dominated", parents=[glob], help="dominated convergence audit")
    return p


def resolve_config(args):
    cfg = _load_config(args.config)
    if "command" in cfg and cfg["command"] != args.command:
        raise ConfigError("command", f"config is for {cfg['command']!r}, not {args.command!r}")
    cfg["command"] = args.command
    for key in ("seed", "out", "mode", "variant", "metric_upper", "regime", "grid_pts", "box", "horizon", "paths"):
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    threads = args.threads if args.threads is not None else os.environ.get("TVCERT_THREADS")
    if threads is not None:
        cfg["threads"] = "auto" if threads == "auto" else _as_int(threads, "threads")
    for key in ("a", "b", "recursion", "base"):
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = _json_arg(val, key)
    if getattr(args, "n_list", None):
        cfg["n_list"] = _int_list(args.n_list)
    return validate_config(cfg)


def _as_int(text, name):
    try:
        return int(text)
    except (TypeError, ValueError):
        raise ConfigError(name, f"expected an integer or 'auto', got {text!r}") from None


def _threads(cfg):
    t = cfg.get("threads", 1)
    return os.cpu_count() or 1 if t == "auto" else int(t)


def _echo(cfg):
    """The configuration as echoed into artifacts; thread count and output
    path do not influence results and are left out."""
    return {k: v for k, v in cfg.items() if k not in ("threads", "out")}


def _fmt(x):
    if isinstance(x, float):
        return repr(x) if math.isfinite(x) else ("inf" if x > 0 else "nan")
    return str(x)


def render_csv(cfg, columns, rows, timestamp=True):
    buf = io.StringIO()
    buf.write(f"# tvcert {__version__}\n")
    buf.write(f"# command: {cfg['command']}\n")
    buf.write(f"# seed: {cfg.get('seed', 0)}\n")
    buf.write(f"# config: {json.dumps(_echo(cfg), sort_keys=True)}\n")
    if timestamp:
        buf.write(f"# timestamp: {datetime.now(timezone.utc).isoformat(timespec='seconds')}\n")
    buf.write(",".join(columns) + "\n")
    for r in rows:
        buf.write(",".join(_fmt(r[c]) for c in columns) + "\n")
    return buf.getvalue()


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else ("inf" if v > 0 else ("-inf" if v < 0 else "nan"))
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def render_json(cfg, result):
    doc = {"tvcert_version": __version__, "seed": cfg.get("seed", 0), "config": _echo(cfg), "result": result}
    return json.dumps(_jsonable(doc), indent=2, sort_keys=True) + "\n"


def report_render(cert):
    """Human-readable ledger in proof order, ending with the bound line."""
    from .certify import ExpCertificate

    lines = []
    if isinstance(cert, ExpCertificate):
        lines.append(f"a_d = {cert.a_d:.12g}")
        lines.append(f"regime: exponential moments, r = {cert.r:.12g}, C_r = {cert.C_r:.12g}, mode = {cert.mode}")
        lines.append(f"input d_FM <= {cert.input_fm:.12g} (branch {cert.branch})")
        lines.append(f"M_sup = {cert.M_sup:.12g}, band term = {cert.band_term:.12g}, tail term = {cert.tail_term:.12g}")
        lines.append(f"M_tv = {cert.M_tv:.12g}, Markov term = {cert.markov_term:.12g}")
    else:
        led = cert.ledger
        lines.append(f"a_d = {led.a_d:.12g}")
        lines.append(f"C_gamma = {led.C_gamma:.12g}")
        lines.append(f"G_tilde = {led.G_tilde:.12g}")
        lines.append(f"G_prime = {led.G_prime:.12g}")
        lines.append(f"G = {led.G:.12g}")
        lines.append(
            f"inputs: d = {cert.d}, gamma = {cert.gamma:.12g}, c_phi = {cert.c_phi:.12g}, delta = {cert.delta:.12g}, "
            f"c_f = {cert.c_f:.12g}, variant = {cert.variant}, mode = {cert.mode}"
        )
        lines.append(f"metric bound = {cert.input_metric:.12g}, A = {cert.A:.12g} (branch {cert.branch})")
        lines.append(f"g = {float(cert.g):.12g}, g_bar = {float(cert.g_bar):.12g}")
    lines.append(f"sup-density bound = {cert.supdensity_bound:.12g}")
    enforced = "yes" if cert.capped else "no"
    lines.append(f"bound: d_TV <= {cert.tv_bound:.12g} (raw {cert.tv_raw:.12g}), <= 2 enforced: {enforced}")
    return "\n".join(lines) + "\n"


# ------------------------------------------------------------------ commands


def _mode(cfg):
    return MODE_ALIASES[cfg.get("mode", "paper")]


def cmd_certify(cfg):
    from .certify import certificate_from_params, exp_regime_certificate, tv_certificate
    from .distkit import dist_from_json, fit_tail_envelope, moment_bound
    from .metrics import w1_1d

    mode = _mode(cfg)
    variant = cfg.get("variant", "fm")
    a = dist_from_json(cfg["a"]) if "a" in cfg else None
    b = dist_from_json(cfg["b"]) if "b" in cfg else None
    if "metric_upper" in cfg:
        metric = float(cfg["metric_upper"])
        source = "given"
    else:
        if variant == "cf":
            raise ConfigError("metric_upper", "required for the cf variant")
        metric = w1_1d(a, b)
        source = "w1"
    if cfg.get("regime") == "exp":
        e = cfg["exp"]
        cert = exp_regime_certificate(metric, e["r"], e["C_r"], e.get("d", 1), mode)
    elif "params" in cfg:
        p = cfg["params"]
        cert = certificate_from_params(metric, p.get("d", 1), p["gamma"], p["c_phi"], p["delta"], p["c_f"], variant, mode)
    else:
        window = tuple(cfg.get("u_window", (1.0, 1e3)))
        cap = float(cfg.get("gamma_cap", 50.0))
        env_a = fit_tail_envelope(a.charfn(), a.dim, u_window=window, gamma_cap=cap)
        env_b = fit_tail_envelope(b.charfn(), b.dim, u_window=window, gamma_cap=cap)
        delta = cfg.get("delta", 1.0)
        cert = tv_certificate(metric, env_a, env_b, moment_bound(a, delta), moment_bound(b, delta), variant, mode)
    result = cert.to_json()
    result["metric_source"] = source
    return render_json(cfg, result), report_render(cert)


def cmd_metrics(cfg):
    from .distkit import density_on_grid, dist_from_json
    from .metrics import dcf, dk_lower, fm_bracket, sup_density_dist, tv_grid, w1_1d

    a, b = dist_from_json(cfg["a"]), dist_from_json(cfg["b"])
    if a.dim != b.dim:
        raise ConfigError("b", "dimension differs from a")
    which = cfg.get("metrics", ["tv", "supdist", "w1", "dcf", "fm_bracket"])
    box = float(cfg.get("box", 12.0))
    n = int(cfg.get("grid_pts", 4096 if a.dim == 1 else 256))
    out = {}
    if "tv" in which or "supdist" in which:
        fa = density_on_grid(a, -box, box, n)
        fb = density_on_grid(b, -box, box, n)
        if "tv" in which:
            out["tv"] = tv_grid(fa, fb)
        if "supdist" in which:
            out["supdist"] = sup_density_dist(fa, fb)
    if "w1" in which:
        out["w1"] = w1_1d(a, b)
    if "dcf" in which:
        v, w = dcf(a.charfn(), b.charfn())
        out["dcf"] = {"value": v, "witness": w}
    if "fm_bracket" in which:
        out["fm_bracket"] = fm_bracket(a, b).to_json()
    if "dk_lower" in which:
        v, w = dk_lower(a.charfn(), b.charfn(), cfg.get("k", 2))
        out["dk_lower"] = {"k": cfg.get("k", 2), "value": v, "witness": w}
    return render_json(cfg, out), None


def cmd_dynsys(cfg):
    from .dynsys import certified_tv_rate, empirical_tv_decay, load_recursion, w1_geometric_bound

    spec = load_recursion(cfg["recursion"])
    horizon = int(cfg["horizon"])
    grid = tuple(cfg.get("grid", (-12.0, 12.0, 1024)))
    series = empirical_tv_decay(
        spec,
        horizon,
        reference_horizon=cfg.get("reference_horizon"),
        grid=grid,
        paths=int(cfg.get("paths", 20000)),
        seed=int(cfg.get("seed", 0)),
        h=float(cfg.get("h", 0.2)),
    )
    w1 = w1_geometric_bound(spec)
    cert = certified_tv_rate(spec, mode=_mode(cfg))
    rows = [
        {"n": n, "tv_emp": tv, "tv_emp_err": e, "w1_bound": float(w1(n)), "tv_certified": float(cert(n))}
        for n, tv, e in zip(series.n, series.tv, series.tv_err)
    ]
    return render_csv(cfg, ["n", "tv_emp", "tv_emp_err", "w1_bound", "tv_certified"], rows), None


def _slope(points):
    if len(points) < 2:
        return math.nan
    x = np.log([p[0] for p in points])
    y = np.log([max(p[1], 1e-300) for p in points])
    if np.ptp(x) == 0:
        return math.nan
    return float(np.polyfit(x, y, 1)[0])


def cmd_clt(cfg):
    from .clt import CltBase, tv_to_gaussian

    base = CltBase.build(cfg["base"])
    box = float(cfg.get("box", 8.0))
    pts = int(cfg.get("grid_pts", 2**12))
    ns = [int(n) for n in cfg["n_list"]]
    with ThreadPoolExecutor(max_workers=_threads(cfg)) as pool:
        gaps = list(pool.map(lambda n: tv_to_gaussian(base, n, box=box, grid_pts=pts), ns))
    rows, seen = [], []
    for g in gaps:
        seen.append((g.n, g.tv))
        rows.append({"n": g.n, "tv": g.tv, "tv_trunc_err": g.tv_trunc_err, "supdist": g.supdist, "slope_so_far": _slope(seen)})
    return render_csv(cfg, ["n", "tv", "tv_trunc_err", "supdist", "slope_so_far"], rows), None


def _psi(spec):
    kind = spec["kind"]
    if kind == "gaussian":
        c = float(spec.get("c", 0.5))
        return lambda u: np.exp(-c * _sq(u))
    C, a = float(spec.get("C", 1.0)), float(spec.get("a", 2.0))
    return lambda u: np.minimum(1.0, C * (1 + np.sqrt(_sq(u))) ** (-a))


def _sq(u):
    u = np.asarray(u, dtype=float)
    return u * u if u.ndim <= 1 else np.sum(u * u, axis=-1)


def cmd_check_dominated(cfg):
    from .certify import dominated_convergence_check
    from .distkit import dist_from_json

    seq = [dist_from_json(s).charfn() for s in cfg["sequence"]]
    limit = dist_from_json(cfg["limit"]).charfn()
    box = float(cfg.get("box", 12.0))
    rep = dominated_convergence_check(
        seq,
        _psi(cfg["psi"]),
        limit,
        labels=cfg.get("labels"),
        u_max=float(cfg.get("u_max", 200.0)),
        box=(-box, box),
        grid_pts=int(cfg.get("grid_pts", 2048)),
    )
    return render_json(cfg, rep.to_json()), f"verdict: {rep.verdict}\n"


HANDLERS = {
    "certify": cmd_certify,
    "metrics": cmd_metrics,
    "dynsys": cmd_dynsys,
    "clt": cmd_clt,
    "check-dominated": cmd_check_dominated,
}


def run(cfg, stdout=None, stderr=None):
    """Execute a validated RunConfig; returns the exit code."""
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    try:
        cfg = validate_config(dict(cfg))
        artifact, summary = HANDLERS[cfg["command"]](cfg)
    except ConfigError as e:
        print(f"tvcert: config error in field '{e.field}': {e}", file=stderr)
        return 2
    except TvcertError as e:
        print(f"tvcert: numeric failure [{e.code}]: {e}", file=stderr)
        return 1
    out = cfg.get("out")
    if out:
        with open(out, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(artifact)
        if summary:
            stdout.write(summary)
    else:
        stdout.write(summary if summary and cfg["command"] == "certify" else artifact)
    return 0


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
    except ConfigError as e:
        print(f"tvcert: config error in field '{e.field}': {e}", file=sys.stderr)
        return 2
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
