"""Command line front end: ``python3 -m carleman_lab <subcommand> ...``.

Exit codes: 0 when every contract of the run holds, 2 when one fails (the
CSV is still written), 1 for usage and configuration errors.  Every CSV
starts with ``# carleman-lab v1 seed=<s> cmd=<...>``; the recorded command
leaves out ``--workers`` and output paths so that it does not depend on how
the run was scheduled.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .errors import CarlemanLabError

VERSION_TAG = "carleman-lab v1"
UNRECORDED_FLAGS = ("--workers", "--out", "--dump-fields")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# --------------------------------------------------------------------------
# small parsers
# --------------------------------------------------------------------------

def float_list(text: str) -> list[float]:
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"not a list of numbers: {text!r}") from exc
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


def read_config(path) -> configparser.ConfigParser:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    if not parser.read(path):
        raise UsageError(f"cannot read config file {path}")
    return parser


def _section(cfg, name: str):
    if not cfg.has_section(name):
        raise UsageError(f"config is missing the [{name}] section")
    return cfg[name]


def _theta_box(text: str):
    values = float_list(text)
    if len(values) % 2:
        raise UsageError("theta_box needs pairs a1,b1,a2,b2,...")
    return tuple(zip(values[0::2], values[1::2]))


def _config_errors(fn):
    """Report bad config values as usage errors."""
    def wrapped(*args):
        try:
            return fn(*args)
        except (ValueError, IndexError) as exc:
            raise UsageError(f"invalid config: {exc}") from exc
    wrapped.__name__ = fn.__name__
    wrapped.__doc__ = fn.__doc__
    return wrapped


@_config_errors
def load_domain(path, default):
    """``[domain]`` section: ``kind = star|ball`` plus its parameters."""
    from .geometry import BallDomain, make_star_domain
    if path is None:
        return default()
    sec = _section(read_config(path), "domain")
    kind = sec.get("kind", "star")
    if kind == "ball":
        center = float_list(sec.get("center", "0,0,0"))
        return BallDomain(np.asarray(center), float(sec.get("radius", "1.0")))
    if kind != "star":
        raise UsageError(f"unknown domain kind {kind!r}")
    dim_n = int(sec.get("n", "2"))
    box = _theta_box(sec["theta_box"]) if "theta_box" in sec else None
    return make_star_domain(sec.get("f", "const:1"), float(sec.get("r_max", "2.0")), dim_n, box)


@_config_errors
def load_potential(path):
    """``[potential]`` section with ``W`` and ``q``; missing entries mean zero."""
    from .potentials import parse_scalar_potential, parse_vector_potential
    if path is None:
        return None, None
    sec = _section(read_config(path), "potential")
    return parse_vector_potential(sec.get("W", "zero")), parse_scalar_potential(sec.get("q", "const:0"))


@_config_errors
def load_pair(text: str):
    """A canonical pair name or a config with ``[pair]`` entries.

    Keys: ``W1 W2 q1 q2`` in the potential syntax, optional ``psi2 = bump:...``
    adding a gauge term to ``W2``, and optional ``expected`` verdict.
    """
    from .dnmap import PotentialPair
    from .potentials import GaugeShifted, parse_scalar_potential, parse_vector_potential
    from .uniqueness import canonical_pairs
    expected_by_name = {"gauge": "indistinguishable", "curl": "dW_differ", "q_bump": "q_differ"}
    pairs = canonical_pairs()
    if text in pairs:
        return pairs[text], expected_by_name[text]
    sec = _section(read_config(text), "pair")
    if "canonical" in sec:
        name = sec["canonical"]
        if name not in pairs:
            raise UsageError(f"unknown canonical pair {name!r}")
        return pairs[name], sec.get("expected", expected_by_name[name])
    W1 = parse_vector_potential(sec.get("W1", "zero"))
    W2 = parse_vector_potential(sec.get("W2", "zero"))
    if "psi2" in sec:
        W2 = GaugeShifted(W2, parse_scalar_potential(sec["psi2"]))
    q1 = parse_scalar_potential(sec.get("q1", "const:0"))
    q2 = parse_scalar_potential(sec.get("q2", "const:0"))
    return PotentialPair(W1, W2, q1, q2), sec.get("expected")


def omega_from_angles(angles) -> np.ndarray:
    from .geometry import to_cartesian
    return to_cartesian(1.0, np.asarray(angles, dtype=float))


# --------------------------------------------------------------------------
# output
# --------------------------------------------------------------------------

def _cell(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(path, seed: int, command: str, rows) -> None:
    path = Path(path)
    if path.parent and not path.parent.exists():
        path.parent.mkdir(parents=True)
    with open(path, "w", newline="") as fh:
        fh.write(f"# {VERSION_TAG} seed={seed} cmd={command}\n")
        writer = csv.writer(fh, lineterminator="\n")
        for row in rows:
            writer.writerow([_cell(v) for v in row])


def recorded_command(argv) -> str:
    kept, skip = [], False
    for token in argv:
        if skip:
            skip = False
            continue
        flag = token.split("=", 1)[0]
        if flag in UNRECORDED_FLAGS:
            skip = "=" not in token
            continue
        kept.append(token)
    return " ".join(kept)


def parallel_map(fn, items, workers: int):
    """``map`` in job order, in a process pool when ``workers > 1``."""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


class _PoolMapper:
    def __init__(self, workers: int):
        self.workers = workers

    def __call__(self, fn, items):
        return parallel_map(fn, items, self.workers)


def _slope(hs, values) -> float:
    values = np.asarray(values, dtype=float)
    if len(hs) < 2 or np.any(~np.isfinite(values)) or np.any(values <= 0):
        return math.nan
    return float(np.polyfit(np.log(hs), np.log(values), 1)[0])


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_verify_joperators(args) -> tuple[list, bool]:
    from .joperators import CutoffParams, joperator_checks
    extra = {}
    if args.cutoff is not None:
        if len(args.cutoff) != 4:
            raise UsageError("--cutoff needs r1,r2,d1,d2")
        extra = dict(zip(("r1", "r2", "d1", "d2"), args.cutoff))
    params = CutoffParams(K=args.K, delta=args.delta, **extra)
    rows = joperator_checks(args.K, args.h, params, args.delta, args.seed)
    table = [("check_name", "h", "value", "bound", "pass")] + rows
    return table, all(row[4] for row in rows)


def cmd_verify_carleman(args) -> tuple[list, bool]:
    from .carleman import CarlemanSweep, TestFunctionFamily
    options = {}
    if args.domain is not None:
        cfg = read_config(args.domain)
        sec = _section(cfg, "domain")
        options["f_spec"] = sec.get("f", "const:1")
        options["r_max"] = float(sec.get("r_max", "2.0"))
        if "theta_box" in sec:
            options["theta_box"] = _theta_box(sec["theta_box"])
        if cfg.has_section("potential"):
            options["W"], options["q"] = load_potential(args.domain)
    est = CarlemanSweep(args.estimate, eps=args.eps_list[0], weight_sign=args.weight_sign,
                        workers=args.workers, **options)
    est.fit(args.h_list, TestFunctionFamily(count=args.tests, seed=args.seed), args.eps_list)
    report = est.report_
    ok = all(report.verdict(eps) for eps in args.eps_list)
    return report.to_csv_rows(), ok


def _cgo_job(job):
    from .cgo import cgo_solution
    from .discretization import write_clfield_array
    domain, W, q, omega, h, mode, order, dump = job
    sol = cgo_solution(domain, W, q, omega, h, mode=mode, order=order)
    if dump is not None:
        grid = sol.grid
        lengths = (grid.t1_edges[-1] - grid.t1_edges[0], grid.t2_edges[-1] - grid.t2_edges[0])
        n = grid.size
        fields = {"u": sol.u()[:n], "amplitude": sol.amplitude.cells, "remainder": sol.remainder[:n]}
        for name, values in fields.items():
            write_clfield_array(Path(dump) / f"cgo_{mode}_h{h!r}_{name}.clfield", values.reshape(grid.shape),
                                h, grid.r_edges[-1], lengths)
    return sol.norms


def cmd_cgo(args) -> tuple[list, bool]:
    from .cgo import CHART_AXIS
    from .uniqueness import default_domain
    domain = load_domain(args.domain, default_domain)
    W, q = load_potential(args.potential)
    omega = omega_from_angles(args.omega)
    if not np.allclose(omega, CHART_AXIS, atol=1e-12):
        raise UsageError("the CGO construction supports omega = e_1 only (--omega 0,0)")
    if args.dump_fields is not None:
        Path(args.dump_fields).mkdir(parents=True, exist_ok=True)
    jobs = [(domain, W, q, omega, h, args.mode, args.order, args.dump_fields) for h in args.h_list]
    norms = parallel_map(_cgo_job, jobs, args.workers)
    columns = ("interior_residual", "r_H1", "r_bdry", "uE_norm")
    rows = [("h",) + columns] + [(h,) + tuple(n[c] for c in columns) for h, n in zip(args.h_list, norms)]
    ok = True
    if args.mode == "vanish":
        ok &= all(n["uE_norm"] <= 1e-8 for n in norms)
    if len(args.h_list) >= 3:
        hs = args.h_list
        ok &= 1.7 <= _slope(hs, [n["interior_residual"] for n in norms]) <= 2.3
        if args.mode == "free":
            ok &= 0.7 <= _slope(hs, [n["r_H1"] for n in norms]) <= 1.3
            ok &= 0.2 <= _slope(hs, [n["r_bdry"] for n in norms]) <= 0.8
    return rows, bool(ok)


def _partial_masks(text: str, domain, dn):
    """``U=<dilation|auto>,E=<margin|auto>`` on the nodal boundary grid."""
    from .dnmap import classify_nodes, forward_grid
    from .geometry import BoundaryMargins
    values = {}
    for part in text.split(","):
        key, _, value = part.partition("=")
        if key.strip() not in ("U", "E") or not value:
            raise UsageError(f"--partial expects U=<spec>,E=<spec>, got {text!r}")
        values[key.strip()] = None if value.strip() == "auto" else float(value)
    margins = BoundaryMargins(eps_Z=values.get("E"), U_dilation=values.get("U"))
    return classify_nodes(domain, forward_grid(domain), margins)


def cmd_dn_map(args) -> tuple[list, bool]:
    from .dnmap import dn_map, restrict_partial
    from .geometry import BallDomain
    domain = load_domain(args.domain, lambda: BallDomain(np.zeros(3), 1.0))
    W, q = load_potential(args.potential)
    dn = dn_map(domain, W, q, l_max=args.lmax)
    M = dn.matrix
    rows_idx, cols_idx = np.arange(M.shape[0]), np.arange(M.shape[1])
    if args.partial is not None:
        if isinstance(domain, BallDomain):
            raise UsageError("--partial needs a star domain")
        masks = _partial_masks(args.partial, domain, dn)
        restrict_partial(dn, masks.U, masks.E)
        rows_idx, cols_idx = np.flatnonzero(masks.U), np.flatnonzero(~masks.E)
    table = [("i", "j", "re", "im")]
    for i in rows_idx:
        for j in cols_idx:
            table.append((int(i), int(j), float(M[i, j].real), float(M[i, j].imag)))
    ok = bool(np.all(np.isfinite(M)))
    if isinstance(domain, BallDomain) and q is None and W is None:
        ls = np.array([l for l, _ in dn.labels], dtype=float) / domain.radius
        ok &= bool(np.max(np.abs(dn.eigen_estimates() - ls) / np.maximum(ls, 1.0 / domain.radius)) < 0.02)
    return table, ok


def cmd_uniqueness(args) -> tuple[list, bool]:
    from .uniqueness import TERM_NAMES, DetectionProtocol, default_domain, detect_difference, term_scalings
    pair, expected = load_pair(args.pair)
    domain = load_domain(args.domain, default_domain)
    report = term_scalings(pair, domain, h_list=args.h_list, mapper=_PoolMapper(args.workers))
    detection = detect_difference(pair, domain, DetectionProtocol(frames=args.frames, seed=args.seed))
    rows = [("table", "h", "term", "re", "im", "abs")]
    for terms in report.terms:
        for name, value in zip(TERM_NAMES, terms.values()):
            rows.append(("term", terms.h, name, value.real, value.imag, abs(value)))
        rows.append(("term", terms.h, "boundary_U", terms.boundary_U.real, terms.boundary_U.imag,
                     abs(terms.boundary_U)))
        rows.append(("residual", terms.h, "identity", terms.residual, 0.0, terms.residual))
    for name in TERM_NAMES:
        rows.append(("exponent", "", name, report.exponents[name], 0.0, report.contract[name]))
    rows.append(("table", "frame", "test", "W_re", "W_im", "q_re", "q_im"))
    for _, frame, test, vw, vq in detection.table:
        rows.append(("slice", frame, test, vw.real, vw.imag, vq.real, vq.imag))
    rows.append(("threshold", "", "", detection.W_threshold, detection.q_threshold, ""))
    rows.append(("verdict", detection.verdict))
    ok = report.passed and (expected is None or expected == detection.verdict)
    return rows, bool(ok)


COMMANDS = {
    "verify-joperators": cmd_verify_joperators,
    "verify-carleman": cmd_verify_carleman,
    "cgo": cmd_cgo,
    "dn-map": cmd_dn_map,
    "uniqueness": cmd_uniqueness,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="carleman-lab", description="Carleman estimate and CGO experiments.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, out: str):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--workers", type=int, default=1)
        p.add_argument("--out", default=out)

    p = sub.add_parser("verify-joperators")
    p.add_argument("--K", type=float, default=0.0)
    p.add_argument("--h", type=float, default=0.1)
    p.add_argument("--cutoff", type=float_list)
    p.add_argument("--delta", type=float, default=0.05)
    common(p, "joperators.csv")

    p = sub.add_parser("verify-carleman")
    p.add_argument("--estimate", default="main", choices=["dksu", "flat", "simple", "spec", "main"])
    p.add_argument("--domain")
    p.add_argument("--h-list", type=float_list, default=[0.4, 0.2, 0.1, 0.05])
    p.add_argument("--eps-list", type=float_list, default=[0.25])
    p.add_argument("--tests", type=int, default=32)
    p.add_argument("--weight-sign", type=int, default=1, choices=[1, -1])
    common(p, "carleman.csv")

    p = sub.add_parser("cgo")
    p.add_argument("--domain")
    p.add_argument("--potential")
    p.add_argument("--omega", type=float_list, default=[0.0, 0.0])
    p.add_argument("--h-list", type=float_list, default=[0.2, 0.1, 0.05])
    p.add_argument("--order", type=int, default=6)
    p.add_argument("--mode", choices=["vanish", "free"], default="free")
    p.add_argument("--dump-fields")
    common(p, "cgo.csv")

    p = sub.add_parser("dn-map")
    p.add_argument("--domain")
    p.add_argument("--potential")
    p.add_argument("--lmax", type=int, default=8)
    p.add_argument("--partial")
    common(p, "dn.csv")

    p = sub.add_parser("uniqueness")
    p.add_argument("--pair", required=True)
    p.add_argument("--domain")
    p.add_argument("--h-list", type=float_list, default=[0.2, 0.1, 0.05])
    p.add_argument("--frames", type=int, default=16)
    common(p, "report.csv")
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        if args.workers < 1:
            raise UsageError("--workers must be at least 1")
        rows, ok = COMMANDS[args.command](args)
    except (UsageError, configparser.Error, OSError, KeyError) as exc:
        print(f"carleman-lab: {exc}", file=sys.stderr)
        return 1
    except CarlemanLabError as exc:
        print(f"carleman-lab: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"carleman-lab: {exc}", file=sys.stderr)
        return 1
    write_csv(args.out, args.seed, recorded_command(argv), rows)
    return 0 if ok else 2


run = main

if __name__ == "__main__":
    sys.exit(main())
