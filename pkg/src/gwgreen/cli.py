"""Command-line interface: reproducible batch runs of the library.

Config resolution: per-subcommand defaults, overlaid by the JSON config
file (--config), overlaid by explicit flags.  The resolved config is
echoed into every JSON report together with its hash, the master seed,
and the package version; CSV files carry the same provenance as comment
lines.  Outputs are byte-identical for identical invocations except for
the timestamp field, which is excluded from hashing.  Thread count is an
execution detail: results are independent of it, and it is not part of
the config or its hash.

Exit codes: 0 success, 1 config error, 2 numerical failure (flagged or
unconverged fraction beyond --max-flagged, or an oracle/margin failure).
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from ._parallel import default_threads
from ._version import __version__
from .conegreen import default_window, detect_bands, grid_records
from .estimates import estimate_delta0, window_constants, write_kappa_csv
from .experiments import (ExperimentConfig, bound_string, estimate_Egamma,
                          percolation_study, report_envelope,
                          verify_vector_inequality, write_rows_csv)
from .model import (BranchingProcess, SubstitutionMatrix,
                    deterministic_process, percolation_pk_gap,
                    percolation_process)
from .trees import sample_tree, tree_to_json


class ConfigError(ValueError):
    pass


class NumericalFailure(RuntimeError):
    pass


def parse_grid(text: str) -> np.ndarray:
    """start:stop:step, inclusive of stop up to half-step rounding."""
    parts = text.split(":")
    if len(parts) != 3:
        raise ConfigError(f"grid must be start:stop:step, got {text!r}")
    try:
        start, stop, step = (float(p) for p in parts)
    except ValueError as exc:
        raise ConfigError(f"bad grid {text!r}: {exc}") from None
    if step <= 0 or stop < start:
        raise ConfigError("grid needs step > 0 and stop >= start")
    n = int(round((stop - start) / step))
    grid = start + step * np.arange(n + 1)
    return grid[grid <= stop + 0.5 * step]


def parse_matrix(text) -> SubstitutionMatrix:
    if isinstance(text, str):
        try:
            text = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"bad matrix JSON: {exc}") from None
    try:
        return SubstitutionMatrix(text)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"bad matrix: {exc}") from None


def parse_law(spec, M: SubstitutionMatrix) -> BranchingProcess:
    """Law spec: "deterministic", {"percolation": [K, p_keep]}, or a full
    offspring table {"labels": L, "offspring": [...]}; strings may also be
    a path to a JSON file holding one of these."""
    if isinstance(spec, str):
        if spec == "deterministic":
            return deterministic_process(M)
        if os.path.exists(spec):
            with open(spec) as fh:
                spec = json.load(fh)
        else:
            try:
                spec = json.loads(spec)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"bad law spec: {exc}") from None
    if not isinstance(spec, dict):
        raise ConfigError("law spec must be an object or 'deterministic'")
    if "percolation" in spec:
        try:
            K, p_keep = spec["percolation"]
            return percolation_process(int(K), float(p_keep))
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"bad percolation law: {exc}") from None
    if "offspring" in spec:
        try:
            return BranchingProcess.from_json(json.dumps(spec))
        except (ValueError, TypeError, KeyError) as exc:
            raise ConfigError(f"bad offspring table: {exc}") from None
    raise ConfigError("law spec needs 'percolation' or 'offspring'")


# Per-subcommand config schema: key -> (type, default, help).  A None
# default means optional/derived; required keys are checked in handlers.
_COMMON = {
    "out": (str, ".", "output directory"),
    "seed": (int, 0, "master seed"),
    "threads": (int, None, "worker threads (default: all cores; "
                           "not part of the config hash)"),
}

_SCHEMAS: dict[str, dict] = {
    "bands": {
        "matrix": (str, None, "substitution matrix, JSON rows"),
        "grid": (str, None, "energy grid start:stop:step "
                            "(default -1:2*maxdeg+1:0.01)"),
        "eta_min": (float, 1e-8, "smallest eta of the continuation"),
        "threshold": (float, 1e-6, "in-band density threshold"),
        "max_flagged": (float, 0.05, "tolerated flagged fraction"),
        **_COMMON,
    },
    "green": {
        "matrix": (str, None, "substitution matrix, JSON rows"),
        "grid": (str, None, "energy grid start:stop:step"),
        "eta": (float, 1e-3, "fixed imaginary part"),
        "max_flagged": (float, 0.05, "tolerated flagged fraction"),
        **_COMMON,
    },
    "sample-tree": {
        "matrix": (str, None, "substitution matrix, JSON rows"),
        "law": (str, "deterministic", "offspring law spec"),
        "root_label": (int, 0, "root label"),
        "depth": (int, 6, "cutoff depth"),
        **_COMMON,
    },
    "oracle-check": {
        "trees": (int, 50, "number of random trees"),
        "depth": (int, 6, "maximum depth"),
        "tol": (float, 1e-10, "relative error tolerance"),
        **_COMMON,
    },
    "egamma": {
        "matrix": (str, None, "substitution matrix, JSON rows"),
        "law": (str, None, "offspring law spec"),
        "p": (float, 1.5, "moment exponent (> 1)"),
        "samples": (int, 10000, "samples per label"),
        "depth": (int, 12, "tree cutoff depth"),
        "E": (float, None, "energy (default: widest-band center)"),
        "eta": (float, 1e-3, "imaginary part"),
        **_COMMON,
    },
    "vector-check": {
        "matrix": (str, None, "substitution matrix, JSON rows"),
        "law": (str, None, "offspring law spec"),
        "p": (float, 1.5, "moment exponent (> 1)"),
        "samples": (int, 10000, "samples per label"),
        "depth": (int, 12, "tree cutoff depth"),
        "E": (float, None, "energy (default: widest-band center)"),
        "eta": (float, 1e-3, "imaginary part"),
        **_COMMON,
    },
    "kappa": {
        "matrix": (str, None, "substitution matrix, JSON rows"),
        "p": (float, 2.0, "moment exponent (> 1)"),
        "samples": (int, 100000, "probe samples per label and family"),
        "E": (float, None, "energy (default: widest-band center)"),
        "eta": (float, 1e-3, "imaginary part"),
        "perm_mode": (str, "full", "permutation set: full or swap2"),
        "keep_samples": (bool, False, "write per-sample CSV"),
        **_COMMON,
    },
    "percolation": {
        "K": (int, 2, "regular-tree branching number"),
        "p_keep": (str, "0.9,0.95,0.99,0.999", "retention grid, comma list"),
        "z_grid": (str, None, "energy grid start:stop:step at --eta "
                              "(default: single midband point)"),
        "eta": (float, 1e-3, "imaginary part"),
        "p": (float, 1.5, "moment exponent (> 1)"),
        "samples": (int, 10000, "samples per point"),
        "depth": (int, 12, "tree cutoff depth"),
        "bound_only": (bool, False, "print the retention bounds and exit"),
        **_COMMON,
    },
    "constants": {
        "matrix": (str, None, "substitution matrix, JSON rows"),
        "interval": (str, None, "energy interval a:b "
                                "(default: middle 60% of widest band)"),
        "eta_max": (float, 1.0, "top of the eta window"),
        "p": (float, 2.0, "moment exponent (> 1)"),
        **_COMMON,
    },
}


def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="gwgreen",
        description="Green functions and spectral estimates on random "
                    "trees of finite cone type")
    ap.add_argument("--version", action="version", version=__version__)
    subs = ap.add_subparsers(dest="subcommand", required=True)
    for name, schema in _SCHEMAS.items():
        sp = subs.add_parser(name)
        sp.add_argument("--config", type=str, default=None,
                        help="JSON config file (flags override its fields)")
        for key, (typ, _default, help_) in schema.items():
            flag = "--" + key.replace("_", "-")
            if typ is bool:
                sp.add_argument(flag, action="store_true", default=None,
                                dest=key, help=help_)
            else:
                sp.add_argument(flag, type=typ, default=None, dest=key,
                                help=help_)
    return ap


def resolve_config(subcommand: str, args: argparse.Namespace) -> dict:
    """defaults <- config file <- explicit flags; unknown keys rejected."""
    schema = _SCHEMAS[subcommand]
    cfg = {k: spec[1] for k, spec in schema.items()}
    if args.config is not None:
        try:
            with open(args.config) as fh:
                file_cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
        if not isinstance(file_cfg, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = sorted(set(file_cfg) - set(schema))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        for k, v in file_cfg.items():
            typ = schema[k][0]
            if typ is not bool and v is not None and not isinstance(v, str):
                v = typ(v)
            cfg[k] = v
    for k in schema:
        v = getattr(args, k, None)
        if v is not None:
            cfg[k] = v
    return cfg


def _echo_config(cfg: dict) -> dict:
    """The resolved config as embedded in outputs.  Execution details that
    cannot change any number (worker count, output directory) are excluded,
    so reruns compare byte-identical wherever they are written."""
    return {k: v for k, v in sorted(cfg.items())
            if k not in ("threads", "out")}


def _write_json(path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _out_path(cfg: dict, name: str) -> str:
    out = cfg.get("out") or "."
    os.makedirs(out, exist_ok=True)
    return os.path.join(out, name)


def _meta(env: dict) -> dict:
    return {"config_hash": env["config_hash"], "seed": env["config"]["seed"],
            "version": env["version"]}


def _experiment_config(cfg: dict) -> tuple[ExperimentConfig, complex]:
    M = parse_matrix(_req(cfg, "matrix"))
    b = parse_law(_req(cfg, "law"), M)
    window = default_window(M)
    E = cfg["E"] if cfg["E"] is not None else 0.5 * (window[0] + window[1])
    z = complex(E, cfg["eta"])
    xcfg = ExperimentConfig(b=b, M=M, p=cfg["p"], n_samples=cfg["samples"],
                            depth=cfg["depth"], seed=cfg["seed"],
                            window=window, threads=cfg["threads"])
    return xcfg, z


def _req(cfg: dict, key: str):
    if cfg.get(key) is None:
        raise ConfigError(f"missing required config field: {key}")
    return cfg[key]


def _cmd_bands(cfg: dict) -> int:
    M = parse_matrix(_req(cfg, "matrix"))
    if cfg["grid"] is not None:
        grid = parse_grid(cfg["grid"])
    else:
        grid = parse_grid(f"-1:{2.0 * float(np.max(M.degrees())) + 1.0}:0.01")
    report = detect_bands(M, grid, eta_min=cfg["eta_min"],
                          density_threshold=cfg["threshold"])
    env = report_envelope(_echo_config(cfg), report.to_json())
    _write_json(_out_path(cfg, "bands.json"), env)
    rows = grid_records(M, grid, cfg["eta_min"], report=report)
    write_rows_csv(_out_path(cfg, "bands.csv"), rows, meta=_meta(env))
    n_flag = sum(r["flagged"] for r in rows) / max(len(rows), 1)
    for lo, hi in report.intervals:
        print(f"band [{lo:.4f}, {hi:.4f}]")
    print(f"flagged fraction {n_flag:.4f}; wrote bands.json, bands.csv")
    if n_flag > cfg["max_flagged"]:
        raise NumericalFailure(f"flagged fraction {n_flag:.4f} exceeds "
                               f"{cfg['max_flagged']}")
    return 0


def _cmd_green(cfg: dict) -> int:
    M = parse_matrix(_req(cfg, "matrix"))
    grid = parse_grid(_req(cfg, "grid"))
    rows = grid_records(M, grid, cfg["eta"])
    env = report_envelope(_echo_config(cfg), {"n_points": len(grid)})
    write_rows_csv(_out_path(cfg, "green.csv"), rows, meta=_meta(env))
    _write_json(_out_path(cfg, "green.json"), env)
    n_flag = sum(r["flagged"] for r in rows) / max(len(rows), 1)
    print(f"{len(grid)} energies, flagged fraction {n_flag:.4f}; "
          f"wrote green.csv")
    if n_flag > cfg["max_flagged"]:
        raise NumericalFailure(f"flagged fraction {n_flag:.4f} exceeds "
                               f"{cfg['max_flagged']}")
    return 0


def _cmd_sample_tree(cfg: dict) -> int:
    M = parse_matrix(_req(cfg, "matrix"))
    b = parse_law(cfg["law"], M)
    tree = sample_tree(b, cfg["root_label"], cfg["depth"], cfg["seed"])
    env = report_envelope(_echo_config(cfg), tree_to_json(tree))
    _write_json(_out_path(cfg, "tree.json"), env)
    print(f"{tree.n_nodes} nodes, depth {cfg['depth']}; wrote tree.json")
    return 0


def _cmd_oracle_check(cfg: dict) -> int:
    from .randomgreen import oracle_sweep
    rep = oracle_sweep(cfg["trees"], cfg["depth"], seed=cfg["seed"],
                       tol=cfg["tol"])
    env = report_envelope(_echo_config(cfg), rep)
    _write_json(_out_path(cfg, "oracle.json"), env)
    print(f"max rel err: trunc {rep['max_err_trunc']:.3e} "
          f"full {rep['max_err_full']:.3e} over {rep['n_trees']} trees")
    if not rep["ok"]:
        raise NumericalFailure("oracle mismatch beyond tolerance")
    return 0


def _cmd_egamma(cfg: dict) -> int:
    xcfg, z = _experiment_config(cfg)
    mc = estimate_Egamma(xcfg, z)
    env = report_envelope(_echo_config(cfg),
                          {"z": [z.real, z.imag], **mc.to_json()})
    _write_json(_out_path(cfg, "egamma.json"), env)
    rows = [{"label": j, "mean": mc.mean[j], "stderr": mc.stderr[j],
             "median": mc.median[j], "trimmed_mean": mc.trimmed_mean[j],
             "count": mc.count} for j in range(mc.mean.size)]
    write_rows_csv(_out_path(cfg, "egamma.csv"), rows, meta=_meta(env))
    print(f"z = {z:.6g}: Egamma mean {np.array2string(mc.mean, precision=6)} "
          f"(stderr {np.array2string(mc.stderr, precision=3)})")
    return 0


def _cmd_vector_check(cfg: dict) -> int:
    xcfg, z = _experiment_config(cfg)
    rep = verify_vector_inequality(xcfg, z)
    env = report_envelope(_echo_config(cfg), rep.to_json())
    _write_json(_out_path(cfg, "vector.json"), env)
    print(f"z = {z:.6g}: perron slack {rep.perron_slack:.3e} "
          f"+- {rep.perron_slack_ci:.3e}, dp {rep.dp:.4f}, "
          f"feasible within CI: {rep.feasible_within_ci()}")
    return 0


def _cmd_kappa(cfg: dict) -> int:
    M = parse_matrix(_req(cfg, "matrix"))
    window = default_window(M)
    E = cfg["E"] if cfg["E"] is not None else 0.5 * (window[0] + window[1])
    z = complex(E, cfg["eta"])
    rep = estimate_delta0(M, z, cfg["p"], cfg["samples"], seed=cfg["seed"],
                          perm_mode=cfg["perm_mode"], threads=cfg["threads"],
                          keep_samples=cfg["keep_samples"])
    env = report_envelope(_echo_config(cfg), rep.to_json())
    _write_json(_out_path(cfg, "kappa.json"), env)
    if cfg["keep_samples"]:
        write_kappa_csv(_out_path(cfg, "kappa.csv"), rep)
    print(f"z = {z:.6g}: sup kappa {rep.sup_kappa:.6f}, "
          f"margin {rep.margin:.6f}")
    if rep.margin <= 0.0:
        raise NumericalFailure("no contraction margin at this z")
    return 0


def _cmd_percolation(cfg: dict) -> int:
    K = cfg["K"]
    if cfg["bound_only"]:
        payload = {"K": K,
                   "bound_plain": bound_string(K, False),
                   "bound_improved": bound_string(K, True),
                   "gap_plain": percolation_pk_gap(K, False),
                   "gap_improved": percolation_pk_gap(K, True)}
        env = report_envelope(_echo_config(cfg), payload)
        _write_json(_out_path(cfg, "percolation.json"), env)
        print(f"K={K}: retention bound {payload['bound_plain']}")
        print(f"K={K}: improved bound  {payload['bound_improved']}")
        return 0
    try:
        p_keep_grid = [float(s) for s in str(cfg["p_keep"]).split(",") if s]
    except ValueError as exc:
        raise ConfigError(f"bad p_keep list: {exc}") from None
    z_grid = None
    if cfg["z_grid"] is not None:
        z_grid = [complex(E, cfg["eta"]) for E in parse_grid(cfg["z_grid"])]
    rows = percolation_study(K, p_keep_grid, z_grid, p=cfg["p"],
                             n_samples=cfg["samples"], depth=cfg["depth"],
                             seed=cfg["seed"], threads=cfg["threads"])
    env = report_envelope(_echo_config(cfg), rows)
    _write_json(_out_path(cfg, "percolation.json"), env)
    write_rows_csv(_out_path(cfg, "percolation.csv"), rows, meta=_meta(env))
    for r in rows:
        print(f"p_keep {r['p_keep']:.4g}: dp {r['dp']:.4f}, "
              f"Egamma {r['egamma']:.5f} +- {r['egamma_ci']:.5f}")
    return 0


def _cmd_constants(cfg: dict) -> int:
    M = parse_matrix(_req(cfg, "matrix"))
    if cfg["interval"] is not None:
        parts = cfg["interval"].split(":")
        if len(parts) != 2:
            raise ConfigError("interval must be a:b")
        interval = (float(parts[0]), float(parts[1]))
    else:
        interval = default_window(M)
    wc = window_constants(M, interval, eta_max=cfg["eta_max"], p=cfg["p"])
    env = report_envelope(_echo_config(cfg), wc.to_json())
    _write_json(_out_path(cfg, "constants.json"), env)
    print(f"interval [{interval[0]:.4f}, {interval[1]:.4f}]: "
          f"r {wc.r:.6g}, c1 {wc.c1:.6g}, c2 {wc.c2:.6g}")
    return 0


_HANDLERS = {
    "bands": _cmd_bands,
    "green": _cmd_green,
    "sample-tree": _cmd_sample_tree,
    "oracle-check": _cmd_oracle_check,
    "egamma": _cmd_egamma,
    "vector-check": _cmd_vector_check,
    "kappa": _cmd_kappa,
    "percolation": _cmd_percolation,
    "constants": _cmd_constants,
}


_DASH_VALUE_FLAGS = {"--grid", "--z-grid", "--interval", "--p-keep", "--E"}


def _merge_dash_values(argv: list[str]) -> list[str]:
    """Join value flags with their argument so grids like -1:8:0.01 are not
    mistaken for option names."""
    out = []
    i = 0
    while i < len(argv):
        tok = argv[i]
        if tok in _DASH_VALUE_FLAGS and i + 1 < len(argv):
            out.append(f"{tok}={argv[i + 1]}")
            i += 2
        else:
            out.append(tok)
            i += 1
    return out


def main(argv=None) -> int:
    if argv is None:
        argv = sys.argv[1:]
    args = _build_parser().parse_args(_merge_dash_values(list(argv)))
    try:
        cfg = resolve_config(args.subcommand, args)
        if cfg.get("threads") is None:
            cfg["threads"] = default_threads()
        return _HANDLERS[args.subcommand](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, KeyError, TypeError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (NumericalFailure, ArithmeticError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
