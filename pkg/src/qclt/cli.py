"""``qclt`` command line.

Exit codes: 0 success, 1 internal error or failed check, 2 assumption
violation, 3 configuration error.
"""

import argparse
import hashlib
import json
import os
import sys
import time
import traceback
from dataclasses import asdict, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import harness
from ._version import __version__
from .chain import build_joint_chain, chain_report, mixing_time
from .engine import run_trajectory, stepsize_vector
from .exceptions import ConfigError, QcltError
from .io import (fixture_text, float_list, generate_mdp, header_line, load_config,
                 load_spec, resolve_output_dir, write_checkpoints, write_csv,
                 write_oracle_dump, write_phi, write_yaml)
from .oracle import build_oracle, psi_diagnostics
from .properties import run_suite

BUILTIN_CONFIG = "builtin:default_clt"


def _u64(text):
    try:
        v = int(text, 0)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from exc
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _positive(text):
    try:
        v = int(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from exc
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


class _Parser(argparse.ArgumentParser):
    """Usage errors are configuration errors (exit 3), not argparse's 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(ConfigError.exit_code, f"{self.prog}: error: {message}\n")


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", default=BUILTIN_CONFIG,
                        help="experiment config (YAML); 'builtin:NAME' selects a "
                             "packaged one (default: %(default)s)")
    common.add_argument("--seed", type=_u64, default=None,
                        help="master seed, overrides the config file")
    common.add_argument("--parallelism", type=_positive, default=os.cpu_count() or 1,
                        help="replica threads; never changes results")
    common.add_argument("--emit-samples", action="store_true",
                        help="also write per-replica samples")
    common.add_argument("--output-dir", default=None,
                        help="overrides the config; falls back to $QCLT_OUTPUT_DIR, "
                             "then ./qclt_output")

    p = _Parser(prog="qclt", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"qclt {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    a = sub.add_parser("analyze", parents=[common],
                       help="exact limit law and joint-chain report")
    a.add_argument("--fixture", default=None, help="analyze this fixture instead")
    sub.add_parser("clt", parents=[common],
                   help="replicated endpoint CLT, projected W1 and error decay")
    f = sub.add_parser("fclt", parents=[common], help="functional CLT marginals")
    f.add_argument("--n-brownian", type=_positive, default=1_000_000,
                   help="simulated Brownian paths for the running-max law")
    v = sub.add_parser("validate", parents=[common], help="full property suite")
    v.add_argument("--fixture", default=None, help="validate this fixture instead")
    v.add_argument("--quick", action="store_true", help="smaller sampled checks")
    g = sub.add_parser("gen-mdp", parents=[common],
                       help="random fixture from a generator spec")
    g.add_argument("--spec", default=None,
                   help="generator spec (YAML); defaults to --config")
    g.add_argument("--out", default=None, help="fixture path to write")
    return p


class _Run:
    """Output directory, config hash and sidecar bookkeeping for one command."""

    def __init__(self, command, cfg, args, mdp=None):
        self.command = command
        self.cfg = cfg
        self.out = resolve_output_dir(args.output_dir or (cfg.output_dir if cfg else None))
        self.hash = cfg.config_hash(mdp) if cfg else "none"
        self.started = datetime.now(timezone.utc)
        self.t0 = time.perf_counter()
        self.files = []
        self.argv = list(sys.argv[1:])
        self.parallelism = args.parallelism

    def path(self, name):
        p = self.out / name
        self.files.append(p.name)
        return p

    def yaml(self, name, data):
        write_yaml(self.path(name), data, self.hash)

    def csv(self, name, columns, rows):
        write_csv(self.path(name), columns, rows, self.hash)

    def finish(self, status):
        info = {
            "command": self.command,
            "argv": self.argv,
            "version": __version__,
            "config_hash": self.hash,
            "started": self.started.isoformat(),
            "finished": datetime.now(timezone.utc).isoformat(),
            "elapsed_seconds": time.perf_counter() - self.t0,
            "parallelism": self.parallelism,
            "status": status,
            "files": self.files,
        }
        (self.out / f"run_info_{self.command}.json").write_text(json.dumps(info, indent=2))


def _load_cfg(args):
    cfg = load_config(args.config)
    over = {"master_seed": args.seed}
    if args.emit_samples:
        over["emit_samples"] = True
    if args.output_dir:
        over["output_dir"] = args.output_dir
    cfg = cfg.with_overrides(**over)
    if getattr(args, "fixture", None):
        cfg = cfg.with_overrides(fixture_path=str(Path(args.fixture).resolve()))
    return cfg


def _setup(cfg):
    m = cfg.load_mdp()
    chain = build_joint_chain(m)
    oracle = build_oracle(m, chain)
    return m, chain, oracle


def cmd_analyze(args):
    cfg = _load_cfg(args)
    m = cfg.load_mdp()
    run = _Run("analyze", cfg, args, m)
    chain = build_joint_chain(m)
    oracle = build_oracle(m, chain)
    rep = chain_report(chain)
    run.yaml("chain_report.yaml", rep)
    write_oracle_dump(run.path("oracle.yaml"), oracle, run.hash)
    inv = oracle.invariants()
    K = max(cfg.K_grid)
    sched = cfg.schedule
    K_psi = min(K, 100_000)
    probes = sorted(p for p in {1, K_psi // 10, K_psi // 2, K_psi - 1, K_psi} if p >= 1)
    psi = psi_diagnostics(sched, oracle.A, K_psi, probes, rho=chain.rho,
                          gamma=m.discount)
    alpha_K = float(stepsize_vector(sched, K + 1)[K])
    report = {
        "fixture": m.name,
        "n_states": m.n_states,
        "n_actions": m.n_actions,
        "gamma": m.discount,
        "rho": chain.rho,
        "q_star": float_list(oracle.q_star),
        "pi_star": [int(a) for a in oracle.pi_star.actions],
        "A": float_list(oracle.A),
        "limit_cov": float_list(oracle.limit_cov),
        "poisson_convention": oracle.poisson.convention,
        "mixing_time_at_alpha_K": {"K": int(K), "alpha_K": alpha_K,
                                   "t": int(mixing_time(chain, min(alpha_K, 1.0)))},
        "x_bound_ratio": oracle.x_bound_ratio(rep["mixing_constants"]["kappa"]),
        "invariants": {k: {"passed": bool(v[0]), "value": float(v[1])}
                       for k, v in inv.items()},
        "psi_diagnostics": psi,
    }
    run.yaml("analyze_report.yaml", report)
    ok = all(v[0] for v in inv.values())
    run.finish("pass" if ok else "fail")
    return 0 if ok else 1


def _decay_section(m, chain, oracle, cfg, parallelism):
    ed = harness.error_decay(m, chain, oracle, cfg.schedule, cfg.checkpoints,
                             cfg.decay_replicas, cfg.master_seed, parallelism)
    return ed


def cmd_clt(args):
    cfg = _load_cfg(args)
    m, chain, oracle = _setup(cfg)
    run = _Run("clt", cfg, args, m)
    tol = cfg.tolerances
    rep, samples = harness.run_clt_experiment(
        m, chain, oracle, cfg.schedule, list(cfg.K_grid), cfg.replicas, cfg.master_seed,
        parallelism=args.parallelism, fixture_id=m.name, keep_samples=True,
        track_sandwich=cfg.track_sandwich)
    out = rep.to_dict()
    Ks = list(cfg.K_grid)
    checks = {}
    last, first = Ks[-1], Ks[0]
    checks["cov_rel_error_at_max_K"] = rep.cov_rel_error[last] <= tol["cov_rel"]
    if len(Ks) > 1:
        checks["cov_rel_error_decreases"] = rep.cov_rel_error[first] > rep.cov_rel_error[last]
        checks["w1_final_le_first"] = rep.w1_projected[last] <= rep.w1_projected[first]
    checks["mean_within_bound"] = bool(np.max(np.abs(rep.empirical_mean[last]))
                                       <= rep.mean_bound[last])
    if rep.w1_fit is not None:
        checks["w1_slope"] = rep.w1_fit.slope <= tol["w1_slope"]
        checks["w1_fit_residual"] = rep.w1_fit.residual <= tol["w1_residual"]
    decay = _decay_section(m, chain, oracle, cfg, args.parallelism)
    lo, hi = tol["decay_slope"]
    checks["error_decay_slope"] = lo <= decay["slope"] <= hi
    out["error_decay"] = {
        "checkpoints": decay["checkpoints"],
        "replicas": int(cfg.decay_replicas),
        "mean_sup_error": float_list(decay["mean_sup_error"]),
        "slope": decay["slope"],
        "iterate_range": [decay["min_iterate"], decay["max_iterate"]],
    }
    if cfg.instrumented_terms:
        out["terms"] = [harness.diagnostics_terms(m, chain, oracle, cfg.schedule, K,
                                                  cfg.master_seed)
                        for K in Ks if K <= 100_000]
        if len(out["terms"]) > 1:
            checks["terms_decrease"] = not harness.terms_decrease(out["terms"])
    out["checks"] = {k: bool(v) for k, v in checks.items()}
    run.yaml("clt_report.yaml", out)
    run.csv("w1_projected.csv", ["K", "w1_projected"],
            [[int(K), float(rep.w1_projected[K])] for K in Ks])
    run.csv("cov_rel_error.csv", ["K", "cov_rel_error"],
            [[int(K), float(rep.cov_rel_error[K])] for K in Ks])
    run.csv("error_decay.csv", ["k", "mean_sup_error"],
            [[int(k), float(e)] for k, e in zip(decay["checkpoints"],
                                                decay["mean_sup_error"])])
    rec = run_trajectory(m, chain, cfg.schedule, max(cfg.checkpoints),
                         zeta_grid=cfg.zeta_grid, seed=cfg.master_seed, oracle=oracle,
                         checkpoints=cfg.checkpoints)
    write_checkpoints(run.path("checkpoints_replica0.csv"), rec, oracle.q_star, run.hash)
    write_phi(run.path("phi_replica0.csv"), rec, run.hash)
    if cfg.emit_samples:
        for K in Ks:
            X = samples[K]
            run.csv(f"endpoint_samples_K{K}.csv",
                    ["replica"] + [f"x_{i}" for i in range(X.shape[1])],
                    [[i] + [float(x) for x in row] for i, row in enumerate(X)])
    ok = all(checks.values())
    run.finish("pass" if ok else "fail")
    return 0 if ok else 1


def cmd_fclt(args):
    cfg = _load_cfg(args)
    m, chain, oracle = _setup(cfg)
    run = _Run("fclt", cfg, args, m)
    tol = cfg.tolerances
    rep, runs = harness.fclt_marginals(
        m, chain, oracle, cfg.schedule, cfg.fclt_K, cfg.replicas, cfg.zeta_grid,
        cfg.master_seed, parallelism=args.parallelism, n_brownian=args.n_brownian,
        return_paths=True)
    out = rep.to_dict()
    out.update({"K": int(cfg.fclt_K), "replicas": int(cfg.replicas),
                "seed_range": {"master_seed": int(cfg.master_seed),
                               "replicas": [0, int(cfg.replicas) - 1]}})
    checks = {
        "increment_covariances": bool(np.max(rep.increment_cov_errors)
                                      <= tol["fclt_increment"]),
        "cross_covariances": bool(rep.cross_cov_errors.size == 0
                                  or np.max(rep.cross_cov_errors) <= tol["fclt_cross"]),
        "additivity_self_check": rep.additivity_residual <= 1e-12,
    }
    out["checks"] = checks
    run.yaml("fclt_report.yaml", out)
    run.csv("increment_error.csv", ["zeta", "increment_error"],
            [[float(z), float(e)] for z, e in zip(rep.zeta_grid, rep.increment_cov_errors)])
    if cfg.emit_samples:
        write_phi(run.path("phi_samples.csv"), None, run.hash, replica_column=True,
                  records=runs)
    ok = all(checks.values())
    run.finish("pass" if ok else "fail")
    return 0 if ok else 1


def cmd_validate(args):
    cfg = _load_cfg(args)
    m, chain, oracle = _setup(cfg)
    run = _Run("validate", cfg, args, m)
    results = run_suite(m, chain, oracle, cfg.schedule, seed=cfg.master_seed,
                        quick=args.quick)
    ok = all(r.passed for r in results)
    run.yaml("verdict.yaml", {"fixture": m.name, "passed": ok,
                              "properties": [r.to_dict() for r in results]})
    run.finish("pass" if ok else "fail")
    return 0 if ok else 1


def cmd_gen_mdp(args):
    src = args.spec or args.config
    if src == BUILTIN_CONFIG:
        raise ConfigError("gen-mdp needs --spec PATH", field="spec")
    spec = load_spec(src)
    if args.seed is not None:
        spec = replace(spec, transition_seed=args.seed, reward_seed=args.seed)
    m = generate_mdp(spec)
    if args.out:
        dest = Path(args.out)
    else:
        dest = resolve_output_dir(args.output_dir) / f"{m.name}.yaml"
    dest.parent.mkdir(parents=True, exist_ok=True)
    h = hashlib.sha256(json.dumps(asdict(spec), sort_keys=True, default=str)
                       .encode()).hexdigest()[:16]
    dest.write_text(fixture_text(m, header_line(h)))
    return 0


COMMANDS = {
    "analyze": cmd_analyze,
    "clt": cmd_clt,
    "fclt": cmd_fclt,
    "validate": cmd_validate,
    "gen-mdp": cmd_gen_mdp,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except QcltError as exc:
        print(f"qclt {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except Exception:
        traceback.print_exc()
        return 1


if __name__ == "__main__":
    sys.exit(main())
