"""Command-line interface: ``pgbme <command> [options]``.

Exit codes: 0 success, 2 invalid input, 3 numerical failure, 4 I/O error.
Failures print one line ``pgbme: error[<category>]: <message>`` on stderr.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import pandas as pd

from . import io
from .errors import NumericalError, PgbmeError, ValidationError
from .evaluation import HoldoutSpec, evaluate_variants, k_selection_table, predict_surface
from .gibbs import FitConfig, Variant, run_chain
from .samplers import rng_stream
from .synthdata import SimSpec, run_recovery_study, simulate_observed

log = logging.getLogger("pgbme")

ENV_DATA_DIR = "PGBME_DATA_DIR"
EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4


def _csv_list(text):
    return [t.strip() for t in text.split(",") if t.strip()]


def _add_chain_args(p, iters=20000, burn=10000, thin=10):
    p.add_argument("--k", type=int, default=2, help="latent space dimension")
    p.add_argument("--iters", type=int, default=iters)
    p.add_argument("--burn", type=int, default=burn)
    p.add_argument("--thin", type=int, default=thin)
    p.add_argument("--seed", type=int, default=0)


def _add_data_args(p, years=False):
    p.add_argument("--data-dir", default=os.environ.get(ENV_DATA_DIR),
                   help=f"bundle directory (default: ${ENV_DATA_DIR})")
    if years:
        g = p.add_mutually_exclusive_group()
        g.add_argument("--year")
        g.add_argument("--all-years", action="store_true")
    else:
        p.add_argument("--year")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pgbme", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit one year (or every year) of a bundle")
    _add_data_args(p, years=True)
    _add_chain_args(p)
    p.add_argument("--variant", choices=[v.value for v in Variant], default="pgbme")
    p.add_argument("--estimate-rho", action="store_true")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--keep-latent", action="store_true", help="store z with every draw")
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("simulate", help="parameter recovery / coverage study")
    p.add_argument("--reps", type=int, default=100)
    p.add_argument("--nodes", type=int, default=50)
    _add_chain_args(p, iters=2000, burn=None, thin=1)
    p.add_argument("--true-k", type=int, default=2)
    p.add_argument("--beta-d", type=float, nargs=2, default=(1.0, -0.5), metavar=("D1", "D2"))
    p.add_argument("--beta-s", type=float, default=0.0)
    p.add_argument("--beta-r", type=float, default=0.5)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("generate", help="write a synthetic bundle")
    p.add_argument("--nodes", type=int, default=50)
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("predict", help="posterior tie probability surfaces")
    p.add_argument("--draws", required=True)
    _add_data_args(p)
    p.add_argument("--focus-node")
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("evaluate", help="in/out-of-sample ranking performance")
    _add_data_args(p)
    _add_chain_args(p)
    p.add_argument("--variants", type=_csv_list, default=["pgbme", "gbme", "probit"])
    p.add_argument("--holdout-frac", type=float, default=0.1)
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("kselect", help="in-sample performance across latent dimensions")
    _add_data_args(p)
    _add_chain_args(p)
    p.add_argument("--k-values", type=_csv_list, default=["0", "1", "2", "3"])
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("verify", help="check manifest digests of an output directory")
    p.add_argument("out_dir")
    return parser


def _require_data_dir(args):
    if not args.data_dir:
        raise ValidationError(f"--data-dir not given and ${ENV_DATA_DIR} unset")
    return Path(args.data_dir)


def _fit_config(args, **kw) -> FitConfig:
    return FitConfig(k_dim=args.k, n_iter=args.iters, n_burn=args.burn, thin=args.thin,
                     seed=args.seed, **kw)


def _out(path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _fit_one(data_dir, year, cfg: FitConfig, out_dir):
    net, cov = io.load_bundle(data_dir, year)
    draws = run_chain(net, cov, cfg)
    out = _out(out_dir)
    io.write_draws(out / "draws.npz", draws)
    io.write_traces(out / "traces.csv", draws)
    summary = {"year": year, "n_saved": len(draws), "n_nodes": net.n_nodes,
               "n_ties": int(net.adjacency.sum() // 2), "n_replicates": len(cov),
               "coefficients": io.coefficient_summary(draws)}
    io.write_json(out / "summary.json", summary)
    io.write_manifest(out, "fit", cfg.to_dict(), cfg.seed, io.bundle_inputs(data_dir),
                      extra={"year": year})
    return year, summary


def cmd_fit(args):
    data_dir = _require_data_dir(args)
    cfg = _fit_config(args, model_variant=args.variant, estimate_rho=args.estimate_rho,
                      keep_latent=args.keep_latent)
    out = _out(args.out_dir)
    if not args.all_years:
        year, summary = _fit_one(data_dir, args.year, cfg, out)
        log.info("fit complete: %d draws saved", summary["n_saved"])
        return
    years = io.list_years(data_dir)
    # Each year is an independent chain writing to its own directory.
    tasks = [(data_dir, y, cfg, out / str(y)) for y in years]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_fit_one, *zip(*tasks)))
    else:
        results = [_fit_one(*t) for t in tasks]
    per_year = {str(y): {"n_saved": s["n_saved"],
                         "means": {k: v["mean"] for k, v in s["coefficients"].items()}}
                for y, s in results}
    io.write_manifest(out, "fit", cfg.to_dict(), cfg.seed, io.bundle_inputs(data_dir),
                      extra={"years": per_year})


def cmd_simulate(args):
    burn = args.iters // 2 if args.burn is None else args.burn
    spec = SimSpec(n_nodes=args.nodes, true_beta_d=tuple(args.beta_d),
                   true_beta_s=args.beta_s, true_beta_r=args.beta_r, k_dim=args.true_k,
                   n_replications=args.reps, seed=args.seed)
    cfg = FitConfig(k_dim=args.k, n_iter=args.iters, n_burn=burn, thin=args.thin,
                    seed=args.seed)
    result = run_recovery_study(spec, cfg, jobs=args.jobs)
    out = _out(args.out_dir)
    pd.DataFrame(result.records).to_csv(out / "replications.csv", index=False,
                                        float_format="%.17g")
    summary = result.summary()
    summary["true_coefficients"] = [*spec.true_beta_d, spec.true_beta_s, spec.true_beta_r]
    io.write_json(out / "summary.json", summary)
    io.write_manifest(out, "simulate", {"spec": spec.to_dict(), "fit": cfg.to_dict()},
                      args.seed, [])


def cmd_generate(args):
    spec = SimSpec(n_nodes=args.nodes, k_dim=args.k, seed=args.seed)
    net, cov, truth, directed = simulate_observed(spec, rng_stream(args.seed, 0))
    net.node_ids = [f"n{i:0{len(str(args.nodes - 1))}d}" for i in range(args.nodes)]
    out = _out(args.out_dir)
    io.write_bundle(out, net, cov)
    io.write_matrix_csv(out / "directed_truth.csv", directed, net.node_ids)
    io.write_json(out / "truth.json", spec.truth)
    io.write_manifest(out, "generate", spec.to_dict(), args.seed, [])


def _write_focus(path, probs, ids, focus_idx):
    keep = np.arange(len(ids)) != focus_idx
    df = pd.DataFrame({"node_id": np.asarray(ids, dtype=object)[keep],
                       "probability": probs[keep]})
    df = df.sort_values("probability", ascending=False, kind="mergesort")
    df.to_csv(path, index=False, float_format="%.17g")


def cmd_predict(args):
    data_dir = _require_data_dir(args)
    draws = io.read_draws(args.draws)
    net, cov = io.load_bundle(data_dir, args.year)
    ids = [str(i) for i in net.node_ids]
    if draws.node_ids and [str(i) for i in draws.node_ids] != ids:
        if len(draws.node_ids) != len(ids):
            raise ValidationError(
                f"dimension mismatch: draws have {len(draws.node_ids)} nodes, "
                f"data have {len(ids)}")
        raise ValidationError("node ids in draws and data differ")
    surface = predict_surface(draws, cov)
    out = _out(args.out_dir)
    io.write_matrix_csv(out / "directed_prob.csv", surface.directed_prob, ids)
    io.write_matrix_csv(out / "joint_prob.csv", surface.joint_prob, ids)
    if args.focus_node is not None:
        if args.focus_node not in ids:
            raise ValidationError(f"unknown focus node {args.focus_node!r}")
        f = ids.index(args.focus_node)
        _write_focus(out / "focus_demands.csv", surface.directed_prob[f, :], ids, f)
        _write_focus(out / "focus_demanded.csv", surface.directed_prob[:, f], ids, f)
    io.write_manifest(out, "predict", {"focus_node": args.focus_node, "year": args.year},
                      draws.config.seed, [Path(args.draws), *io.bundle_inputs(data_dir)])


def cmd_evaluate(args):
    data_dir = _require_data_dir(args)
    net, cov = io.load_bundle(data_dir, args.year)
    base = _fit_config(args)
    try:
        configs = [base.replace(model_variant=Variant(v)) for v in args.variants]
    except ValueError as exc:
        raise ValidationError(str(exc)) from exc
    split = HoldoutSpec(args.holdout_frac, args.seed)
    reports, holdout = evaluate_variants(net, cov, configs, split)
    out = _out(args.out_dir)
    pd.DataFrame([vars(r) for r in reports]).to_csv(out / "performance.csv", index=False,
                                                    float_format="%.17g")
    ii, jj = np.nonzero(np.triu(holdout, 1))
    ids = [str(i) for i in net.node_ids]
    log.info("held out %d dyads: %s", ii.size, list(zip(ii.tolist(), jj.tolist())))
    pd.DataFrame({"node_i": [ids[i] for i in ii], "node_j": [ids[j] for j in jj],
                  "y": net.adjacency[ii, jj]}).to_csv(out / "holdout.csv", index=False)
    io.write_manifest(out, "evaluate", {"fit": base.to_dict(), "variants": args.variants,
                                        "holdout_frac": args.holdout_frac},
                      args.seed, io.bundle_inputs(data_dir))


def cmd_kselect(args):
    data_dir = _require_data_dir(args)
    net, cov = io.load_bundle(data_dir, args.year)
    try:
        ks = [int(k) for k in args.k_values]
    except ValueError as exc:
        raise ValidationError(f"--k-values: {exc}") from exc
    cfg = _fit_config(args)
    rows = k_selection_table(net, cov, cfg, ks)
    out = _out(args.out_dir)
    pd.DataFrame(rows).to_csv(out / "kselect.csv", index=False, float_format="%.17g")
    io.write_manifest(out, "kselect", {"fit": cfg.to_dict(), "k_values": ks},
                      args.seed, io.bundle_inputs(data_dir))


def cmd_verify(args):
    root = Path(args.out_dir)
    manifests = sorted(root.rglob(io.MANIFEST_FILE))
    if not manifests:
        raise FileNotFoundError(f"no manifest found under {root}")
    problems = []
    for m in manifests:
        problems += [f"{m.parent}: {p}" for p in io.verify_manifest(m.parent)]
    if problems:
        raise ValidationError("; ".join(problems))
    print(f"ok: {len(manifests)} manifest(s) verified")


COMMANDS = {"fit": cmd_fit, "simulate": cmd_simulate, "generate": cmd_generate,
            "predict": cmd_predict, "evaluate": cmd_evaluate, "kselect": cmd_kselect,
            "verify": cmd_verify}


def _fail(category, code, exc):
    msg = " ".join(str(exc).split()) or type(exc).__name__
    print(f"pgbme: error[{category}]: {msg}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except ValidationError as exc:
        return _fail("validation", EXIT_VALIDATION, exc)
    except NumericalError as exc:
        return _fail("numerical", EXIT_NUMERICAL, exc)
    except PgbmeError as exc:
        return _fail("validation", EXIT_VALIDATION, exc)
    except OSError as exc:
        return _fail("io", EXIT_IO, exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
