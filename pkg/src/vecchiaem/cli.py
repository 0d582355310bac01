"""Batch command-line interface.

Subcommands: simulate, fit-vecchia, fit-em, exact-nll, predict,
diagnose-saa, study, rerun. Every command writes a JSON run manifest next
to its outputs with the resolved flags, seeds, paths, version, and wall
times; ``rerun <manifest>`` re-executes a command from its manifest and
reproduces the outputs bit-identically at a fixed thread count.

No plotting and no interactivity; outputs are plot-ready CSVs. Exit codes:
0 success, 1 user error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import __version__
from .em import (
    EMConfig,
    ParamSpace,
    em_fit,
    estep_prepare,
    fit_naive_vecchia,
    saa_diagnostic,
    default_init,
)
from .kernels import (
    MaternIsoParams,
    NoiseDiagParams,
    load_config,
    save_config,
)
from .optimize import OptimizerConfig
from .simulate import SimSpec, SpatialDataset, load_dataset, sample_gp, sample_locations, save_dataset, predict_nn
from .solver import SolverError, exact_nll
from .trace import draw_saa
from .vecchia import (
    BlockWorkspace,
    PositiveDefiniteError,
    VecchiaPlan,
    build_conditioning,
    coordinate_order,
    maximin_order,
)


class UserError(Exception):
    pass


_CURRENT_ARGV = []  # the argv of the running invocation, for manifests


# -- shared plumbing ---------------------------------------------------------------


def _write_manifest(path, command, flags, outputs, timings, seeds=None):
    flags = {k: v for k, v in flags.items() if k != "func"}
    doc = {
        "command": command,
        "argv": list(_CURRENT_ARGV),
        "flags": flags,
        "outputs": outputs,
        "seeds": seeds or {},
        "version": __version__,
        "timings": timings,
    }
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def _write_csv(path, header, rows):
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_cell(v) for v in row) + "\n")
    os.replace(tmp, path)


def _cell(v):
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _parse_inline_params(text):
    """Isotropic-model shorthand '(sigma2,rho,nu,eta2)' or without nugget."""
    vals = [float(t) for t in text.strip().strip("()").replace(",", " ").split()]
    if len(vals) == 4:
        return MaternIsoParams(*vals[:3]), NoiseDiagParams(eta2=vals[3])
    if len(vals) == 3:
        return MaternIsoParams(*vals), None
    raise UserError("inline parameters need 3 or 4 values: (sigma2,rho,nu[,eta2])")


def _load_params(text_or_path):
    if os.path.exists(text_or_path):
        return load_config(text_or_path)
    if text_or_path.lstrip().startswith("("):
        return _parse_inline_params(text_or_path)
    raise UserError(f"parameter file not found: {text_or_path}")


def _ordering(name, locs):
    if name == "maximin":
        return maximin_order(locs)
    if name == "coord":
        return coordinate_order(locs)
    if name == "none":
        return np.arange(locs.shape[0])
    raise UserError(f"unknown ordering {name!r}")


def _plan_for(args, locs):
    if args.plan and os.path.exists(args.plan):
        return VecchiaPlan.load(args.plan)
    perm = _ordering(args.ordering, locs)
    if args.block_size:
        return build_conditioning(locs, perm, mode="chunked",
                                  block_size=args.block_size,
                                  past_chunks=args.past_chunks)
    return build_conditioning(locs, perm, mode="nn", m=args.m)


def _add_plan_flags(p):
    p.add_argument("--ordering", default="maximin",
                   choices=["maximin", "coord", "none"],
                   help="point ordering for the conditioning plan")
    p.add_argument("--m", type=int, default=10,
                   help="nearest-neighbor conditioning size")
    p.add_argument("--block-size", type=int, default=0,
                   help="use chunked conditioning with this block size")
    p.add_argument("--past-chunks", type=int, default=3,
                   help="past chunks to condition on in chunked mode")
    p.add_argument("--plan", default="",
                   help="reuse a saved conditioning plan file")


def _space_for(model, noise):
    return ParamSpace(model, noise)


# -- commands ----------------------------------------------------------------------


def cmd_simulate(args):
    t0 = time.perf_counter()
    model, noise = _load_params(args.params)
    spec = SimSpec(n=args.n, dim=args.dim, seed=args.seed,
                   bounds=tuple((0.0, 1.0) for _ in range(args.dim)),
                   replicates=args.replicates)
    outputs = []
    for r in range(args.replicates):
        locs = sample_locations(spec, replicate=r)
        y, z = sample_gp(model, noise, locs, seed=args.seed * 1000003 + r,
                         return_latent=True)
        ds = SpatialDataset(locs=locs, y=y, z=z if args.latent else None)
        suffix = f"_rep{r}.csv" if args.replicates > 1 else ".csv"
        path = args.out + suffix
        save_dataset(path, ds)
        outputs.append(path)
    params_path = args.out + "_params.txt"
    save_config(params_path, model, noise)
    outputs.append(params_path)
    _write_manifest(args.out + "_manifest.json", "simulate", vars(args), outputs,
                    {"wall": time.perf_counter() - t0}, seeds={"seed": args.seed})
    print(f"wrote {len(outputs)} files under {args.out}*")
    return 0


def cmd_fit_vecchia(args):
    t0 = time.perf_counter()
    ds = load_dataset(args.data)
    plan = _plan_for(args, ds.locs)
    ws = BlockWorkspace(ds.locs, plan)
    if args.init:
        model, noise = _load_params(args.init)
    else:
        model, noise = MaternIsoParams(1.0, 0.1, 1.0), NoiseDiagParams(eta2=0.1)
    if args.kernel_only:
        noise = None
    space = _space_for(model, noise)
    x0 = space.transform(space.pack()) if args.init else default_init(ds.locs, ds.y, space)
    opt = OptimizerConfig(method=args.method, grad_mode=args.grad_mode,
                          grad_tol=args.grad_tol, max_evals=args.max_evals)
    x_hat, result = fit_naive_vecchia(ds.locs, ds.y, plan, space, x0=x0,
                                      opt_config=opt, workspace=ws)
    m_hat, n_hat = space.models_at(x_hat)
    save_config(args.out + "_params.txt", m_hat, n_hat)
    _write_csv(args.out + "_trace.csv",
               ["eval", "objective", "grad_norm", "step_norm"], result.trace)
    if args.save_plan:
        plan.save(args.out + "_plan.txt")
    _write_manifest(args.out + "_manifest.json", "fit-vecchia", vars(args),
                    [args.out + "_params.txt", args.out + "_trace.csv"],
                    {"wall": time.perf_counter() - t0})
    print(f"status={result.status} evals={result.n_evals} "
          f"objective={result.f:.6f}")
    print("params:", ", ".join(f"{k}={v:.6g}" for k, v in
                               zip(space.names, space.untransform(x_hat))))
    return 0


def _em_config(args):
    return EMConfig(
        saa_count=args.saa_count, saa_seed=args.saa_seed,
        max_iter=args.max_iter, tol=args.tol,
        symmetrize=args.symmetrize == "on",
        backend=args.backend, exact_trace=args.exact_trace,
        mstep=OptimizerConfig(method=args.method, grad_mode=args.grad_mode,
                              grad_tol=args.grad_tol, max_evals=args.max_evals))


def cmd_fit_em(args):
    t0 = time.perf_counter()
    ds = load_dataset(args.data)
    plan = _plan_for(args, ds.locs)
    ws = BlockWorkspace(ds.locs, plan)
    if args.init:
        model, noise = _load_params(args.init)
        if noise is None:
            raise UserError("EM refinement needs a noise component in --init")
        space = _space_for(model, noise)
        x0 = space.transform(space.pack())
    else:
        model, noise = MaternIsoParams(1.0, 0.1, 1.0), NoiseDiagParams(eta2=0.1)
        space = _space_for(model, noise)
        x0, _ = fit_naive_vecchia(ds.locs, ds.y, plan, space,
                                  x0=default_init(ds.locs, ds.y, space),
                                  workspace=ws)
    config = _em_config(args)
    state = em_fit(ds.locs, ds.y, plan, x0, space, config, workspace=ws)
    m_hat, n_hat = space.models_at(state.x0)
    save_config(args.out + "_params.txt", m_hat, n_hat)
    header = ["iteration"] + list(space.names) + ["e_value", "marginal_nll", "wall"]
    rows = [[h["iteration"], *h["params"], h["e_value"], h["marginal_nll"], h["wall"]]
            for h in state.history]
    _write_csv(args.out + "_history.csv", header, rows)
    _write_manifest(args.out + "_manifest.json", "fit-em", vars(args),
                    [args.out + "_params.txt", args.out + "_history.csv"],
                    {"wall": time.perf_counter() - t0},
                    seeds={"saa_seed": args.saa_seed})
    print(f"converged={state.converged} iterations={state.iteration}")
    print("params:", ", ".join(f"{k}={v:.6g}" for k, v in
                               zip(space.names, space.untransform(state.x0))))
    return 0


def cmd_exact_nll(args):
    ds = load_dataset(args.data)
    if args.diff:
        ma, na = _load_params(args.diff[0])
        mb, nb = _load_params(args.diff[1])
        la = exact_nll(ma, na, ds.locs, ds.y, force=args.force_dense)
        lb = exact_nll(mb, nb, ds.locs, ds.y, force=args.force_dense)
        print(f"nll_a={la!r} nll_b={lb!r} diff={la - lb!r}")
        if args.out:
            _write_csv(args.out, ["nll_a", "nll_b", "diff"], [[la, lb, la - lb]])
            _write_manifest(args.out + ".manifest.json", "exact-nll", vars(args),
                            [args.out], {})
        return 0
    model, noise = _load_params(args.params)
    val = exact_nll(model, noise, ds.locs, ds.y, force=args.force_dense)
    print(repr(val))
    if args.out:
        _write_csv(args.out, ["exact_nll"], [[val]])
        _write_manifest(args.out + ".manifest.json", "exact-nll", vars(args),
                        [args.out], {})
    return 0


def cmd_predict(args):
    ds = load_dataset(args.data)
    model, noise = _load_params(args.params)
    compare = _load_params(args.compare) if args.compare else None
    targets = []
    if args.at:
        for spec in args.at:
            targets.append([float(t) for t in spec.replace(",", " ").split()])
    if not targets:
        raise UserError("give at least one --at location")
    k = args.k if args.k else ds.n
    header = [f"x{i+1}" for i in range(ds.dim)] + ["mean", "var"]
    if compare:
        header += ["mean_b", "abs_diff"]
    rows = []
    for x_star in targets:
        mean, var = predict_nn(model, noise, ds, np.array(x_star), k)
        row = list(x_star) + [mean, var]
        if compare:
            mb, _ = predict_nn(compare[0], compare[1], ds, np.array(x_star), k)
            row += [mb, abs(mean - mb)]
        rows.append(row)
    _write_csv(args.out, header, rows)
    _write_manifest(args.out + ".manifest.json", "predict", vars(args),
                    [args.out], {})
    print(f"wrote {len(rows)} predictions to {args.out}")
    return 0


def cmd_diagnose_saa(args):
    t0 = time.perf_counter()
    ds = load_dataset(args.data)
    plan = _plan_for(args, ds.locs)
    ws = BlockWorkspace(ds.locs, plan)
    model, noise = _load_params(args.params)
    if noise is None:
        raise UserError("the diagnostic needs a noise component in --params")
    space = _space_for(model, noise)
    x0 = space.transform(space.pack())
    config = _em_config(args)
    counts = [int(c) for c in args.counts.split(",")]
    ens = draw_saa(ds.n, max(counts), config.saa_seed)
    state = estep_prepare(x0, ds.y, ws, ens, space, config)
    rows = [[c, *vals] for c, vals in saa_diagnostic(state, counts)]
    _write_csv(args.out, ["saa_count"] + list(space.names), rows)
    _write_manifest(args.out + ".manifest.json", "diagnose-saa", vars(args),
                    [args.out], {"wall": time.perf_counter() - t0},
                    seeds={"saa_seed": args.saa_seed})
    print(f"wrote {len(rows)} rows to {args.out}")
    return 0


# -- the replication study -----------------------------------------------------------


def _study_replicate(job):
    """One study replicate; returns a row dict (never raises)."""
    (r, n, params_text, master_seed, m, saa_count, saa_seed, max_iter,
     k_predict, backend) = job
    try:
        model_true, noise_true = _load_params(params_text)
        spec = SimSpec(n=n, seed=master_seed)
        locs = sample_locations(spec, replicate=r)
        y, z = sample_gp(model_true, noise_true, locs,
                         seed=master_seed * 1000003 + r, return_latent=True)
        ds = SpatialDataset(locs=locs, y=y, z=z)
        perm = maximin_order(locs)
        plan = build_conditioning(locs, perm, mode="nn", m=m)
        ws = BlockWorkspace(locs, plan)
        space = ParamSpace(model_true, noise_true)

        t0 = time.perf_counter()
        x_naive, res = fit_naive_vecchia(locs, y, plan, space,
                                         x0=default_init(locs, y, space),
                                         workspace=ws)
        t_naive = time.perf_counter() - t0
        config = EMConfig(saa_count=saa_count, saa_seed=saa_seed + r,
                          max_iter=max_iter, backend=backend)
        t0 = time.perf_counter()
        state = em_fit(locs, y, plan, x_naive, space, config, workspace=ws)
        t_em = time.perf_counter() - t0

        mn_, nn_ = space.models_at(x_naive)
        me_, ne_ = space.models_at(state.x0)
        nll_true = exact_nll(model_true, noise_true, locs, y)
        nll_naive = exact_nll(mn_, nn_, locs, y)
        nll_em = exact_nll(me_, ne_, locs, y)
        center = np.full(ds.dim, 0.5)
        zc_true, var_true = predict_nn(model_true, noise_true, ds, center, k_predict)
        zc_naive, _ = predict_nn(mn_, nn_, ds, center, k_predict)
        zc_em, _ = predict_nn(me_, ne_, ds, center, k_predict)
        return {
            "replicate": r, "status": "ok",
            "params_naive": space.untransform(x_naive),
            "params_em": space.untransform(state.x0),
            "nll_true": nll_true, "nll_naive": nll_naive, "nll_em": nll_em,
            "pred_err_naive": abs(zc_true - zc_naive),
            "pred_err_em": abs(zc_true - zc_em),
            "pred_var_true": var_true,
            "em_iters": state.iteration, "em_converged": state.converged,
            "t_naive": t_naive, "t_em": t_em,
            "names": list(space.names),
        }
    except Exception as exc:  # record and continue
        return {"replicate": r, "status": f"failed: {type(exc).__name__}: {exc}"}


def cmd_study(args):
    t0 = time.perf_counter()
    jobs = [(r, args.n, args.params, args.seed, args.m, args.saa_count,
             args.saa_seed, args.max_iter, args.k_predict, args.backend)
            for r in range(args.replicates)]
    if args.threads > 1:
        import multiprocessing as mp
        with mp.Pool(args.threads) as pool:
            results = pool.map(_study_replicate, jobs)
    else:
        results = [_study_replicate(j) for j in jobs]

    names = next((r["names"] for r in results if r["status"] == "ok"), [])
    header = (["replicate", "status"]
              + [f"naive_{k}" for k in names] + [f"em_{k}" for k in names]
              + ["nll_true", "nll_naive", "nll_em",
                 "pred_err_naive", "pred_err_em", "pred_var_true",
                 "em_iters", "em_converged", "t_naive", "t_em"])
    rows = []
    for r in results:
        if r["status"] != "ok":
            rows.append([r["replicate"], r["status"]] + [""] * (len(header) - 2))
            continue
        rows.append([r["replicate"], "ok", *r["params_naive"], *r["params_em"],
                     r["nll_true"], r["nll_naive"], r["nll_em"],
                     r["pred_err_naive"], r["pred_err_em"], r["pred_var_true"],
                     r["em_iters"], int(r["em_converged"]),
                     r["t_naive"], r["t_em"]])
    _write_csv(args.out, header, rows)
    _write_manifest(args.out + ".manifest.json", "study", vars(args), [args.out],
                    {"wall": time.perf_counter() - t0},
                    seeds={"seed": args.seed, "saa_seed": args.saa_seed})
    ok = [r for r in results if r["status"] == "ok"]
    wins = sum(1 for r in ok if r["nll_em"] <= r["nll_naive"])
    print(f"{len(ok)}/{len(results)} replicates ok; EM beats naive in "
          f"{wins}/{len(ok)} by exact NLL")
    return 0


def cmd_rerun(args):
    with open(args.manifest) as fh:
        doc = json.load(fh)
    argv = doc.get("argv")
    if not argv:
        raise UserError("manifest does not record the original command line")
    return main(argv)


# -- parser ------------------------------------------------------------------------


def _add_fit_flags(p):
    p.add_argument("--method", default="bfgs",
                   choices=["bfgs", "newton_trust_region"])
    p.add_argument("--grad-mode", default="supplied",
                   choices=["supplied", "finite_diff"],
                   help="forward-mode gradients or central differences")
    p.add_argument("--grad-tol", type=float, default=1e-5)
    p.add_argument("--max-evals", type=int, default=200)


def _add_em_flags(p):
    p.add_argument("--saa-count", type=int, default=72,
                   help="probe vectors per fit (about 70 is a good start)")
    p.add_argument("--saa-seed", type=int, default=0)
    p.add_argument("--max-iter", type=int, default=30)
    p.add_argument("--tol", type=float, default=1e-4,
                   help="EM step tolerance in transformed coordinates")
    p.add_argument("--symmetrize", default="on", choices=["on", "off"])
    p.add_argument("--backend", default="sparse_chol",
                   choices=["dense_chol", "sparse_chol", "cg"])
    p.add_argument("--exact-trace", action="store_true",
                   help="dense oracle trace instead of probes (small n only)")


def build_parser():
    ap = argparse.ArgumentParser(
        prog="vecchiaem",
        description="Noisy Gaussian-process estimation: Vecchia likelihoods "
                    "with EM refinement.")
    ap.add_argument("--threads", type=int, default=1,
                    help="worker processes for replicate-level parallelism")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate datasets from a parameter file")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--dim", type=int, default=2)
    p.add_argument("--params", required=True,
                   help="parameter file or inline '(sigma2,rho,nu,eta2)'")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--replicates", type=int, default=1)
    p.add_argument("--latent", action=argparse.BooleanOptionalAction, default=True,
                   help="store the latent field column")
    p.add_argument("--out", required=True, help="output path prefix")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit-vecchia", help="naive Vecchia fit (nugget folded in)")
    p.add_argument("--data", required=True)
    p.add_argument("--init", default="", help="starting parameter file")
    p.add_argument("--kernel-only", action="store_true",
                   help="fit without a noise component")
    p.add_argument("--save-plan", action="store_true")
    p.add_argument("--out", required=True)
    _add_plan_flags(p)
    _add_fit_flags(p)
    p.set_defaults(func=cmd_fit_vecchia)

    p = sub.add_parser("fit-em", help="EM refinement of a noisy-GP fit")
    p.add_argument("--data", required=True)
    p.add_argument("--init", default="",
                   help="starting parameter file (default: naive Vecchia fit)")
    p.add_argument("--out", required=True)
    _add_plan_flags(p)
    _add_fit_flags(p)
    _add_em_flags(p)
    p.set_defaults(func=cmd_fit_em)

    p = sub.add_parser("exact-nll", help="dense exact marginal NLL of a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--params", default="")
    p.add_argument("--diff", nargs=2, metavar=("FILE_A", "FILE_B"),
                   help="emit nll(A) - nll(B)")
    p.add_argument("--force-dense", action="store_true")
    p.add_argument("--out", default="")
    p.set_defaults(func=cmd_exact_nll)

    p = sub.add_parser("predict", help="kriging with k nearest neighbors")
    p.add_argument("--data", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--compare", default="",
                   help="second parameter file for |mean difference| column")
    p.add_argument("--at", action="append", default=[],
                   help="target location 'x1,x2' (repeatable)")
    p.add_argument("--k", type=int, default=0, help="neighbors (default: all)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("diagnose-saa",
                       help="re-run one M step at increasing probe counts")
    p.add_argument("--data", required=True)
    p.add_argument("--params", required=True, help="theta0 parameter file")
    p.add_argument("--counts", default="5,25,50,75,100,125")
    p.add_argument("--out", required=True)
    _add_plan_flags(p)
    _add_fit_flags(p)
    _add_em_flags(p)
    p.set_defaults(func=cmd_diagnose_saa)

    p = sub.add_parser("study", help="replicated simulate/fit/score experiment")
    p.add_argument("--replicates", type=int, default=50)
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--params", default="(10,0.025,2.25,0.25)")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--m", type=int, default=10)
    p.add_argument("--saa-count", type=int, default=72)
    p.add_argument("--saa-seed", type=int, default=0)
    p.add_argument("--max-iter", type=int, default=30)
    p.add_argument("--backend", default="sparse_chol",
                   choices=["dense_chol", "sparse_chol", "cg"])
    p.add_argument("--k-predict", type=int, default=500)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_study)

    p = sub.add_parser("rerun", help="re-execute a command from its manifest")
    p.add_argument("manifest")
    p.set_defaults(func=cmd_rerun)
    return ap


def main(argv=None):
    global _CURRENT_ARGV
    _CURRENT_ARGV = list(sys.argv[1:]) if argv is None else list(argv)
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.func(args)
    except UserError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (PositiveDefiniteError, SolverError, OverflowError,
            np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
