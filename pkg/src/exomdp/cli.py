"""Command-line entry point: ``exomdp <subcommand> ...``.

Exit codes: 0 success, 1 a search or check failed, 2 malformed input,
3 a budget or state-space guard refused the run.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

import numpy as np

from . import core
from .core import PolicyCover, SchemaError, StateSpaceTooLarge, dumps, load_json, save_json
from .diagnostics import CHECKS, check_ladder, run_check
from .driver import (
    baseline_subset_enumeration,
    behavioral_endogeneity,
    exo_rl,
    full_joint_value_iteration,
)
from .endosearch import SearchFailed
from .envgen import GenerationError, gen_bellman_rank_instance, gen_combo_lock, gen_random_exo_mdp
from .exactdp import InfeasibleModel, cover_deficiency, endogenous_occupancy, exact_value, ossr_exact_all
from .ossr import BudgetExceeded, LearnConfig, ossr_h
from .sampler import Sampler

EXIT_OK, EXIT_FAIL, EXIT_SCHEMA, EXIT_BUDGET = 0, 1, 2, 3


def instance_id(model):
    return hashlib.sha256(dumps(core.model_to_dict(model)).encode()).hexdigest()[:16]


def _write(path, doc):
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    save_json(doc, path)


def _emit(doc):
    sys.stdout.write(dumps(doc))


def _deficiencies(model, covers):
    return {str(h): cover_deficiency(model, c, h) for h, c in sorted(covers.items())}


def _covers_doc(covers, S):
    return {"covers": [core.cover_to_dict(c, S) for _, c in sorted(covers.items())]}


def _covers_endogenous(model, covers):
    return all(c.factor_set.issubset(model.i_star) and all(I.issubset(model.i_star) for I in c.factor_sets()) for c in covers.values())


def cmd_gen(args):
    if args.kind == "random":
        model = gen_random_exo_mdp(args.d, args.k, args.S, args.A, args.H, args.eta, args.seed)
    elif args.kind == "combolock":
        model = gen_combo_lock(args.d, args.H - 1, args.S, args.A, args.noise, args.seed)
    else:
        model, _ = gen_bellman_rank_instance(args.d)
    core.save_model(model, args.out)
    _emit({"instance": instance_id(model), "out": args.out, "provenance": model.provenance})
    return EXIT_OK


def cmd_exact(args):
    model = core.load_model(args.model)
    h = args.h or model.H
    covers = ossr_exact_all(model, h)
    doc = _covers_doc(covers, model.S)
    doc.update(
        kind="exact",
        instance=instance_id(model),
        factorSets={str(t): list(c.factor_set) for t, c in sorted(covers.items())},
        deficiency=_deficiencies(model, covers),
        endogenous=_covers_endogenous(model, covers),
    )
    _write(args.out, doc)
    _emit({k: doc[k] for k in ("instance", "factorSets", "deficiency", "endogenous")})
    return EXIT_OK


def _config(args, trace):
    return LearnConfig(
        c_const=getattr(args, "c_const", 4.0),
        n_override=args.n_override,
        threads=args.threads,
        log=trace.append,
    )


def cmd_ossr(args):
    model = core.load_model(args.model)
    sampler = Sampler(model, threads=args.threads)
    trace = []
    config = _config(args, trace)
    eps = args.eps if args.eps is not None else args.eta / 2
    rng = np.random.default_rng(args.seed)
    covers = {1: PolicyCover.trivial(1)}
    for h in range(2, model.H + 1):
        covers[h], _ = ossr_h(sampler, covers, h, eps, args.delta, config, rng)
    deficiency = _deficiencies(model, covers)
    doc = _covers_doc(covers, model.S)
    doc.update(
        kind="ossr",
        instance=instance_id(model),
        seed=args.seed,
        eps=eps,
        delta=args.delta,
        trace=trace,
        factorSets={str(t): list(c.factor_set) for t, c in sorted(covers.items())},
        deficiency=deficiency,
        endogenous=_covers_endogenous(model, covers),
        withinHalfEta=max(deficiency.values()) <= args.eta / 2,
        totalEpisodes=sampler.episodes,
    )
    _write(args.out, doc)
    _emit({k: doc[k] for k in ("instance", "factorSets", "deficiency", "endogenous", "totalEpisodes")})
    return EXIT_OK


def cmd_exorl(args):
    model = core.load_model(args.model)
    sampler = Sampler(model, threads=args.threads)
    trace = []
    rng = np.random.default_rng(args.seed)
    res = exo_rl(sampler, args.eps, args.delta, args.eta, _config(args, trace), rng)
    j_star, _ = full_joint_value_iteration(model)
    J = exact_value(model, res.policy)
    endo, counter = behavioral_endogeneity(model, res.policy)
    summary = {
        "kind": "exorl",
        "instance": instance_id(model),
        "seed": args.seed,
        "eps": args.eps,
        "delta": args.delta,
        "eta": args.eta,
        "phaseEpisodes": res.phase_episodes,
        "totalEpisodes": sampler.episodes,
        "coverFactorSets": {str(h): list(c.factor_set) for h, c in sorted(res.covers.items())},
        "policyFactorSets": [list(I) for I in res.policy.factor_sets()],
        "J": J,
        "Jstar": j_star,
        "epsOptimal": J >= j_star - args.eps,
        "endogenous": endo,
        "counterexample": counter,
        "deficiency": _deficiencies(model, res.covers),
    }
    os.makedirs(args.out, exist_ok=True)
    save_json(core.policy_to_dict(res.policy, model.S), os.path.join(args.out, "policy.json"))
    save_json(_covers_doc(res.covers, model.S), os.path.join(args.out, "covers.json"))
    save_json(summary, os.path.join(args.out, "summary.json"))
    with open(os.path.join(args.out, "trace.jsonl"), "w") as fh:
        for rec in trace:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    _emit({k: summary[k] for k in ("instance", "J", "Jstar", "endogenous", "totalEpisodes")})
    return EXIT_OK


def cmd_baseline(args):
    model = core.load_model(args.model)
    sampler = Sampler(model, threads=args.threads)
    rng = np.random.default_rng(args.seed)
    res = baseline_subset_enumeration(sampler, args.eps, args.budget, args.eval_episodes, rng)
    j_star, _ = full_joint_value_iteration(model)
    J = exact_value(model, res.policy)
    endo, _ = behavioral_endogeneity(model, res.policy)
    summary = {
        "kind": "baseline",
        "instance": instance_id(model),
        "seed": args.seed,
        "eps": args.eps,
        "budget": args.budget,
        "candidates": [list(I) for I in res.candidates],
        "candidateCount": len(res.candidates),
        "estimates": res.estimates,
        "policyFactorSets": [list(I) for I in res.policy.factor_sets()],
        "J": J,
        "Jstar": j_star,
        "endogenous": endo,
        "totalEpisodes": res.episodes,
    }
    os.makedirs(args.out, exist_ok=True)
    save_json(core.policy_to_dict(res.policy, model.S), os.path.join(args.out, "policy.json"))
    save_json(summary, os.path.join(args.out, "summary.json"))
    _emit({k: summary[k] for k in ("instance", "J", "Jstar", "candidateCount", "totalEpisodes")})
    return EXIT_OK


def cmd_eval(args):
    model = core.load_model(args.model)
    doc = load_json(args.policy)
    policy = core.policy_from_dict(doc.get("policy", doc) if isinstance(doc, dict) else doc, "$")
    if policy.start != 1 or policy.end != model.H:
        raise SchemaError("$.steps", f"policy covers {policy.start}..{policy.end}, expected 1..{model.H}")
    j_star, _ = full_joint_value_iteration(model)
    endo, counter = behavioral_endogeneity(model, policy)
    out = {
        "kind": "eval",
        "instance": instance_id(model),
        "J": exact_value(model, policy),
        "Jstar": j_star,
        "endogenous": endo,
        "counterexample": counter,
        "occupancies": {str(h): endogenous_occupancy(model, policy, h).tolist() for h in range(1, model.H + 1)},
        "policy": core.policy_to_dict(policy, model.S),
    }
    if args.out:
        _write(args.out, out)
    _emit({k: out[k] for k in ("instance", "J", "Jstar", "endogenous")})
    return EXIT_OK


def cmd_diag(args):
    rng = np.random.default_rng(args.seed)
    if args.check == "ladder":
        report = check_ladder()
    else:
        if not args.model:
            raise SchemaError("--model", f"required for --check {args.check}")
        report = run_check(args.check, core.load_model(args.model), rng)
    if args.out:
        _write(args.out, report)
    _emit(report)
    return EXIT_OK if report["passed"] else EXIT_FAIL


def cmd_report(args):
    from .report import render_figures, summary_row, write_csv

    docs = []
    for path in args.summary:
        docs.append((os.path.basename(os.path.dirname(path)) or path, load_json(path)))
    os.makedirs(args.out, exist_ok=True)
    rows = [summary_row(name, doc) for name, doc in docs]
    write_csv(rows, os.path.join(args.out, "summary.csv"))
    figures = [] if args.no_figures else render_figures(docs, args.out)
    _emit({"rows": len(rows), "figures": figures})
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="exomdp", description="ExoMDP simulator, exact oracles and learners.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--threads", type=int, default=1)
        if seed:
            sp.add_argument("--seed", type=int, default=0)

    g = sub.add_parser("gen", help="generate a model file")
    g.add_argument("--kind", choices=["random", "combolock", "bellman"], default="random")
    g.add_argument("--d", type=int, required=True)
    g.add_argument("--k", type=int, default=1)
    g.add_argument("--S", type=int, default=2)
    g.add_argument("--A", type=int, default=2)
    g.add_argument("--H", type=int, default=3)
    g.add_argument("--eta", type=float, default=0.0)
    g.add_argument("--noise", type=float, default=0.1, help="combolock exogenous resampling probability")
    g.add_argument("--out", required=True)
    common(g)
    g.set_defaults(func=cmd_gen)

    e = sub.add_parser("exact", help="exact covers and their deficiency")
    e.add_argument("--model", required=True)
    e.add_argument("--h", type=int, default=None)
    e.add_argument("--out", required=True)
    common(e, seed=False)
    e.set_defaults(func=cmd_exact)

    o = sub.add_parser("ossr", help="sampled covers for every layer")
    o.add_argument("--model", required=True)
    o.add_argument("--eps", type=float, default=None, help="cover precision (default eta/2)")
    o.add_argument("--delta", type=float, default=0.1)
    o.add_argument("--eta", type=float, required=True)
    o.add_argument("--n-override", type=int, default=None)
    o.add_argument("--c-const", type=float, default=4.0)
    o.add_argument("--out", required=True)
    common(o)
    o.set_defaults(func=cmd_ossr)

    x = sub.add_parser("exorl", help="learn a policy end to end")
    x.add_argument("--model", required=True)
    x.add_argument("--eps", type=float, required=True)
    x.add_argument("--delta", type=float, default=0.1)
    x.add_argument("--eta", type=float, required=True)
    x.add_argument("--n-override", type=int, default=None)
    x.add_argument("--c-const", type=float, default=4.0)
    x.add_argument("--out", required=True, help="output directory")
    common(x)
    x.set_defaults(func=cmd_exorl)

    b = sub.add_parser("baseline", help="subset-enumeration baseline")
    b.add_argument("--model", required=True)
    b.add_argument("--eps", type=float, required=True)
    b.add_argument("--budget", type=int, required=True, help="uniform episodes per candidate set")
    b.add_argument("--eval-episodes", type=int, default=None)
    b.add_argument("--out", required=True, help="output directory")
    common(b)
    b.set_defaults(func=cmd_baseline)

    v = sub.add_parser("eval", help="exact value and endogeneity of a policy file")
    v.add_argument("--model", required=True)
    v.add_argument("--policy", required=True)
    v.add_argument("--out", default=None)
    common(v, seed=False)
    v.set_defaults(func=cmd_eval)

    dg = sub.add_parser("diag", help="structural checks")
    dg.add_argument("--model", default=None)
    dg.add_argument("--check", choices=CHECKS, required=True)
    dg.add_argument("--out", default=None)
    common(dg)
    dg.set_defaults(func=cmd_diag)

    r = sub.add_parser("report", help="CSV table and PNG figures from summary files")
    r.add_argument("--summary", nargs="+", required=True)
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--no-figures", action="store_true")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SchemaError as err:
        sys.stderr.write(f"schema error: {err}\n")
        return EXIT_SCHEMA
    except (BudgetExceeded, StateSpaceTooLarge) as err:
        sys.stderr.write(f"refused: {err}\n")
        return EXIT_BUDGET
    except (SearchFailed, InfeasibleModel, GenerationError) as err:
        sys.stderr.write(f"FAIL: {err}\n")
        return EXIT_FAIL
    except FileNotFoundError as err:
        sys.stderr.write(f"schema error: {err}\n")
        return EXIT_SCHEMA


if __name__ == "__main__":
    sys.exit(main())
