"""Command-line entry point for batch experiments.

Exit codes: 0 success, 1 user/input error (bad files, diagnostics, failed
checks), 2 internal invariant violation.
"""

from __future__ import annotations

import argparse
import json
import random
import sys
from pathlib import Path

from . import dsl, graph as graphmod, world
from .autodiff import ParamStore, Tape, grad_check
from .engine import (
    brute_force,
    execute_argmax,
    infer_exact,
    infer_factorized,
)
from .errors import CycleDetectedError, ProgramError, VisprobError
from .modules import build_toy_modules, init_params
from .seeding import derive_seed
from .training import (
    TrainConfig,
    evaluate,
    metrics_to_csv,
    metrics_to_json,
    nll_loss,
    train,
)
from .values import token_of


def _ast_json(ast: dsl.ProgramAst) -> dict:
    statements = []
    for stmt in ast.statements:
        args = []
        for key, arg in stmt.args:
            if isinstance(arg, dsl.VarRef):
                args.append({"key": key, "var": arg.name})
            else:
                args.append({"key": key, "literal": arg.text})
        statements.append({"target": stmt.target, "module": stmt.module.value,
                           "args": args})
    return {"statements": statements, "visual_steps": dsl.count_visual_steps(ast)}


def cmd_parse(args) -> int:
    text = Path(args.program).read_text(encoding="utf-8")
    ast = dsl.parse_program(text)
    print(json.dumps(_ast_json(ast), indent=2))
    return 0


def cmd_graph(args) -> int:
    text = Path(args.program).read_text(encoding="utf-8")
    ast = dsl.parse_program(text)
    g = graphmod.build_graph(ast)
    if args.json:
        print(graphmod.export_json(g))
    else:
        sys.stdout.write(graphmod.export_dot(g, hide_deterministic=args.hide_deterministic))
    return 0


def _load_params(args, config: world.WorldConfig) -> ParamStore:
    if getattr(args, "params", None):
        return ParamStore.load(args.params)
    return init_params(config.vocab, seed=derive_seed(args.seed, "params"),
                       scale=0.5)


def _dist_json(dist, mode: str, case_id: str) -> dict:
    return {
        "program_id": case_id,
        "mode": mode,
        "support": [token_of(v) for v in dist.support],
        "probs": [p.value if hasattr(p, "value") else float(p)
                  for p in dist.probs],
    }


def cmd_infer(args) -> int:
    config, cases = world.load_dataset(args.case_file)
    if args.index is not None:
        cases = [cases[args.index]]
    modules = build_toy_modules(config.vocab, config.pool_size)
    params = _load_params(args, config)
    for case in cases:
        ast = dsl.parse_program(case.program_text)
        if args.mode == "argmax":
            value = execute_argmax(ast, case.scenes, modules, params)
            print(json.dumps({"program_id": case.id, "mode": "argmax",
                              "support": [token_of(value)], "probs": [1.0]}))
            continue
        shared = dsl.detect_shared_latents(ast)
        if args.mode == "brute":
            result = _dist_json(brute_force(ast, case.scenes, modules, params),
                                "brute", case.id)
        elif args.mode == "factorized":
            result = _dist_json(infer_factorized(ast, case.scenes, modules, params),
                                "factorized", case.id)
        else:
            result = _dist_json(infer_exact(ast, case.scenes, modules, params),
                                "exact", case.id)
        if shared and args.mode in ("exact", "factorized"):
            exact = infer_exact(ast, case.scenes, modules, params)
            factorized = infer_factorized(ast, case.scenes, modules, params)
            divergence = exact.max_abs_diff(factorized)
            result["shared_latents"] = [[latent, sorted(deps)]
                                        for latent, deps in shared]
            result["divergence"] = divergence
            other = "factorized" if args.mode == "exact" else "exact"
            other_dist = factorized if args.mode == "exact" else exact
            result["other_mode"] = _dist_json(other_dist, other, case.id)
            if divergence > 1e-9:
                print(f"warning: {case.id}: program has shared latents; "
                      f"factorized and exact modes diverge by {divergence:.3g}",
                      file=sys.stderr)
        print(json.dumps(result))
    return 0


def _parse_stage_weights(text: str, max_steps: int) -> dict[int, float]:
    weights = [float(w) for w in text.split(",")]
    if len(weights) > max_steps:
        raise VisprobError("more stage weights than --max-steps")
    return {i + 1: w for i, w in enumerate(weights) if w > 0}


def cmd_gen(args) -> int:
    config = world.WorldConfig(rows=args.rows, cols=args.cols,
                               pool_size=args.pool_size)
    weights = None
    if args.stages:
        weights = _parse_stage_weights(args.stages, args.max_steps)
    cases = world.gen_dataset(args.seed, args.cases, config,
                              max_visual_steps=args.max_steps,
                              step_weights=weights)
    world.save_dataset(args.out, config, cases)
    print(f"wrote {len(cases)} cases to {args.out}")
    return 0


def cmd_disrupt(args) -> int:
    config, cases = world.load_dataset(args.data)
    disrupted = world.disrupt_programs(cases, args.fraction, args.seed, config)
    world.save_dataset(args.out, config, disrupted)
    changed = sum(1 for c in disrupted if c.meta.disrupted)
    print(f"wrote {len(disrupted)} cases ({changed} disrupted) to {args.out}")
    return 0


def cmd_train(args) -> int:
    config = TrainConfig.from_yaml(args.config)
    world_config, dataset = world.load_dataset(args.data)
    eval_dataset = None
    if args.eval_data:
        _, eval_dataset = world.load_dataset(args.eval_data)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    fractions = ([float(f) for f in args.fractions.split(",")]
                 if args.fractions else [config.disruption.fraction])
    modules = build_toy_modules(world_config.vocab, world_config.pool_size)
    for fraction in fractions:
        config.disruption.fraction = fraction
        params = init_params(world_config.vocab,
                             seed=derive_seed(config.seed, "init"))
        tag = f"-f{int(round(fraction * 100)):02d}" if len(fractions) > 1 else ""
        run_dir = out_dir / f"run{tag}" if tag else out_dir
        run_dir.mkdir(parents=True, exist_ok=True)
        params, rows = train(config, dataset, modules, params, world_config,
                             eval_dataset=eval_dataset, out_dir=run_dir)
        (run_dir / "metrics.csv").write_text(metrics_to_csv(rows),
                                             encoding="utf-8")
        (run_dir / "metrics.json").write_text(
            json.dumps(metrics_to_json(rows), indent=2), encoding="utf-8")
        final = rows[-1]
        print(f"fraction={fraction:.2f} final acc={final.acc_final} "
              f"metrics in {run_dir}")
    return 0


def cmd_eval(args) -> int:
    config, cases = world.load_dataset(args.data)
    modules = build_toy_modules(config.vocab, config.pool_size)
    params = ParamStore.load(args.params)
    res = evaluate(cases, modules, params, config, mode=args.mode)
    print(json.dumps({
        "n": res.n, "acc_final": res.acc_final, "acc_loc": res.acc_loc,
        "acc_vqa": res.acc_vqa, "mean_nll": res.mean_nll,
        "err_program": res.err_program, "err_module": res.err_module,
        "err_other": res.err_other,
    }, indent=2))
    return 0


def _check_corpus(args) -> tuple[world.WorldConfig, list[world.CaseRecord]]:
    if args.data:
        return world.load_dataset(args.data)
    config = world.WorldConfig(pool_size=2)
    cases = world.gen_dataset(args.seed, args.cases, config, max_visual_steps=4)
    return config, cases


def cmd_oracle_check(args) -> int:
    config, cases = _check_corpus(args)
    modules = build_toy_modules(config.vocab, config.pool_size)
    max_dev = 0.0
    max_fact_dev = 0.0
    n_shared = 0
    for i, case in enumerate(cases):
        params = init_params(config.vocab,
                             seed=derive_seed(args.seed, "params", i), scale=0.5)
        ast = dsl.parse_program(case.program_text)
        exact = infer_exact(ast, case.scenes, modules, params)
        brute = brute_force(ast, case.scenes, modules, params)
        max_dev = max(max_dev, exact.max_abs_diff(brute))
        if dsl.detect_shared_latents(ast):
            n_shared += 1
        else:
            factorized = infer_factorized(ast, case.scenes, modules, params)
            max_fact_dev = max(max_fact_dev, exact.max_abs_diff(factorized))
    print(f"cases checked: {len(cases)} ({n_shared} with shared latents)")
    print(f"max |exact - brute| = {max_dev:.3e}")
    print(f"max |factorized - exact| on shared-latent-free subset = {max_fact_dev:.3e}")
    ok = max_dev < args.tolerance and max_fact_dev < args.tolerance
    print("PASS" if ok else "FAIL")
    return 0 if ok else 1


def cmd_gradcheck(args) -> int:
    config, cases = _check_corpus(args)
    modules = build_toy_modules(config.vocab, config.pool_size)
    worst = 0.0
    failures = 0
    rng = random.Random(derive_seed(args.seed, "gradcheck"))
    for i, case in enumerate(cases):
        params = init_params(config.vocab,
                             seed=derive_seed(args.seed, "params", i), scale=0.5)
        ast = dsl.parse_program(case.program_text)

        def loss_fn(p, _ast=ast, _case=case):
            tape = Tape()
            pred = infer_exact(_ast, _case.scenes, modules, p, tape)
            return nll_loss([(pred, _case.label)], tape)

        report = grad_check(loss_fn, params, eps=args.eps, tolerance=args.tol,
                            max_coords=args.coords, rng=rng)
        worst = max(worst, report.max_rel_err)
        failures += len(report.failures)
    print(f"cases checked: {len(cases)}")
    print(f"max relative error = {worst:.3e} (tolerance {args.tol})")
    print(f"failing coordinates: {failures}")
    ok = failures == 0
    print("PASS" if ok else "FAIL")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="visprob",
        description="Probabilistic visual-program engine: parse, compile, "
                    "infer, generate data, train, and audit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("parse", help="parse a program file and dump its AST")
    p.add_argument("program")
    p.set_defaults(fn=cmd_parse)

    p = sub.add_parser("graph", help="emit the probabilistic graph (DOT or JSON)")
    p.add_argument("program")
    p.add_argument("--json", action="store_true")
    p.add_argument("--hide-deterministic", action="store_true",
                   help="contract CROP/RESULT nodes as in the usual rendering")
    p.set_defaults(fn=cmd_graph)

    p = sub.add_parser("infer", help="run a case file through one inference mode")
    p.add_argument("case_file")
    p.add_argument("--mode", choices=("argmax", "factorized", "exact", "brute"),
                   default="exact")
    p.add_argument("--params", help="checkpoint JSON; default seeded random")
    p.add_argument("--index", type=int, default=None,
                   help="case index; default runs every case")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("gen", help="generate a synthetic dataset (JSONL)")
    p.add_argument("--cases", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-steps", type=int, default=4)
    p.add_argument("--stages", default=None,
                   help="comma-separated step-bucket weights, e.g. 5,10,5,3")
    p.add_argument("--rows", type=int, default=3)
    p.add_argument("--cols", type=int, default=3)
    p.add_argument("--pool-size", type=int, default=3)
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("disrupt", help="corrupt a fraction of programs in a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--fraction", type=float, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_disrupt)

    p = sub.add_parser("train", help="run outcome-supervised training")
    p.add_argument("--config", required=True, help="YAML training config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--eval-data", default=None)
    p.add_argument("--fractions", default=None,
                   help="comma-separated disruption fractions to sweep")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--mode", choices=("exact", "factorized"), default="exact")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("oracle-check",
                       help="compare exact inference against brute-force enumeration")
    p.add_argument("--data", default=None)
    p.add_argument("--cases", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-9)
    p.set_defaults(fn=cmd_oracle_check)

    p = sub.add_parser("gradcheck",
                       help="finite-difference check of training gradients")
    p.add_argument("--data", default=None)
    p.add_argument("--cases", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--coords", type=int, default=64)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(fn=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (CycleDetectedError, AssertionError) as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return 2
    except ProgramError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (VisprobError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
