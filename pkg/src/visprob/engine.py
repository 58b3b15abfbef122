"""Program execution: argmax, factorized inference, exact inference, brute force.

The three probabilistic modes share one model of the program:

* LOC and VQA targets are stochastic variables. Each gets a conditional
  factor over (region ancestors..., target), where region ancestors are the
  detection variables its image argument depends on through CROP chains.
* CROP targets are deterministic region functions of those detections and are
  composed into downstream factors rather than materialized.
* COUNT and EVAL targets get deterministic indicator factors over the
  variables they reference, which keeps factor scopes small for chained
  EVAL statements.

``infer_exact`` runs variable elimination over these factors and is the exact
law of the program. ``infer_factorized`` instead computes each answer's
marginal over its own ancestors and combines marginals through the EVAL
combinators as if independent; the two agree exactly when no EVAL joins
answers with overlapping stochastic ancestry. ``brute_force`` enumerates
every joint assignment with plain floats and exists to check the others.
"""

from __future__ import annotations

import itertools
import math
from functools import lru_cache
from typing import Callable, Mapping

from .autodiff import Tape, mixed_mul, mixed_sum
from .dsl import CROP_KINDS, ModuleKind, ProgramAst, Statement
from .errors import ModuleFailureError, SupportExplosionError
from .evalexpr import evaluate_concrete, parse_eval, placeholders
from .evalexpr import distribution as eval_distribution
from .modules import ModuleSet, count, crop
from .scene import Scene
from .values import Categorical, Detection, Region, Value

EXACT_SUPPORT_CAP = 10 ** 6
BRUTE_FORCE_CAP = 10 ** 5

INFERENCE_MODES = ("argmax", "factorized", "exact", "brute")

_parse_eval_cached = lru_cache(maxsize=4096)(parse_eval)


def _value_key(v):
    if isinstance(v, int) and not isinstance(v, bool):
        return (0, v)
    return (1, str(v))


class _ProgramView:
    """Precomputed lineage information for one (program, scenes) pair."""

    def __init__(self, ast: ProgramAst, scenes: Mapping[str, Scene]):
        self.ast = ast
        self.scenes = scenes
        self.producers: dict[str, Statement] = {s.target: s for s in ast.statements}
        self._anc_cache: dict[str, tuple[str, ...]] = {}

    def scene_of(self, image_name: str) -> Scene:
        scene = self.scenes.get(image_name)
        if scene is None:
            raise ModuleFailureError(f"scene does not provide input {image_name!r}")
        return scene

    def region_ancestors(self, image_var: str) -> tuple[str, ...]:
        """Detection variables the region of ``image_var`` depends on."""
        cached = self._anc_cache.get(image_var)
        if cached is not None:
            return cached
        stmt = self.producers.get(image_var)
        if stmt is None:  # predefined input
            anc: tuple[str, ...] = ()
        else:
            assert stmt.module in CROP_KINDS
            upstream = self.region_ancestors(stmt.var_arg("image"))
            box = stmt.var_arg("box")
            anc = upstream if box in upstream else upstream + (box,)
        self._anc_cache[image_var] = anc
        return anc

    def resolve_region(self, image_var: str, det_env: Mapping[str, Detection]) -> Region:
        stmt = self.producers.get(image_var)
        if stmt is None:
            return self.scene_of(image_var).whole_region(image_var)
        region = self.resolve_region(stmt.var_arg("image"), det_env)
        return crop(region, det_env[stmt.var_arg("box")], stmt.module.value)


# --- symbolic (single-assignment) execution --------------------------------------


def run_symbolic(ast: ProgramAst, scenes: Mapping[str, Scene],
                 loc_fn: Callable[[Scene, Region, str], Detection],
                 vqa_fn: Callable[[Scene, Region, str], Value],
                 interventions: Mapping[str, Value] | None = None
                 ) -> dict[str, Value]:
    """Execute with point-valued modules; returns every variable's value."""
    env: dict[str, Value] = {name: scene.whole_region(name)
                             for name, scene in scenes.items()}

    def region_of(name: str) -> Region:
        value = env.get(name)
        if value is None:
            raise ModuleFailureError(f"scene does not provide input {name!r}")
        return value

    for stmt in ast.statements:
        if interventions and stmt.target in interventions:
            env[stmt.target] = interventions[stmt.target]
            continue
        kind = stmt.module
        if kind is ModuleKind.LOC:
            region = region_of(stmt.var_arg("image"))
            env[stmt.target] = loc_fn(_scene(scenes, region), region,
                                      stmt.lit_arg("object"))
        elif kind in CROP_KINDS:
            region = region_of(stmt.var_arg("image"))
            env[stmt.target] = crop(region, env[stmt.var_arg("box")], kind.value)
        elif kind is ModuleKind.VQA:
            region = region_of(stmt.var_arg("image"))
            env[stmt.target] = vqa_fn(_scene(scenes, region), region,
                                      stmt.lit_arg("question"))
        elif kind is ModuleKind.COUNT:
            env[stmt.target] = count(env[stmt.var_arg("box")])
        elif kind is ModuleKind.EVAL:
            parsed = _parse_eval_cached(stmt.lit_arg("expr"))
            env[stmt.target] = evaluate_concrete(parsed, env)
        elif kind is ModuleKind.RESULT:
            env[stmt.target] = env[stmt.var_arg("var")]
    return env


def _scene(scenes: Mapping[str, Scene], region: Region) -> Scene:
    scene = scenes.get(region.image)
    if scene is None:
        raise ModuleFailureError(f"scene does not provide input {region.image!r}")
    return scene


def execute_argmax(ast: ProgramAst, scenes: Mapping[str, Scene],
                   modules: ModuleSet, params,
                   interventions: Mapping[str, Value] | None = None) -> Value:
    """Original non-differentiable semantics: every module emits its mode."""

    def loc_fn(scene, region, obj):
        return modules.loc.outcome_distribution(scene, region, obj, params).argmax()

    def vqa_fn(scene, region, question):
        return modules.vqa.answer_distribution(scene, region, question, params).argmax()

    env = run_symbolic(ast, scenes, loc_fn, vqa_fn, interventions)
    return env[ast.result_statement.target]


# --- brute-force enumeration oracle -----------------------------------------------


def brute_force(ast: ProgramAst, scenes: Mapping[str, Scene],
                modules: ModuleSet, params,
                support_cap: int = BRUTE_FORCE_CAP,
                interventions: Mapping[str, Value] | None = None) -> Categorical:
    """Enumerate every joint assignment of the stochastic latents (floats only).

    Kept deliberately independent of the factor machinery: it interprets the
    program once per assignment, exactly like the argmax executor but with
    forced module outputs.
    """
    stmts = ast.statements
    result_target = ast.result_statement.target
    acc: dict[Value, float] = {}
    leaves = 0

    def walk(i: int, env: dict, weight: float) -> None:
        nonlocal leaves
        if i == len(stmts):
            leaves += 1
            if leaves > support_cap:
                raise SupportExplosionError(
                    f"brute force exceeded {support_cap} joint assignments")
            value = env[result_target]
            acc[value] = acc.get(value, 0.0) + weight
            return
        stmt = stmts[i]
        target = stmt.target
        if interventions and target in interventions:
            walk(i + 1, {**env, target: interventions[target]}, weight)
            return
        kind = stmt.module
        if kind is ModuleKind.LOC or kind is ModuleKind.VQA:
            image_var = stmt.var_arg("image")
            region = env.get(image_var)
            if region is None:
                raise ModuleFailureError(
                    f"scene does not provide input {image_var!r}")
            scene = _scene(scenes, region)
            if kind is ModuleKind.LOC:
                dist = modules.loc.outcome_distribution(
                    scene, region, stmt.lit_arg("object"), params)
            else:
                dist = modules.vqa.answer_distribution(
                    scene, region, stmt.lit_arg("question"), params)
            for v, p in zip(dist.support, dist.probs):
                p = float(p)
                if p == 0.0:
                    continue
                walk(i + 1, {**env, target: v}, weight * p)
            return
        if kind in CROP_KINDS:
            region = env[stmt.var_arg("image")]
            value = crop(region, env[stmt.var_arg("box")], kind.value)
        elif kind is ModuleKind.COUNT:
            value = count(env[stmt.var_arg("box")])
        elif kind is ModuleKind.EVAL:
            value = evaluate_concrete(_parse_eval_cached(stmt.lit_arg("expr")), env)
        else:  # RESULT
            value = env[stmt.var_arg("var")]
        env = {**env, target: value}
        walk(i + 1, env, weight)

    start_env: dict[str, Value] = {name: scene.whole_region(name)
                                   for name, scene in scenes.items()}
    walk(0, start_env, 1.0)
    support = sorted(acc, key=_value_key)
    return Categorical(support, [acc[v] for v in support])


# --- factors and variable elimination ----------------------------------------------


class Factor:
    """Probability table over a tuple of named variables, indexed by support."""

    __slots__ = ("scope", "table")

    def __init__(self, scope: tuple[str, ...], table: dict):
        self.scope = scope
        self.table = table  # assignment index tuple -> float | DiffScalar

    def __repr__(self) -> str:
        return f"Factor(scope={self.scope}, size={len(self.table)})"


def _check_cap(size: int, cap: int) -> None:
    if size > cap:
        raise SupportExplosionError(
            f"factor table of {size} entries exceeds cap {cap}")


def factor_product(a: Factor, b: Factor, sizes: Mapping[str, int],
                   cap: int = EXACT_SUPPORT_CAP) -> Factor:
    scope = a.scope + tuple(v for v in b.scope if v not in a.scope)
    _check_cap(math.prod(sizes[v] for v in scope) if scope else 1, cap)
    a_pos = [scope.index(v) for v in a.scope]
    b_pos = [scope.index(v) for v in b.scope]
    table = {}
    for combo in itertools.product(*(range(sizes[v]) for v in scope)):
        pa = a.table[tuple(combo[i] for i in a_pos)]
        pb = b.table[tuple(combo[i] for i in b_pos)]
        table[combo] = mixed_mul(pa, pb)
    return Factor(scope, table)


def factor_marginalize(f: Factor, var: str) -> Factor:
    pos = f.scope.index(var)
    scope = f.scope[:pos] + f.scope[pos + 1:]
    acc: dict = {}
    for combo, val in f.table.items():
        key = combo[:pos] + combo[pos + 1:]
        acc.setdefault(key, []).append(val)
    return Factor(scope, {k: mixed_sum(vs) for k, vs in acc.items()})


def elimination_order(factors: list[Factor],
                      keep: frozenset[str] | set[str] = frozenset()) -> list[str]:
    """Greedy min-degree order over the factor-graph adjacency.

    Ties break lexicographically; the result distribution does not depend on
    the order, only the intermediate table sizes do.
    """
    adj: dict[str, set[str]] = {}
    for f in factors:
        for v in f.scope:
            adj.setdefault(v, set())
            for u in f.scope:
                if u != v:
                    adj[v].add(u)
    remaining = set(adj) - set(keep)
    order = []
    while remaining:
        v = min(remaining, key=lambda u: (len(adj[u]), u))
        order.append(v)
        neighbors = adj.pop(v)
        for u in neighbors:
            adj[u].discard(v)
        live = [u for u in neighbors if u in adj]
        for x in live:
            for y in live:
                if x != y:
                    adj[x].add(y)
        remaining.discard(v)
    return order


def eliminate(factors: list[Factor], order: list[str],
              sizes: Mapping[str, int], cap: int = EXACT_SUPPORT_CAP) -> list[Factor]:
    """Sum out each variable in ``order``; returns the remaining factors."""
    work = list(factors)
    for var in order:
        touching = [f for f in work if var in f.scope]
        if not touching:
            continue
        work = [f for f in work if var not in f.scope]
        product = touching[0]
        for f in touching[1:]:
            product = factor_product(product, f, sizes, cap)
        work.append(factor_marginalize(product, var))
    return work


# --- exact inference ---------------------------------------------------------------


def _loc_vqa_factor(view: _ProgramView, stmt: Statement, modules: ModuleSet,
                    params, tape: Tape, supports: dict[str, list],
                    cap: int) -> Factor:
    """Conditional factor over (region ancestors..., target) for LOC/VQA."""
    image_var = stmt.var_arg("image")
    anc = view.region_ancestors(image_var)
    anc_supports = [supports[a] for a in anc]
    n_assign = math.prod(len(s) for s in anc_supports) if anc else 1
    conditionals: list[tuple[tuple[int, ...], Categorical]] = []
    for combo in itertools.product(*(range(len(s)) for s in anc_supports)):
        det_env = {a: anc_supports[k][i] for k, (a, i) in enumerate(zip(anc, combo))}
        region = view.resolve_region(image_var, det_env)
        scene = view.scene_of(region.image)
        if stmt.module is ModuleKind.LOC:
            dist = modules.loc.outcome_distribution(
                scene, region, stmt.lit_arg("object"), params, tape)
        else:
            dist = modules.vqa.answer_distribution(
                scene, region, stmt.lit_arg("question"), params, tape)
        conditionals.append((combo, dist))

    support: list = []
    seen = set()
    for _, dist in conditionals:
        for v in dist.support:
            if v not in seen:
                seen.add(v)
                support.append(v)
    _check_cap(n_assign * len(support), cap)
    supports[stmt.target] = support
    index = {v: i for i, v in enumerate(support)}
    table: dict = {}
    for combo, dist in conditionals:
        row: dict[int, object] = {index[v]: p for v, p in zip(dist.support, dist.probs)}
        for i in range(len(support)):
            table[combo + (i,)] = row.get(i, 0.0)
    return Factor(tuple(anc) + (stmt.target,), table)


def infer_exact(ast: ProgramAst, scenes: Mapping[str, Scene],
                modules: ModuleSet, params, tape: Tape | None = None,
                support_cap: int = EXACT_SUPPORT_CAP,
                interventions: Mapping[str, Value] | None = None,
                order: list[str] | None = None) -> Categorical:
    """Exact result distribution by variable elimination; differentiable."""
    if tape is None:
        tape = Tape()
    view = _ProgramView(ast, scenes)
    supports: dict[str, list] = {}
    factors: list[Factor] = []
    query = ast.result_var

    for stmt in ast.statements:
        target = stmt.target
        kind = stmt.module
        if kind in CROP_KINDS or kind is ModuleKind.RESULT:
            continue
        if interventions and target in interventions:
            supports[target] = [interventions[target]]
            factors.append(Factor((target,), {(0,): 1.0}))
            continue
        if kind is ModuleKind.LOC or kind is ModuleKind.VQA:
            factors.append(_loc_vqa_factor(view, stmt, modules, params, tape,
                                           supports, support_cap))
        elif kind is ModuleKind.COUNT:
            box = stmt.var_arg("box")
            box_support = supports[box]
            counts = sorted({len(d.cells) for d in box_support})
            supports[target] = counts
            index = {c: i for i, c in enumerate(counts)}
            table = {}
            for bi, det in enumerate(box_support):
                for ci in range(len(counts)):
                    table[(bi, ci)] = 1.0 if index[len(det.cells)] == ci else 0.0
            factors.append(Factor((box, target), table))
        elif kind is ModuleKind.EVAL:
            parsed = _parse_eval_cached(stmt.lit_arg("expr"))
            refs = placeholders(parsed)
            ref_supports = [supports[r] for r in refs]
            n_assign = math.prod(len(s) for s in ref_supports) if refs else 1
            _check_cap(n_assign, support_cap)
            outcomes: list[tuple[tuple[int, ...], Value]] = []
            support: list = []
            seen = set()
            for combo in itertools.product(*(range(len(s)) for s in ref_supports)):
                env = {r: ref_supports[k][i]
                       for k, (r, i) in enumerate(zip(refs, combo))}
                v = evaluate_concrete(parsed, env)
                outcomes.append((combo, v))
                if v not in seen:
                    seen.add(v)
                    support.append(v)
            _check_cap(n_assign * len(support), support_cap)
            supports[target] = support
            index = {v: i for i, v in enumerate(support)}
            table = {}
            for combo, v in outcomes:
                for i in range(len(support)):
                    table[combo + (i,)] = 1.0 if index[v] == i else 0.0
            factors.append(Factor(tuple(refs) + (target,), table))

    sizes = {v: len(s) for v, s in supports.items()}
    if order is None:
        order = elimination_order(factors, keep={query})
    else:
        if set(order) != set(sizes) - {query}:
            raise ValueError("custom elimination order must cover all non-result variables")
    remaining = eliminate(factors, order, sizes, support_cap)

    support = supports[query]
    probs: list = [1.0] * len(support)
    for f in remaining:
        if f.scope == (query,):
            probs = [mixed_mul(probs[i], f.table[(i,)]) for i in range(len(support))]
        elif f.scope == ():
            const = f.table[()]
            probs = [mixed_mul(p, const) for p in probs]
        else:
            raise AssertionError(f"unexpected residual factor over {f.scope}")
    return Categorical(support, probs)


# --- factorized (per-answer marginal) inference --------------------------------------


def infer_factorized(ast: ProgramAst, scenes: Mapping[str, Scene],
                     modules: ModuleSet, params, tape: Tape | None = None,
                     support_cap: int = EXACT_SUPPORT_CAP,
                     interventions: Mapping[str, Value] | None = None) -> Categorical:
    """Per-answer marginals combined under independence assumptions.

    Each stochastic variable's marginal sums over its own region ancestors;
    EVAL statements then combine referenced marginals as if independent. This
    matches ``infer_exact`` whenever ``detect_shared_latents`` is empty.
    """
    if tape is None:
        tape = Tape()
    view = _ProgramView(ast, scenes)
    marginals: dict[str, Categorical] = {}

    for stmt in ast.statements:
        target = stmt.target
        kind = stmt.module
        if kind in CROP_KINDS:
            continue
        if kind is ModuleKind.RESULT:
            return marginals[stmt.var_arg("var")]
        if interventions and target in interventions:
            marginals[target] = Categorical([interventions[target]], [1.0])
            continue
        if kind is ModuleKind.LOC or kind is ModuleKind.VQA:
            image_var = stmt.var_arg("image")
            anc = view.region_ancestors(image_var)
            anc_supports = [marginals[a].support for a in anc]
            n_assign = math.prod(len(s) for s in anc_supports) if anc else 1
            _check_cap(n_assign, support_cap)
            support: list = []
            seen = set()
            acc: dict[Value, list] = {}
            for combo in itertools.product(*(range(len(s)) for s in anc_supports)):
                det_env = {}
                weight = 1.0
                for k, (a, i) in enumerate(zip(anc, combo)):
                    det_env[a] = anc_supports[k][i]
                    weight = mixed_mul(weight, marginals[a].probs[i])
                region = view.resolve_region(image_var, det_env)
                scene = view.scene_of(region.image)
                if kind is ModuleKind.LOC:
                    dist = modules.loc.outcome_distribution(
                        scene, region, stmt.lit_arg("object"), params, tape)
                else:
                    dist = modules.vqa.answer_distribution(
                        scene, region, stmt.lit_arg("question"), params, tape)
                for v, p in zip(dist.support, dist.probs):
                    if v not in seen:
                        seen.add(v)
                        support.append(v)
                        acc[v] = []
                    acc[v].append(mixed_mul(weight, p))
            marginals[target] = Categorical(support,
                                            [mixed_sum(acc[v]) for v in support])
        elif kind is ModuleKind.COUNT:
            box_marginal = marginals[stmt.var_arg("box")]
            counts = sorted({len(d.cells) for d in box_marginal.support})
            acc = {c: [] for c in counts}
            for det, p in zip(box_marginal.support, box_marginal.probs):
                acc[len(det.cells)].append(p)
            marginals[target] = Categorical(list(counts),
                                            [mixed_sum(acc[c]) for c in counts])
        elif kind is ModuleKind.EVAL:
            parsed = _parse_eval_cached(stmt.lit_arg("expr"))
            marginals[target] = eval_distribution(parsed, marginals)
    raise AssertionError("program had no RESULT statement")


# --- dispatch -------------------------------------------------------------------------


def infer(mode: str, ast: ProgramAst, scenes: Mapping[str, Scene],
          modules: ModuleSet, params, tape: Tape | None = None,
          interventions: Mapping[str, Value] | None = None) -> Categorical:
    """Run one of the probabilistic modes (argmax has its own entry point)."""
    if mode == "exact":
        return infer_exact(ast, scenes, modules, params, tape,
                           interventions=interventions)
    if mode == "factorized":
        return infer_factorized(ast, scenes, modules, params, tape,
                                interventions=interventions)
    if mode == "brute":
        return brute_force(ast, scenes, modules, params,
                           interventions=interventions)
    raise ValueError(f"unknown inference mode {mode!r}")
