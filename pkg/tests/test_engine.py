import itertools
import math
import random

import pytest

from visprob import dsl
from visprob.autodiff import Tape
from visprob.engine import (
    Factor,
    brute_force,
    elimination_order,
    eliminate,
    execute_argmax,
    factor_marginalize,
    factor_product,
    infer_exact,
    infer_factorized,
    run_symbolic,
)
from visprob.errors import ModuleFailureError, SupportExplosionError
from visprob.modules import build_toy_modules, init_params
from visprob.scene import Scene, SceneObject
from visprob.seeding import derive_seed
from visprob.values import Categorical, Detection, Region
from visprob import world

from conftest import (
    SHARED_LATENT_PROGRAM,
    TWO_BRANCH_PROGRAM,
    FixedLoc,
    RegionKeyedVqa,
    stub_modules,
)

ONE_BRANCH = """BOX0=LOC(image=IMAGE,object='post')
IMAGE0=CROP(image=IMAGE,box=BOX0)
ANSWER0=VQA(image=IMAGE0,question='Is the post red?')
FINAL_RESULT=RESULT(var=ANSWER0)"""

AND_SHARED = """BOX0=LOC(image=IMAGE,object='post')
IMAGE0=CROP(image=IMAGE,box=BOX0)
ANSWER0=VQA(image=IMAGE0,question='q')
ANSWER1=VQA(image=IMAGE0,question='q')
ANSWER2=EVAL(expr='{ANSWER0} and {ANSWER1}')
FINAL_RESULT=RESULT(var=ANSWER2)"""


def empty_scene(rows=1, cols=2):
    return {"IMAGE": Scene(rows, cols, ())}


class TestArgmaxExecutor:
    def test_untrained_ranking_drives_wrong_answer(self):
        # sub-answer ranked no=0.69 > yes=0.30 makes the final answer 'no'
        scenes = empty_scene()
        loc = FixedLoc([((0, 0),)], [1.0])
        vqa = RegionKeyedVqa({(0, 0, 0, 0): (["no", "yes"], [0.69, 0.30 + 0.01])})
        ast = dsl.parse_program(ONE_BRANCH)
        assert execute_argmax(ast, scenes, stub_modules(loc, vqa), None) == "no"

    def test_trained_ranking_flips_answer(self):
        scenes = empty_scene()
        loc = FixedLoc([((0, 0),)], [1.0])
        vqa = RegionKeyedVqa({(0, 0, 0, 0): (["no", "yes"], [0.01, 0.99])})
        ast = dsl.parse_program(ONE_BRANCH)
        assert execute_argmax(ast, scenes, stub_modules(loc, vqa), None) == "yes"

    def test_one_hot_equals_symbolic(self):
        scenes = empty_scene()
        det = ((0, 1),)
        loc = FixedLoc([det], [1.0])
        vqa = RegionKeyedVqa({(0, 1, 0, 1): (["yes", "no"], [0.0, 1.0])})
        ast = dsl.parse_program(ONE_BRANCH)
        by_argmax = execute_argmax(ast, scenes, stub_modules(loc, vqa), None)
        env = run_symbolic(ast, scenes,
                           lambda s, r, o: Detection("IMAGE", det),
                           lambda s, r, q: "no")
        assert by_argmax == env["FINAL_RESULT"] == "no"

    def test_missing_input_is_module_failure(self):
        ast = dsl.parse_program("ANSWER0=VQA(image=LEFT,question='q')\n"
                                "FINAL_ANSWER=RESULT(var=ANSWER0)")
        vqa = RegionKeyedVqa({}, default=(["yes"], [1.0]))
        with pytest.raises(ModuleFailureError):
            execute_argmax(ast, empty_scene(), stub_modules(FixedLoc([], []), vqa), None)


class TestMarginalization:
    def fixture_modules(self):
        # LOC over two single-box outcomes (0.6, 0.4); VQA yes-prob 0.9 / 0.2
        loc = FixedLoc([((0, 0),), ((0, 1),)], [0.6, 0.4])
        vqa = RegionKeyedVqa({
            (0, 0, 0, 0): (["yes", "no"], [0.9, 0.1]),
            (0, 1, 0, 1): (["yes", "no"], [0.2, 0.8]),
        })
        return stub_modules(loc, vqa)

    def test_factorized_matches_hand_sum(self):
        # 0.6*0.9 + 0.4*0.2 = 0.62
        ast = dsl.parse_program(ONE_BRANCH)
        dist = infer_factorized(ast, empty_scene(), self.fixture_modules(), None)
        assert dist.as_float_dict()["yes"] == pytest.approx(0.62, abs=1e-12)

    def test_brute_force_same_fixture(self):
        ast = dsl.parse_program(ONE_BRANCH)
        dist = brute_force(ast, empty_scene(), self.fixture_modules(), None)
        assert dist.as_float_dict() == pytest.approx({"yes": 0.62, "no": 0.38})

    def test_exact_same_fixture(self):
        ast = dsl.parse_program(ONE_BRANCH)
        dist = infer_exact(ast, empty_scene(), self.fixture_modules(), None)
        assert dist.as_float_dict()["yes"] == pytest.approx(0.62, abs=1e-12)

    def test_one_hot_detection_collapses_to_vqa(self):
        loc = FixedLoc([((0, 1),)], [1.0])
        vqa = RegionKeyedVqa({(0, 1, 0, 1): (["yes", "no"], [0.2, 0.8])})
        ast = dsl.parse_program(ONE_BRANCH)
        dist = infer_factorized(ast, empty_scene(), stub_modules(loc, vqa), None)
        assert dist.as_float_dict() == pytest.approx({"yes": 0.2, "no": 0.8})

    def test_two_branch_inequality_matches_pairwise_sum(self):
        # P(yes) must equal the sum over color pairs with c0 != c1
        colors = ["red", "blue", "green"]
        p0 = [0.5, 0.3, 0.2]
        p1 = [0.1, 0.6, 0.3]
        loc = FixedLoc([((0, 0),)], [1.0])

        class TwoQuestionVqa:
            def answer_distribution(self, scene, region, question, params, tape=None):
                probs = p0 if "post" in question else p1
                if tape is not None:
                    return Categorical(list(colors), [tape.constant(p) for p in probs])
                return Categorical(list(colors), list(probs))

        ast = dsl.parse_program(TWO_BRANCH_PROGRAM)
        modules = stub_modules(loc, TwoQuestionVqa())
        dist = infer_factorized(ast, empty_scene(), modules, None)
        expected = sum(a * b for (i, a), (j, b) in
                       itertools.product(enumerate(p0), enumerate(p1)) if i != j)
        assert dist.as_float_dict()["yes"] == pytest.approx(expected, abs=1e-12)
        exact = infer_exact(ast, empty_scene(), modules, None)
        assert exact.max_abs_diff(dist) < 1e-12


class TestSharedLatent:
    def shared_modules(self):
        loc = FixedLoc([((0, 0),), ((0, 1),)], [0.5, 0.5])
        vqa = RegionKeyedVqa({
            (0, 0, 0, 0): (["yes", "no"], [1.0, 0.0]),
            (0, 1, 0, 1): (["yes", "no"], [0.0, 1.0]),
        })
        return stub_modules(loc, vqa)

    def test_exact_half_vs_factorized_quarter(self):
        ast = dsl.parse_program(AND_SHARED)
        modules = self.shared_modules()
        exact = infer_exact(ast, empty_scene(), modules, None)
        factorized = infer_factorized(ast, empty_scene(), modules, None)
        assert exact.as_float_dict()["True"] == pytest.approx(0.5, abs=0)
        assert factorized.as_float_dict()["True"] == pytest.approx(0.25, abs=0)
        brute = brute_force(ast, empty_scene(), modules, None)
        assert exact.max_abs_diff(brute) == 0.0

    def test_detector_flags_it(self):
        assert dsl.detect_shared_latents(dsl.parse_program(AND_SHARED)) != []


class TestCorpusOracle:
    def test_exact_equals_brute_on_generated_corpus(self, small_world_config):
        config = small_world_config
        modules = build_toy_modules(config.vocab, config.pool_size)
        cases = world.gen_dataset(41, 60, config)
        worst = 0.0
        for i, case in enumerate(cases):
            params = init_params(config.vocab, seed=derive_seed(41, "p", i),
                                 scale=0.5)
            ast = dsl.parse_program(case.program_text)
            exact = infer_exact(ast, case.scenes, modules, params)
            brute = brute_force(ast, case.scenes, modules, params)
            worst = max(worst, exact.max_abs_diff(brute))
            total = sum(exact.as_float_dict().values())
            assert total == pytest.approx(1.0, abs=1e-9)
        assert worst < 1e-9

    def test_factorized_equals_exact_when_no_shared_latents(self, small_world_config):
        config = small_world_config
        modules = build_toy_modules(config.vocab, config.pool_size)
        cases = world.gen_dataset(42, 60, config)
        checked = 0
        for i, case in enumerate(cases):
            ast = dsl.parse_program(case.program_text)
            if dsl.detect_shared_latents(ast):
                continue
            params = init_params(config.vocab, seed=derive_seed(42, "p", i),
                                 scale=0.5)
            exact = infer_exact(ast, case.scenes, modules, params)
            factorized = infer_factorized(ast, case.scenes, modules, params)
            assert exact.max_abs_diff(factorized) < 1e-9
            checked += 1
        assert checked > 20

    def test_argmax_consistency_under_one_hot_modules(self, small_world_config):
        # saturated logits make every module distribution effectively one-hot
        config = small_world_config
        modules = build_toy_modules(config.vocab, config.pool_size)
        cases = world.gen_dataset(43, 30, config)
        for i, case in enumerate(cases):
            params = init_params(config.vocab, seed=derive_seed(43, "p", i),
                                 scale=60.0)
            ast = dsl.parse_program(case.program_text)
            exact = infer_exact(ast, case.scenes, modules, params)
            top = execute_argmax(ast, case.scenes, modules, params)
            assert exact.argmax() == top
            assert max(exact.as_float_dict().values()) == pytest.approx(1.0, abs=1e-6)


class TestInterventions:
    def test_conditioning_matches_direct_substitution(self):
        ast = dsl.parse_program(ONE_BRANCH)
        loc = FixedLoc([((0, 0),), ((0, 1),)], [0.6, 0.4])
        vqa = RegionKeyedVqa({
            (0, 0, 0, 0): (["yes", "no"], [0.9, 0.1]),
            (0, 1, 0, 1): (["yes", "no"], [0.2, 0.8]),
        })
        modules = stub_modules(loc, vqa)
        scenes = empty_scene()
        for cells, yes_prob in [(((0, 0),), 0.9), (((0, 1),), 0.2)]:
            forced = {"BOX0": Detection("IMAGE", cells)}
            exact = infer_exact(ast, scenes, modules, None, interventions=forced)
            factorized = infer_factorized(ast, scenes, modules, None,
                                          interventions=forced)
            brute = brute_force(ast, scenes, modules, None, interventions=forced)
            for dist in (exact, factorized, brute):
                assert dist.as_float_dict()["yes"] == pytest.approx(yes_prob,
                                                                    abs=1e-12)


class TestEliminationOrder:
    def chain_factors(self):
        sizes = {"A": 2, "B": 2, "C": 2}
        fa = Factor(("A",), {(0,): 0.3, (1,): 0.7})
        fab = Factor(("A", "B"), {(0, 0): 0.9, (0, 1): 0.1,
                                  (1, 0): 0.4, (1, 1): 0.6})
        fbc = Factor(("B", "C"), {(0, 0): 0.2, (0, 1): 0.8,
                                  (1, 0): 0.5, (1, 1): 0.5})
        return [fa, fab, fbc], sizes

    def test_chain_order_walks_from_the_far_end(self):
        factors, _ = self.chain_factors()
        assert elimination_order(factors, keep={"C"}) == ["A", "B"]

    def test_any_order_gives_identical_marginal(self):
        factors, sizes = self.chain_factors()
        results = []
        for order in itertools.permutations(["A", "B"]):
            remaining = eliminate(factors, list(order), sizes)
            product = remaining[0]
            for f in remaining[1:]:
                product = factor_product(product, f, sizes)
            results.append([product.table[(i,)] for i in range(2)])
        for r in results[1:]:
            assert r == pytest.approx(results[0], abs=1e-12)

    def test_engine_result_is_order_invariant(self, small_world_config):
        config = small_world_config
        modules = build_toy_modules(config.vocab, config.pool_size)
        case = world.gen_case(derive_seed(5, "case"), config,
                              template_pool=[world.template_by_id("attr-compare")])
        params = init_params(config.vocab, seed=8, scale=0.5)
        ast = dsl.parse_program(case.program_text)
        base = infer_exact(ast, case.scenes, modules, params)
        latents = [v for v in ("BOX0", "BOX1", "ANSWER0", "ANSWER1")]
        for perm in itertools.permutations(latents):
            dist = infer_exact(ast, case.scenes, modules, params,
                               order=list(perm))
            assert dist.max_abs_diff(base) < 1e-12

    def test_disconnected_groups(self):
        sizes = {"A": 2, "B": 2}
        fa = Factor(("A",), {(0,): 0.5, (1,): 0.5})
        fb = Factor(("B",), {(0,): 0.25, (1,): 0.75})
        order = elimination_order([fa, fb], keep=set())
        assert order == ["A", "B"]
        remaining = eliminate([fa, fb], order, sizes)
        assert all(f.scope == () for f in remaining)
        assert math.prod(f.table[()] for f in remaining) == pytest.approx(1.0)


class TestSupportCaps:
    def test_exact_cap(self):
        ast = dsl.parse_program(ONE_BRANCH)
        loc = FixedLoc([((0, 0),), ((0, 1),)], [0.5, 0.5])
        vqa = RegionKeyedVqa({}, default=(["yes", "no"], [0.5, 0.5]))
        with pytest.raises(SupportExplosionError):
            infer_exact(ast, empty_scene(), stub_modules(loc, vqa), None,
                        support_cap=2)

    def test_brute_cap(self):
        ast = dsl.parse_program(TWO_BRANCH_PROGRAM)
        loc = FixedLoc([((0, 0),), ((0, 1),)], [0.5, 0.5])
        vqa = RegionKeyedVqa({}, default=(["a", "b", "c"], [0.4, 0.3, 0.3]))
        with pytest.raises(SupportExplosionError):
            brute_force(ast, empty_scene(), stub_modules(loc, vqa), None,
                        support_cap=8)


class TestFactorAlgebra:
    def test_product_covers_cross_product(self):
        sizes = {"A": 2, "B": 3}
        fa = Factor(("A",), {(0,): 0.5, (1,): 0.5})
        fb = Factor(("B",), {(0,): 0.2, (1,): 0.3, (2,): 0.5})
        prod = factor_product(fa, fb, sizes)
        assert set(prod.table) == set(itertools.product(range(2), range(3)))
        assert prod.table[(1, 2)] == pytest.approx(0.25)

    def test_marginalize_sums_out(self):
        f = Factor(("A", "B"), {(0, 0): 0.1, (0, 1): 0.2,
                                (1, 0): 0.3, (1, 1): 0.4})
        m = factor_marginalize(f, "A")
        assert m.scope == ("B",)
        assert m.table[(0,)] == pytest.approx(0.4)
        assert m.table[(1,)] == pytest.approx(0.6)

    def test_normalization_preserved_through_elimination(self, rng):
        for _ in range(25):
            pa = rng.random()
            sizes = {"A": 2, "B": 2}
            fa = Factor(("A",), {(0,): pa, (1,): 1 - pa})
            rows = [rng.random() for _ in range(2)]
            fab = Factor(("A", "B"), {(0, 0): rows[0], (0, 1): 1 - rows[0],
                                      (1, 0): rows[1], (1, 1): 1 - rows[1]})
            remaining = eliminate([fa, fab], ["A"], sizes)
            total = sum(remaining[0].table[(i,)] for i in range(2))
            assert total == pytest.approx(1.0, abs=1e-12)


class TestDifferentiability:
    def test_exact_probs_are_tape_scalars_with_param_grads(self, world_config):
        config = world_config
        modules = build_toy_modules(config.vocab, config.pool_size)
        case = world.gen_case(derive_seed(77, "case"), config,
                              template_pool=[world.template_by_id("material-check")])
        params = init_params(config.vocab, seed=3, scale=0.5)
        tape = Tape()
        ast = dsl.parse_program(case.program_text)
        dist = infer_exact(ast, case.scenes, modules, params, tape)
        grads = tape.backward(dist.probs[0], params)
        assert any(abs(g).sum() > 0 for g in grads.values())

    def test_gradient_of_total_mass_is_zero(self, world_config):
        config = world_config
        modules = build_toy_modules(config.vocab, config.pool_size)
        case = world.gen_case(derive_seed(78, "case"), config,
                              template_pool=[world.template_by_id("attr-compare")])
        params = init_params(config.vocab, seed=4, scale=0.5)
        tape = Tape()
        ast = dsl.parse_program(case.program_text)
        dist = infer_exact(ast, case.scenes, modules, params, tape)
        total = tape.sum(dist.probs)
        grads = tape.backward(total, params)
        for g in grads.values():
            assert abs(g).max() < 1e-9
