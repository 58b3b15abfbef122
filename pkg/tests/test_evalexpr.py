import itertools
import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from visprob import evalexpr as ev
from visprob.errors import (
    EvalSyntaxError,
    NonBooleanTruthyError,
    TypeMismatchError,
    UnboundVariableError,
)
from visprob.values import Categorical


def cat(d):
    return Categorical(list(d.keys()), list(d.values()))


class TestParse:
    def test_conditional(self):
        ast = ev.parse_eval("'yes' if {ANSWER0} != {ANSWER1} else 'no'")
        assert ast == ev.Conditional(
            ev.Compare("!=", ev.VarRef("ANSWER0"), ev.VarRef("ANSWER1")),
            ev.StrLit("yes"), ev.StrLit("no"))

    def test_comparison_root(self):
        assert ev.parse_eval("{ANSWER0} >= 7") == ev.Bool(
            ev.Compare(">=", ev.VarRef("ANSWER0"), ev.IntLit(7)))

    def test_double_not(self):
        assert ev.parse_eval("not not {ANSWER0}") == ev.Bool(
            ev.Not(ev.Not(ev.Truthy(ev.VarRef("ANSWER0")))))

    def test_sum_comparison(self):
        assert ev.parse_eval("{A} + {B} == 1") == ev.Bool(
            ev.Compare("==", ev.Add(ev.VarRef("A"), ev.VarRef("B")), ev.IntLit(1)))

    def test_and_binds_tighter_than_or(self):
        ast = ev.parse_eval("{A} or {B} and {C}")
        assert ast == ev.Bool(ev.Or(
            ev.Truthy(ev.VarRef("A")),
            ev.And(ev.Truthy(ev.VarRef("B")), ev.Truthy(ev.VarRef("C")))))

    def test_comparison_binds_tighter_than_not(self):
        ast = ev.parse_eval("not {A} == 2")
        assert ast == ev.Bool(ev.Not(
            ev.Compare("==", ev.VarRef("A"), ev.IntLit(2))))

    def test_parentheses_override(self):
        ast = ev.parse_eval("({A} or {B}) and {C}")
        assert ast == ev.Bool(ev.And(
            ev.Or(ev.Truthy(ev.VarRef("A")), ev.Truthy(ev.VarRef("B"))),
            ev.Truthy(ev.VarRef("C"))))

    def test_bare_value_root(self):
        assert ev.parse_eval("{ANSWER0}") == ev.Value(ev.VarRef("ANSWER0"))

    def test_conjunction_with_comparison(self):
        ast = ev.parse_eval("{A0} == 2 and {A2} and {A4}")
        assert ast == ev.Bool(ev.And(
            ev.And(ev.Compare("==", ev.VarRef("A0"), ev.IntLit(2)),
                   ev.Truthy(ev.VarRef("A2"))),
            ev.Truthy(ev.VarRef("A4"))))

    @pytest.mark.parametrize("bad", [
        "", "  ", "{A} +", "'unterminated", "{A} == == 2", "yes", "({A}",
        "{A} if {B}",
    ])
    def test_syntax_errors(self, bad):
        with pytest.raises(EvalSyntaxError):
            ev.parse_eval(bad)

    def test_string_addition_is_a_bind_time_type_error(self):
        ast = ev.parse_eval("2 + 'x' == 3")  # parses; types checked on use
        with pytest.raises(TypeMismatchError):
            ev.evaluate_concrete(ast, {})

    def test_placeholders_order(self):
        ast = ev.parse_eval("{B} + {A} == 1 and {B}")
        assert ev.placeholders(ast) == ["B", "A"]


class TestConcrete:
    def test_conditional_picks_branch(self):
        ast = ev.parse_eval("'yes' if {A} != {B} else 'no'")
        assert ev.evaluate_concrete(ast, {"A": "red", "B": "blue"}) == "yes"
        assert ev.evaluate_concrete(ast, {"A": "red", "B": "red"}) == "no"

    def test_bool_result_tokens(self):
        ast = ev.parse_eval("{A} >= 7")
        assert ev.evaluate_concrete(ast, {"A": 9}) == "True"
        assert ev.evaluate_concrete(ast, {"A": 2}) == "False"

    def test_chained_truthy_tokens(self):
        ast = ev.parse_eval("{A} xor {B}")
        assert ev.evaluate_concrete(ast, {"A": "True", "B": "no"}) == "True"

    def test_type_mismatch(self):
        ast = ev.parse_eval("{A} == 2")
        with pytest.raises(TypeMismatchError):
            ev.evaluate_concrete(ast, {"A": "many"})

    def test_string_ordering_is_type_error(self):
        ast = ev.parse_eval("{A} > {B}")
        with pytest.raises(TypeMismatchError):
            ev.evaluate_concrete(ast, {"A": "b", "B": "a"})

    def test_non_boolean_truthy(self):
        ast = ev.parse_eval("{A} and {B}")
        with pytest.raises(NonBooleanTruthyError):
            ev.evaluate_concrete(ast, {"A": "maybe", "B": "yes"})

    def test_unbound(self):
        with pytest.raises(UnboundVariableError):
            ev.evaluate_concrete(ev.parse_eval("{MISSING}"), {})


class TestAtomProb:
    def test_direct_mass_lookup(self):
        atom = ev.Compare("==", ev.VarRef("A0"), ev.IntLit(2))
        p = ev.atom_prob(atom, {"A0": cat({2: 0.7, 3: 0.3})})
        assert p.p_true == pytest.approx(0.7, abs=1e-12)

    def test_sum_atom_by_enumeration(self):
        # oracle: enumerate all four joint assignments by hand
        # (0,0)->0, (0,1)->1 ok, (1,0)->1 ok, (1,1)->2
        # P = 0.5*0.6 + 0.5*0.4 = 0.5
        atom = ev.Compare("==", ev.Add(ev.VarRef("A0"), ev.VarRef("A1")),
                          ev.IntLit(1))
        dists = {"A0": cat({0: 0.5, 1: 0.5}), "A1": cat({0: 0.4, 1: 0.6})}
        assert ev.atom_prob(atom, dists).p_true == pytest.approx(0.5, abs=1e-12)

    def test_inequality_of_two_colors(self):
        # oracle: 4 assignments, mismatched pairs have mass 0.8*0.2 + 0.2*0.8
        atom = ev.Compare("!=", ev.VarRef("A0"), ev.VarRef("A1"))
        d = {"A0": cat({"red": 0.8, "blue": 0.2}),
             "A1": cat({"red": 0.8, "blue": 0.2})}
        assert ev.atom_prob(atom, d).p_true == pytest.approx(0.32, abs=1e-12)

    def test_truthy_prob(self):
        atom = ev.Truthy(ev.VarRef("A"))
        p = ev.atom_prob(atom, {"A": cat({"yes": 0.3, "no": 0.7})})
        assert p.p_true == pytest.approx(0.3, abs=1e-12)

    def test_truthy_rejects_open_vocab(self):
        atom = ev.Truthy(ev.VarRef("A"))
        with pytest.raises(NonBooleanTruthyError):
            ev.atom_prob(atom, {"A": cat({"yes": 0.5, "maybe": 0.5})})

    def test_type_mismatch_at_bind(self):
        atom = ev.Compare("==", ev.VarRef("A"), ev.IntLit(1))
        with pytest.raises(TypeMismatchError):
            ev.atom_prob(atom, {"A": cat({"one": 1.0})})

    def test_joint_mode_matches_independent_on_factorized_joint(self, rng):
        atom = ev.Compare("!=", ev.VarRef("A"), ev.VarRef("B"))
        for _ in range(50):
            pa = [rng.random() for _ in range(3)]
            pb = [rng.random() for _ in range(2)]
            pa = [x / sum(pa) for x in pa]
            pb = [x / sum(pb) for x in pb]
            da = cat(dict(zip("xyz", pa)))
            db = cat(dict(zip("xw", pb)))
            joint = ev.JointTable(
                ("A", "B"),
                {(a, b): da.prob_of(a) * db.prob_of(b)
                 for a in da.support for b in db.support})
            independent = ev.atom_prob(atom, {"A": da, "B": db}).p_true
            joint_p = ev.atom_prob(atom, {}, joint=joint).p_true
            assert joint_p == pytest.approx(independent, abs=1e-12)

    def test_joint_mode_sees_correlation(self):
        atom = ev.Compare("==", ev.VarRef("A"), ev.VarRef("B"))
        joint = ev.JointTable(("A", "B"), {(0, 0): 0.5, (1, 1): 0.5,
                                           (0, 1): 0.0, (1, 0): 0.0})
        assert ev.atom_prob(atom, {}, joint=joint).p_true == pytest.approx(1.0)


class TestBoolProb:
    def test_not_complement(self):
        expr = ev.Not(ev.Truthy(ev.VarRef("A")))
        p = ev.bool_prob_from_dists(expr, {"A": cat({"yes": 0.3, "no": 0.7})})
        assert p.p_true == pytest.approx(0.7, abs=1e-12)

    def test_and_identity(self):
        a = ev.Truthy(ev.VarRef("A"))
        b = ev.Truthy(ev.VarRef("B"))
        for x in (0.0, 0.17, 0.5, 1.0):
            p = ev.bool_prob(ev.And(a, b), {a: ev.Bernoulli(1.0),
                                            b: ev.Bernoulli(x)})
            assert p.p_true == pytest.approx(x, abs=1e-12)

    def test_xor_formula(self):
        a = ev.Truthy(ev.VarRef("A"))
        b = ev.Truthy(ev.VarRef("B"))
        p = ev.bool_prob(ev.Xor(a, b), {a: ev.Bernoulli(0.2),
                                        b: ev.Bernoulli(0.7)})
        assert p.p_true == pytest.approx(0.62, abs=1e-12)

    def test_or_formula(self):
        a = ev.Truthy(ev.VarRef("A"))
        b = ev.Truthy(ev.VarRef("B"))
        p = ev.bool_prob(ev.Or(a, b), {a: ev.Bernoulli(0.25),
                                       b: ev.Bernoulli(0.5)})
        assert p.p_true == pytest.approx(1 - 0.75 * 0.5, abs=1e-12)


@settings(max_examples=500, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1))
def test_involution_de_morgan_commutativity(pa, pb):
    a = ev.Truthy(ev.VarRef("A"))
    b = ev.Truthy(ev.VarRef("B"))
    probs = {a: ev.Bernoulli(pa), b: ev.Bernoulli(pb)}

    double_not = ev.bool_prob(ev.Not(ev.Not(a)), probs).p_true
    assert double_not == pytest.approx(pa, abs=1e-12)

    lhs = ev.bool_prob(ev.Not(ev.And(a, b)), probs).p_true
    rhs = ev.bool_prob(ev.Or(ev.Not(a), ev.Not(b)), probs).p_true
    assert lhs == pytest.approx(rhs, abs=1e-12)

    for op in (ev.And, ev.Or, ev.Xor):
        assert ev.bool_prob(op(a, b), probs).p_true == pytest.approx(
            ev.bool_prob(op(b, a), probs).p_true, abs=1e-12)


class TestMixture:
    def test_degenerate_condition_returns_then(self):
        then = cat({"yes": 1.0})
        other = cat({"no": 1.0})
        mixed = ev.conditional_mixture(ev.Bernoulli(1.0), then, other)
        assert mixed.as_float_dict() == {"yes": 1.0, "no": 0.0}

    def test_symmetric_split(self):
        mixed = ev.conditional_mixture(ev.Bernoulli(0.5),
                                       cat({"yes": 1.0}), cat({"no": 1.0}))
        assert mixed.as_float_dict()["yes"] == pytest.approx(0.5)
        assert mixed.as_float_dict()["no"] == pytest.approx(0.5)

    def test_mixture_arithmetic(self):
        mixed = ev.conditional_mixture(ev.Bernoulli(0.69),
                                       cat({"no": 1.0}), cat({"yes": 1.0}))
        d = mixed.as_float_dict()
        assert d["no"] == pytest.approx(0.69, abs=1e-12)
        assert d["yes"] == pytest.approx(0.31, abs=1e-12)

    def test_mixture_over_overlapping_supports_sums_to_one(self, rng):
        for _ in range(100):
            sup_t = ["a", "b", "c"]
            sup_e = ["b", "c", "d"]
            pt = [rng.random() for _ in sup_t]
            pe = [rng.random() for _ in sup_e]
            then = Categorical(sup_t, [x / sum(pt) for x in pt])
            other = Categorical(sup_e, [x / sum(pe) for x in pe])
            mixed = ev.conditional_mixture(ev.Bernoulli(rng.random()), then, other)
            assert sum(mixed.as_float_dict().values()) == pytest.approx(1.0, abs=1e-9)


class TestDistribution:
    def test_bool_distribution_tokens(self):
        ast = ev.parse_eval("{A} >= 2")
        dist = ev.distribution(ast, {"A": cat({1: 0.25, 2: 0.25, 3: 0.5})})
        assert dist.as_float_dict() == pytest.approx({"True": 0.75, "False": 0.25})

    def test_value_passthrough(self):
        ast = ev.parse_eval("{A}")
        src = cat({"red": 0.6, "blue": 0.4})
        assert ev.distribution(ast, {"A": src}).as_float_dict() == src.as_float_dict()

    def test_sum_value_distribution(self):
        # pushforward of the sum of two independent counts
        ast = ev.parse_eval("{A} + {B}")
        dist = ev.distribution(ast, {"A": cat({0: 0.5, 1: 0.5}),
                                     "B": cat({0: 0.5, 1: 0.5})})
        assert dist.as_float_dict() == pytest.approx({0: 0.25, 1: 0.5, 2: 0.25})

    def test_paper_mode_treats_shared_atom_operands_independently(self):
        # OR of two atoms over the same variable: the combinator multiplies
        # complements even though the atoms are mutually exclusive
        ast = ev.parse_eval("{A} == 1 or {A} == 2")
        dist = ev.distribution(ast, {"A": cat({1: 0.3, 2: 0.3, 3: 0.4})})
        expected = 1 - (1 - 0.3) * (1 - 0.3)
        assert dist.as_float_dict()["True"] == pytest.approx(expected, abs=1e-12)
