"""EVAL mini-language: parsing, concrete evaluation, probabilistic semantics.

Grammar (ascending precedence)::

    root       := orexpr ('if' orexpr 'else' orexpr)?
    orexpr     := andexpr (('or' | 'xor') andexpr)*
    andexpr    := notexpr ('and' notexpr)*
    notexpr    := 'not' notexpr | comparison
    comparison := sum (('==' | '!=' | '>=' | '<=' | '>' | '<') sum)?
    sum        := primary ('+' primary)*
    primary    := INT | STRING | '{' IDENT '}' | '(' orexpr ')'

A bare variable in boolean position is a truthiness test over the closed
token set yes/no/True/False; anything else in its support is an error rather
than silently false. The probabilistic combinators implement the independent
product forms (NOT complement, AND product, OR complement-product, XOR
mix), applied even when composite operands share atoms; exact shared-atom
semantics live in the inference engine's joint enumeration.
"""

from __future__ import annotations

import itertools
import re
from dataclasses import dataclass
from typing import Mapping

from .autodiff import DiffScalar, mixed_mul, mixed_sum, num
from .errors import (
    EvalSyntaxError,
    NonBooleanTruthyError,
    TypeMismatchError,
    UnboundVariableError,
)
from .values import Categorical, union_support

# --- AST ----------------------------------------------------------------------


@dataclass(frozen=True)
class VarRef:
    name: str


@dataclass(frozen=True)
class IntLit:
    value: int


@dataclass(frozen=True)
class StrLit:
    value: str


@dataclass(frozen=True)
class Add:
    lhs: "ValueExpr"
    rhs: "ValueExpr"


ValueExpr = "VarRef | IntLit | StrLit | Add"


@dataclass(frozen=True)
class Compare:
    op: str  # ==, !=, >=, <=, >, <
    lhs: "ValueExpr"
    rhs: "ValueExpr"


@dataclass(frozen=True)
class Truthy:
    var: VarRef


@dataclass(frozen=True)
class Not:
    inner: "BoolExpr"


@dataclass(frozen=True)
class And:
    lhs: "BoolExpr"
    rhs: "BoolExpr"


@dataclass(frozen=True)
class Or:
    lhs: "BoolExpr"
    rhs: "BoolExpr"


@dataclass(frozen=True)
class Xor:
    lhs: "BoolExpr"
    rhs: "BoolExpr"


Atom = "Compare | Truthy"
BoolExpr = "Not | And | Or | Xor | Compare | Truthy"

_BOOL_NODES = (Not, And, Or, Xor, Compare, Truthy)
_VALUE_NODES = (VarRef, IntLit, StrLit, Add)


@dataclass(frozen=True)
class Conditional:
    cond: "BoolExpr"
    then: "ValueExpr"
    otherwise: "ValueExpr"


@dataclass(frozen=True)
class Bool:
    expr: "BoolExpr"


@dataclass(frozen=True)
class Value:
    expr: "ValueExpr"


EvalAst = "Conditional | Bool | Value"

TRUTHY_TOKENS = {"yes": True, "True": True, "no": False, "False": False}


# --- tokenizer ------------------------------------------------------------------

_TOKEN_RE = re.compile(r"""
    (?P<ws>\s+)
  | (?P<int>\d+)
  | (?P<var>\{[A-Za-z_][A-Za-z0-9_]*\})
  | (?P<word>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op>==|!=|>=|<=|>|<|\+|\(|\))
""", re.VERBOSE)

_KEYWORDS = {"if", "else", "not", "and", "or", "xor"}
_CMP_OPS = ("==", "!=", ">=", "<=", ">", "<")


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    n = len(text)
    while pos < n:
        ch = text[pos]
        if ch in "'\"":
            end = text.find(ch, pos + 1)
            if end < 0:
                raise EvalSyntaxError(f"unterminated string at position {pos}")
            tokens.append(("str", text[pos + 1:end], pos))
            pos = end + 1
            continue
        m = _TOKEN_RE.match(text, pos)
        if not m:
            raise EvalSyntaxError(f"unexpected character {ch!r} at position {pos}")
        kind = m.lastgroup
        pos = m.end()
        if kind == "ws":
            continue
        value = m.group(0)
        if kind == "word":
            if value not in _KEYWORDS:
                raise EvalSyntaxError(
                    f"bare word {value!r}; variables must be written {{NAME}}")
            tokens.append((value, value, m.start()))
        elif kind == "var":
            tokens.append(("var", value[1:-1], m.start()))
        else:
            tokens.append((kind, value, m.start()))
    tokens.append(("eof", "", n))
    return tokens


class _Parser:
    def __init__(self, tokens):
        self.tokens = tokens
        self.pos = 0

    def peek(self) -> str:
        return self.tokens[self.pos][0]

    def next(self):
        tok = self.tokens[self.pos]
        if tok[0] != "eof":
            self.pos += 1
        return tok

    def expect(self, kind: str):
        tok = self.next()
        if tok[0] != kind:
            raise EvalSyntaxError(f"expected {kind!r} at position {tok[2]}")
        return tok

    # precedence climbing, loosest first under the conditional

    def parse_or(self):
        node = self.parse_and()
        while self.peek() in ("or", "xor"):
            op = self.next()[0]
            rhs = self.parse_and()
            cls = Or if op == "or" else Xor
            node = cls(_as_bool(node), _as_bool(rhs))
        return node

    def parse_and(self):
        node = self.parse_not()
        while self.peek() == "and":
            self.next()
            rhs = self.parse_not()
            node = And(_as_bool(node), _as_bool(rhs))
        return node

    def parse_not(self):
        if self.peek() == "not":
            self.next()
            return Not(_as_bool(self.parse_not()))
        return self.parse_comparison()

    def parse_comparison(self):
        lhs = self.parse_sum()
        if self.peek() == "op" and self.tokens[self.pos][1] in _CMP_OPS:
            op = self.next()[1]
            rhs = self.parse_sum()
            return Compare(op, _as_value(lhs), _as_value(rhs))
        return lhs

    def parse_sum(self):
        node = self.parse_primary()
        while self.peek() == "op" and self.tokens[self.pos][1] == "+":
            self.next()
            rhs = self.parse_primary()
            node = Add(_as_value(node), _as_value(rhs))
        return node

    def parse_primary(self):
        kind, value, pos = self.next()
        if kind == "int":
            return IntLit(int(value))
        if kind == "str":
            return StrLit(value)
        if kind == "var":
            return VarRef(value)
        if kind == "op" and value == "(":
            node = self.parse_or()
            tok = self.next()
            if tok[0] != "op" or tok[1] != ")":
                raise EvalSyntaxError(f"expected ')' at position {tok[2]}")
            return node
        raise EvalSyntaxError(f"unexpected token {value!r} at position {pos}")


def _as_bool(node):
    if isinstance(node, _BOOL_NODES):
        return node
    if isinstance(node, VarRef):
        return Truthy(node)
    raise EvalSyntaxError(f"value expression {node!r} used where a boolean is required")


def _as_value(node):
    if isinstance(node, _VALUE_NODES):
        return node
    raise EvalSyntaxError(f"boolean expression {node!r} used where a value is required")


def parse_eval(text: str):
    """Parse an EVAL expression into Conditional / Bool / Value."""
    if not text.strip():
        raise EvalSyntaxError("empty EVAL expression")
    parser = _Parser(_tokenize(text))
    first = parser.parse_or()
    if parser.peek() == "if":
        parser.next()
        cond = parser.parse_or()
        parser.expect("else")
        otherwise = parser.parse_or()
        result = Conditional(_as_bool(cond), _as_value(first), _as_value(otherwise))
    elif isinstance(first, _BOOL_NODES):
        result = Bool(first)
    else:
        result = Value(first)
    tok = parser.next()
    if tok[0] != "eof":
        raise EvalSyntaxError(f"trailing input at position {tok[2]}")
    return result


# --- traversal helpers ----------------------------------------------------------


def _walk_vars(node, out: dict):
    if isinstance(node, VarRef):
        out.setdefault(node.name, None)
    elif isinstance(node, Truthy):
        out.setdefault(node.var.name, None)
    elif isinstance(node, (IntLit, StrLit)):
        pass
    elif isinstance(node, Add):
        _walk_vars(node.lhs, out)
        _walk_vars(node.rhs, out)
    elif isinstance(node, Compare):
        _walk_vars(node.lhs, out)
        _walk_vars(node.rhs, out)
    elif isinstance(node, Not):
        _walk_vars(node.inner, out)
    elif isinstance(node, (And, Or, Xor)):
        _walk_vars(node.lhs, out)
        _walk_vars(node.rhs, out)
    elif isinstance(node, Conditional):
        _walk_vars(node.cond, out)
        _walk_vars(node.then, out)
        _walk_vars(node.otherwise, out)
    elif isinstance(node, (Bool, Value)):
        _walk_vars(node.expr, out)
    else:
        raise TypeError(f"unknown node {node!r}")


def placeholders(ast) -> list[str]:
    """Referenced variable names in first-occurrence order."""
    out: dict = {}
    _walk_vars(ast, out)
    return list(out)


def collect_atoms(expr) -> list:
    """Atoms of a boolean expression in first-occurrence order."""
    out: dict = {}

    def walk(node):
        if isinstance(node, (Compare, Truthy)):
            out.setdefault(node, None)
        elif isinstance(node, Not):
            walk(node.inner)
        elif isinstance(node, (And, Or, Xor)):
            walk(node.lhs)
            walk(node.rhs)
        else:
            raise TypeError(f"not a boolean node: {node!r}")

    walk(expr)
    return list(out)


# --- concrete evaluation ---------------------------------------------------------


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _compare_values(op: str, a, b):
    if _is_int(a) and _is_int(b):
        pass
    elif isinstance(a, str) and isinstance(b, str):
        if op not in ("==", "!="):
            raise TypeMismatchError(f"ordering comparison {op!r} on strings")
    else:
        raise TypeMismatchError(f"cannot compare {a!r} with {b!r}")
    if op == "==":
        return a == b
    if op == "!=":
        return a != b
    if op == ">=":
        return a >= b
    if op == "<=":
        return a <= b
    if op == ">":
        return a > b
    return a < b


def _truthy_value(v) -> bool:
    if isinstance(v, str) and v in TRUTHY_TOKENS:
        return TRUTHY_TOKENS[v]
    raise NonBooleanTruthyError(f"{v!r} is not a yes/no/True/False token")


def eval_value(expr, env: Mapping):
    if isinstance(expr, VarRef):
        if expr.name not in env:
            raise UnboundVariableError(f"variable {expr.name!r} is not bound")
        return env[expr.name]
    if isinstance(expr, IntLit):
        return expr.value
    if isinstance(expr, StrLit):
        return expr.value
    if isinstance(expr, Add):
        a = eval_value(expr.lhs, env)
        b = eval_value(expr.rhs, env)
        if not (_is_int(a) and _is_int(b)):
            raise TypeMismatchError(f"'+' needs integers, got {a!r} and {b!r}")
        return a + b
    raise TypeError(f"not a value node: {expr!r}")


def eval_bool(expr, env: Mapping) -> bool:
    if isinstance(expr, Compare):
        return _compare_values(expr.op, eval_value(expr.lhs, env),
                               eval_value(expr.rhs, env))
    if isinstance(expr, Truthy):
        return _truthy_value(eval_value(expr.var, env))
    if isinstance(expr, Not):
        return not eval_bool(expr.inner, env)
    if isinstance(expr, And):
        return eval_bool(expr.lhs, env) and eval_bool(expr.rhs, env)
    if isinstance(expr, Or):
        return eval_bool(expr.lhs, env) or eval_bool(expr.rhs, env)
    if isinstance(expr, Xor):
        return eval_bool(expr.lhs, env) != eval_bool(expr.rhs, env)
    raise TypeError(f"not a boolean node: {expr!r}")


def evaluate_concrete(ast, env: Mapping):
    """Evaluate with every variable bound to a single value.

    Boolean results come back as the tokens 'True' / 'False' so they can feed
    truthiness tests in downstream EVAL statements and match dataset labels.
    """
    if isinstance(ast, Conditional):
        branch = ast.then if eval_bool(ast.cond, env) else ast.otherwise
        return eval_value(branch, env)
    if isinstance(ast, Bool):
        return "True" if eval_bool(ast.expr, env) else "False"
    if isinstance(ast, Value):
        return eval_value(ast.expr, env)
    raise TypeError(f"not an EVAL root: {ast!r}")


# --- probabilistic semantics -----------------------------------------------------


@dataclass
class Bernoulli:
    """P(true) for one boolean expression; may be a differentiable scalar."""

    p_true: object

    def __post_init__(self):
        v = num(self.p_true)
        if not (-1e-12 <= v <= 1.0 + 1e-12):
            raise ValueError(f"p_true {v} outside [0, 1]")

    @property
    def p_false(self):
        return 1.0 - self.p_true


@dataclass
class JointTable:
    """Explicit joint distribution over named variables (for atom_prob)."""

    vars: tuple[str, ...]
    entries: dict  # assignment tuple -> probability

    def support_of(self, name: str) -> list:
        i = self.vars.index(name)
        seen: dict = {}
        for key in self.entries:
            seen.setdefault(key[i], None)
        return list(seen)


def _support_kind(values) -> str:
    kinds = set()
    for v in values:
        if _is_int(v):
            kinds.add("int")
        elif isinstance(v, str):
            kinds.add("str")
        else:
            kinds.add("other")
    return kinds.pop() if len(kinds) == 1 else "mixed"


def _value_expr_kind(expr, supports: Mapping[str, list]) -> str:
    if isinstance(expr, IntLit):
        return "int"
    if isinstance(expr, StrLit):
        return "str"
    if isinstance(expr, VarRef):
        if expr.name not in supports:
            raise UnboundVariableError(f"variable {expr.name!r} is not bound")
        return _support_kind(supports[expr.name])
    if isinstance(expr, Add):
        lk = _value_expr_kind(expr.lhs, supports)
        rk = _value_expr_kind(expr.rhs, supports)
        if lk != "int" or rk != "int":
            raise TypeMismatchError("'+' needs integer-valued operands")
        return "int"
    raise TypeError(f"not a value node: {expr!r}")


def _check_atom_types(atom, supports: Mapping[str, list]) -> None:
    if isinstance(atom, Truthy):
        name = atom.var.name
        if name not in supports:
            raise UnboundVariableError(f"variable {name!r} is not bound")
        bad = [v for v in supports[name]
               if not (isinstance(v, str) and v in TRUTHY_TOKENS)]
        if bad:
            raise NonBooleanTruthyError(
                f"truthiness of {name!r} undefined for value(s) {bad!r}")
        return
    lk = _value_expr_kind(atom.lhs, supports)
    rk = _value_expr_kind(atom.rhs, supports)
    if lk != rk or lk == "mixed" or lk == "other":
        raise TypeMismatchError(
            f"comparison {atom.op!r} between {lk} and {rk} operands")
    if lk == "str" and atom.op not in ("==", "!="):
        raise TypeMismatchError(f"ordering comparison {atom.op!r} on strings")


def atom_prob(atom, dists: Mapping[str, Categorical],
              joint: JointTable | None = None) -> Bernoulli:
    """P(atom is true) under independent marginals or a supplied joint."""
    out: dict = {}
    _walk_vars(atom, out)
    names = list(out)
    if joint is not None:
        missing = [n for n in names if n not in joint.vars]
        if missing:
            raise UnboundVariableError(f"joint table lacks variable(s) {missing}")
        supports = {n: joint.support_of(n) for n in names}
        _check_atom_types(atom, supports)
        masses = []
        for key, p in joint.entries.items():
            env = dict(zip(joint.vars, key))
            if eval_bool(atom, env):
                masses.append(p)
        return Bernoulli(mixed_sum(masses))

    supports = {}
    for n in names:
        if n not in dists:
            raise UnboundVariableError(f"variable {n!r} is not bound")
        supports[n] = dists[n].support
    _check_atom_types(atom, supports)
    masses = []
    for combo in itertools.product(*(range(len(supports[n])) for n in names)):
        env = {n: supports[n][i] for n, i in zip(names, combo)}
        if eval_bool(atom, env):
            w = 1.0
            for n, i in zip(names, combo):
                w = mixed_mul(w, dists[n].probs[i])
            masses.append(w)
    return Bernoulli(mixed_sum(masses))


def bool_prob(expr, atom_probs: Mapping) -> Bernoulli:
    """Combine resolved atom probabilities with the independent-product forms."""
    if isinstance(expr, (Compare, Truthy)):
        return atom_probs[expr]
    if isinstance(expr, Not):
        return Bernoulli(1.0 - bool_prob(expr.inner, atom_probs).p_true)
    a = bool_prob(expr.lhs, atom_probs).p_true
    b = bool_prob(expr.rhs, atom_probs).p_true
    if isinstance(expr, And):
        return Bernoulli(mixed_mul(a, b))
    if isinstance(expr, Or):
        return Bernoulli(1.0 - mixed_mul(1.0 - a, 1.0 - b))
    if isinstance(expr, Xor):
        return Bernoulli(mixed_sum([mixed_mul(a, 1.0 - b), mixed_mul(1.0 - a, b)]))
    raise TypeError(f"not a boolean node: {expr!r}")


def bool_prob_from_dists(expr, dists: Mapping[str, Categorical]) -> Bernoulli:
    atoms = {atom: atom_prob(atom, dists) for atom in collect_atoms(expr)}
    return bool_prob(expr, atoms)


def conditional_mixture(cond: Bernoulli, then_dist: Categorical,
                        else_dist: Categorical) -> Categorical:
    """p*then + (1-p)*else over the union support."""
    support = union_support([then_dist.support, else_dist.support])
    p = cond.p_true
    q = 1.0 - p
    probs = []
    for v in support:
        probs.append(mixed_sum([mixed_mul(p, then_dist.prob_of(v)),
                                mixed_mul(q, else_dist.prob_of(v))]))
    return Categorical(support, probs)


def value_distribution(expr, dists: Mapping[str, Categorical]) -> Categorical:
    if isinstance(expr, VarRef):
        if expr.name not in dists:
            raise UnboundVariableError(f"variable {expr.name!r} is not bound")
        src = dists[expr.name]
        return Categorical(src.support, src.probs, validate=False)
    if isinstance(expr, (IntLit, StrLit)):
        return Categorical([expr.value], [1.0], validate=False)
    if isinstance(expr, Add):
        names = placeholders(Value(expr))
        supports = {}
        for n in names:
            if n not in dists:
                raise UnboundVariableError(f"variable {n!r} is not bound")
            supports[n] = dists[n].support
        acc: dict = {}
        for combo in itertools.product(*(range(len(supports[n])) for n in names)):
            env = {n: supports[n][i] for n, i in zip(names, combo)}
            v = eval_value(expr, env)
            w = 1.0
            for n, i in zip(names, combo):
                w = mixed_mul(w, dists[n].probs[i])
            acc.setdefault(v, []).append(w)
        support = list(acc)
        return Categorical(support, [mixed_sum(acc[v]) for v in support])
    raise TypeError(f"not a value node: {expr!r}")


def distribution(ast, dists: Mapping[str, Categorical]) -> Categorical:
    """Answer distribution of an EVAL under independent sub-answer marginals."""
    if isinstance(ast, Value):
        return value_distribution(ast.expr, dists)
    if isinstance(ast, Bool):
        p = bool_prob_from_dists(ast.expr, dists).p_true
        return Categorical(["True", "False"], [p, 1.0 - p])
    if isinstance(ast, Conditional):
        cond = bool_prob_from_dists(ast.cond, dists)
        return conditional_mixture(cond,
                                   value_distribution(ast.then, dists),
                                   value_distribution(ast.otherwise, dists))
    raise TypeError(f"not an EVAL root: {ast!r}")
