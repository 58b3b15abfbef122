"""Visual-program DSL: lexing, parsing, validation, and printing.

Statement grammar, one statement per line::

    IDENT '=' MODULE '(' key '=' value (',' key '=' value)* ')'

where a value is either a bare identifier (variable reference) or a quoted
string (single or double quotes; the payload may contain commas and ``{VAR}``
placeholders, but not the quote character itself). Whitespace around ``=``,
``,`` and parentheses is tolerated. ``IMAGE``, ``LEFT`` and ``RIGHT`` are
predefined input variables; which ones actually exist is decided by the scene
a program runs against.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum

from . import evalexpr
from .errors import (
    BadArgumentError,
    DuplicateAssignmentError,
    EvalSyntaxError,
    MissingResultError,
    ProgramError,
    ProgramSyntaxError,
    UnknownModuleError,
    UseBeforeDefineError,
)

PREDEFINED_INPUTS = ("IMAGE", "LEFT", "RIGHT")


class ModuleKind(Enum):
    LOC = "LOC"
    CROP = "CROP"
    CROP_RIGHTOF = "CROP_RIGHTOF"
    CROP_LEFTOF = "CROP_LEFTOF"
    CROP_INFRONTOF = "CROP_INFRONTOF"
    CROP_BEHIND = "CROP_BEHIND"
    CROP_BELOW = "CROP_BELOW"
    CROP_ABOVE = "CROP_ABOVE"
    VQA = "VQA"
    COUNT = "COUNT"
    EVAL = "EVAL"
    RESULT = "RESULT"


CROP_KINDS = frozenset({
    ModuleKind.CROP, ModuleKind.CROP_RIGHTOF, ModuleKind.CROP_LEFTOF,
    ModuleKind.CROP_INFRONTOF, ModuleKind.CROP_BEHIND, ModuleKind.CROP_BELOW,
    ModuleKind.CROP_ABOVE,
})

VISUAL_KINDS = frozenset({ModuleKind.LOC, ModuleKind.VQA})


@dataclass(frozen=True)
class VarRef:
    name: str


@dataclass(frozen=True)
class Literal:
    text: str


Arg = "VarRef | Literal"

# argument signature per module: key -> 'var' or 'lit'
_VAR, _LIT = "var", "lit"
MODULE_SIGNATURES: dict[ModuleKind, dict[str, str]] = {
    ModuleKind.LOC: {"image": _VAR, "object": _LIT},
    ModuleKind.VQA: {"image": _VAR, "question": _LIT},
    ModuleKind.COUNT: {"box": _VAR},
    ModuleKind.EVAL: {"expr": _LIT},
    ModuleKind.RESULT: {"var": _VAR},
}
for _kind in CROP_KINDS:
    MODULE_SIGNATURES[_kind] = {"image": _VAR, "box": _VAR}


@dataclass(frozen=True)
class Statement:
    target: str
    module: ModuleKind
    args: tuple[tuple[str, "VarRef | Literal"], ...]  # preserves source order

    def arg(self, key: str) -> "VarRef | Literal":
        for k, v in self.args:
            if k == key:
                return v
        raise KeyError(key)

    def var_arg(self, key: str) -> str:
        a = self.arg(key)
        assert isinstance(a, VarRef)
        return a.name

    def lit_arg(self, key: str) -> str:
        a = self.arg(key)
        assert isinstance(a, Literal)
        return a.text


@dataclass(frozen=True)
class ProgramAst:
    statements: tuple[Statement, ...]
    source_text: str = field(compare=False, default="")

    @property
    def result_statement(self) -> Statement:
        return self.statements[-1]

    @property
    def result_var(self) -> str:
        """Variable whose value the program returns."""
        return self.statements[-1].var_arg("var")

    def producer_index(self) -> dict[str, int]:
        return {s.target: i for i, s in enumerate(self.statements)}


_IDENT_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")


class _LineParser:
    def __init__(self, text: str, line_no: int):
        self.text = text
        self.line = line_no
        self.pos = 0

    def error(self, message: str, pos: int | None = None) -> ProgramSyntaxError:
        col = (self.pos if pos is None else pos) + 1
        return ProgramSyntaxError(message, self.line, col)

    def skip_ws(self) -> None:
        while self.pos < len(self.text) and self.text[self.pos] in " \t":
            self.pos += 1

    def at_end(self) -> bool:
        self.skip_ws()
        return self.pos >= len(self.text)

    def expect(self, ch: str) -> None:
        self.skip_ws()
        if self.pos >= len(self.text) or self.text[self.pos] != ch:
            raise self.error(f"expected {ch!r}")
        self.pos += 1

    def peek(self) -> str:
        self.skip_ws()
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def ident(self, what: str) -> tuple[str, int]:
        self.skip_ws()
        m = _IDENT_RE.match(self.text, self.pos)
        if not m:
            raise self.error(f"expected {what}")
        self.pos = m.end()
        return m.group(0), m.start()

    def quoted(self) -> tuple[str, int]:
        self.skip_ws()
        start = self.pos
        quote = self.text[self.pos]
        end = self.text.find(quote, self.pos + 1)
        if end < 0:
            raise self.error("unterminated string literal", start)
        payload = self.text[self.pos + 1:end]
        self.pos = end + 1
        return payload, start


def _parse_line(text: str, line_no: int) -> tuple[Statement, int]:
    p = _LineParser(text, line_no)
    target, target_pos = p.ident("target variable name")
    p.expect("=")
    module_name, module_pos = p.ident("module name")
    try:
        module = ModuleKind(module_name)
    except ValueError:
        raise UnknownModuleError(f"unknown module {module_name!r}",
                                 line_no, module_pos + 1)
    p.expect("(")
    sig = MODULE_SIGNATURES[module]
    args: list[tuple[str, VarRef | Literal]] = []
    arg_pos: dict[str, int] = {}
    while True:
        key, key_pos = p.ident("argument name")
        p.expect("=")
        p.skip_ws()
        if key in dict(args):
            raise BadArgumentError(f"duplicate argument {key!r}", line_no, key_pos + 1)
        if key not in sig:
            raise BadArgumentError(
                f"module {module.value} takes no argument {key!r}",
                line_no, key_pos + 1)
        ch = p.peek()
        if ch in "'\"":
            payload, vpos = p.quoted()
            if sig[key] != _LIT:
                raise BadArgumentError(
                    f"argument {key!r} of {module.value} must be a variable",
                    line_no, vpos + 1)
            args.append((key, Literal(payload)))
            arg_pos[key] = vpos
        else:
            name, vpos = p.ident(f"value for argument {key!r}")
            if sig[key] != _VAR:
                raise BadArgumentError(
                    f"argument {key!r} of {module.value} must be a quoted literal",
                    line_no, vpos + 1)
            args.append((key, VarRef(name)))
            arg_pos[key] = vpos
        next_ch = p.peek()
        if next_ch == ",":
            p.expect(",")
            continue
        if next_ch == ")":
            p.expect(")")
            break
        raise p.error("expected ',' or ')'")
    if not p.at_end():
        raise p.error("trailing characters after statement")
    missing = [k for k in sig if k not in dict(args)]
    if missing:
        raise BadArgumentError(
            f"module {module.value} missing argument(s): {', '.join(missing)}",
            line_no, target_pos + 1)
    return Statement(target, module, tuple(args)), target_pos


# variable type groups used by validation
_TY_IMAGE, _TY_DETECTION, _TY_ANSWER = "image", "detection", "answer"


def _target_type(module: ModuleKind) -> str:
    if module is ModuleKind.LOC:
        return _TY_DETECTION
    if module in CROP_KINDS:
        return _TY_IMAGE
    return _TY_ANSWER  # VQA, COUNT, EVAL; RESULT handled separately


def _validate(statements: list[Statement], lines: list[int]) -> None:
    types: dict[str, str] = {name: _TY_IMAGE for name in PREDEFINED_INPUTS}

    def check_ref(name: str, expected: str, line: int, key: str) -> None:
        if name not in types:
            raise UseBeforeDefineError(f"variable {name!r} used before definition",
                                       line, 1)
        if types[name] != expected:
            raise BadArgumentError(
                f"argument {key}={name} must be {expected}-valued, got {types[name]}",
                line, 1)

    for stmt, line in zip(statements, lines):
        if stmt.target in PREDEFINED_INPUTS:
            raise DuplicateAssignmentError(
                f"cannot assign predefined input {stmt.target!r}", line, 1)
        if stmt.target in types:
            raise DuplicateAssignmentError(
                f"variable {stmt.target!r} assigned more than once", line, 1)
        mod = stmt.module
        if mod is ModuleKind.LOC or mod is ModuleKind.VQA:
            check_ref(stmt.var_arg("image"), _TY_IMAGE, line, "image")
        elif mod in CROP_KINDS:
            check_ref(stmt.var_arg("image"), _TY_IMAGE, line, "image")
            check_ref(stmt.var_arg("box"), _TY_DETECTION, line, "box")
        elif mod is ModuleKind.COUNT:
            check_ref(stmt.var_arg("box"), _TY_DETECTION, line, "box")
        elif mod is ModuleKind.EVAL:
            expr_text = stmt.lit_arg("expr")
            try:
                parsed = evalexpr.parse_eval(expr_text)
            except EvalSyntaxError as exc:
                raise ProgramSyntaxError(f"bad EVAL expression: {exc}", line, 1)
            for name in evalexpr.placeholders(parsed):
                check_ref(name, _TY_ANSWER, line, "expr")
        elif mod is ModuleKind.RESULT:
            check_ref(stmt.var_arg("var"), _TY_ANSWER, line, "var")
        types[stmt.target] = _target_type(mod)

    result_positions = [i for i, s in enumerate(statements)
                        if s.module is ModuleKind.RESULT]
    if not result_positions:
        raise MissingResultError("program has no RESULT statement",
                                 lines[-1] if lines else 0, 1)
    if len(result_positions) > 1 or result_positions[0] != len(statements) - 1:
        bad = result_positions[0 if len(result_positions) == 1 else 1]
        raise ProgramSyntaxError("RESULT must be the single, final statement",
                                 lines[bad], 1)


def parse_program(text: str) -> ProgramAst:
    """Parse and fully validate program source; raises ProgramError diagnostics."""
    statements: list[Statement] = []
    lines: list[int] = []
    for line_no, raw in enumerate(text.split("\n"), start=1):
        if not raw.strip():
            continue
        stmt, _ = _parse_line(raw, line_no)
        statements.append(stmt)
        lines.append(line_no)
    if not statements:
        raise MissingResultError("empty program", 1, 1)
    _validate(statements, lines)
    return ProgramAst(tuple(statements), source_text=text)


def format_literal(text: str) -> str:
    if "'" not in text:
        return f"'{text}'"
    if '"' not in text:
        return f'"{text}"'
    raise ProgramSyntaxError(
        "literal mixing single and double quotes cannot be printed")


def format_program(ast: ProgramAst) -> str:
    """Canonical source form; ``parse_program(format_program(a)) == a``."""
    out = []
    for stmt in ast.statements:
        parts = []
        for key, arg in stmt.args:
            if isinstance(arg, VarRef):
                parts.append(f"{key}={arg.name}")
            else:
                parts.append(f"{key}={format_literal(arg.text)}")
        out.append(f"{stmt.target}={stmt.module.value}({','.join(parts)})")
    return "\n".join(out)


def count_visual_steps(ast: ProgramAst) -> int:
    """Number of statements that invoke a visual model (LOC and VQA)."""
    return sum(1 for s in ast.statements if s.module in VISUAL_KINDS)


def _upstream_latents(ast: ProgramAst, var: str,
                      producers: dict[str, Statement]) -> set[str]:
    """All LOC/CROP-produced variables reachable upstream from ``var``."""
    found: set[str] = set()
    stack = [var]
    while stack:
        v = stack.pop()
        stmt = producers.get(v)
        if stmt is None or v in found:
            continue
        if stmt.module is ModuleKind.LOC:
            found.add(v)
            stack.append(stmt.var_arg("image"))
        elif stmt.module in CROP_KINDS:
            found.add(v)
            stack.append(stmt.var_arg("image"))
            stack.append(stmt.var_arg("box"))
    return found


def _eval_leaf_answers(ast: ProgramAst, stmt: Statement,
                       producers: dict[str, Statement]) -> set[str]:
    """Non-EVAL answer variables an EVAL depends on, through chained EVALs."""
    leaves: set[str] = set()
    stack = list(evalexpr.placeholders(evalexpr.parse_eval(stmt.lit_arg("expr"))))
    while stack:
        name = stack.pop()
        producer = producers.get(name)
        if producer is None:
            continue
        if producer.module is ModuleKind.EVAL:
            stack.extend(evalexpr.placeholders(
                evalexpr.parse_eval(producer.lit_arg("expr"))))
        else:
            leaves.add(name)
    return leaves


def detect_shared_latents(ast: ProgramAst) -> list[tuple[str, set[str]]]:
    """Stochastic latents feeding two or more answers that meet in an EVAL.

    Returns ``(latent variable, dependent answer variables)`` pairs. An empty
    result means every EVAL combines answers with disjoint stochastic
    ancestries, so per-answer factorized inference is exact for this program.
    The reported latent is the merge point closest to the consumers (the
    latest shared LOC/CROP variable). COUNT answers count as consumers of
    their detection's lineage, same as VQA answers of their image's.
    """
    producers = {s.target: s for s in ast.statements}
    index = ast.producer_index()

    lineage: dict[str, set[str]] = {}
    for stmt in ast.statements:
        if stmt.module is ModuleKind.VQA:
            lineage[stmt.target] = _upstream_latents(ast, stmt.var_arg("image"), producers)
        elif stmt.module is ModuleKind.COUNT:
            lineage[stmt.target] = _upstream_latents(ast, stmt.var_arg("box"), producers)

    shared: dict[str, set[str]] = {}
    for stmt in ast.statements:
        if stmt.module is not ModuleKind.EVAL:
            continue
        leaves = sorted(_eval_leaf_answers(ast, stmt, producers))
        for i in range(len(leaves)):
            for j in range(i + 1, len(leaves)):
                a, b = leaves[i], leaves[j]
                common = lineage.get(a, set()) & lineage.get(b, set())
                if not common:
                    continue
                latent = max(common, key=lambda v: index[v])
                shared.setdefault(latent, set()).update((a, b))
    return sorted(shared.items(), key=lambda kv: index[kv[0]])
