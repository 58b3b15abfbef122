"""Compile programs into the heterogeneous directed probabilistic graph.

Nodes are inputs (images and the literal arguments of module calls),
latents (one per statement target, the RESULT node included), and the shared
parameter node of each visual-model family that the program invokes. Edges
follow invocation: every argument node points at the statement's target, and
LOC/VQA targets additionally receive an edge from their family's parameter
node. CROP and RESULT nodes stay in the data structure flagged deterministic;
rendering can contract them, which reproduces the usual drawing convention
without losing them for inference.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum

from .dsl import CROP_KINDS, ModuleKind, ProgramAst
from .errors import CycleDetectedError
from .evalexpr import placeholders
from .evalexpr import parse_eval
from .dsl import Literal, VarRef


class NodeKind(Enum):
    INPUT = "input"
    LATENT = "latent"
    PARAMETER = "parameter"


@dataclass(frozen=True)
class GraphNode:
    id: str
    name: str
    kind: NodeKind
    producer: tuple[ModuleKind, int] | None = None  # (module, statement index)
    deterministic: bool = False


@dataclass
class ProbGraph:
    nodes: list[GraphNode]
    edges: list[tuple[str, str]]  # parent id -> child id
    result_node: str

    def node(self, node_id: str) -> GraphNode:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    def parents(self, node_id: str) -> list[str]:
        return [p for p, c in self.edges if c == node_id]

    def children(self, node_id: str) -> list[str]:
        return [c for p, c in self.edges if p == node_id]


def build_graph(ast: ProgramAst) -> ProbGraph:
    input_nodes: dict[str, GraphNode] = {}  # id -> node, insertion ordered
    latent_nodes: list[GraphNode] = []
    edges: list[tuple[str, str]] = []
    param_used: dict[str, bool] = {"loc": False, "vqa": False}
    var_ids: dict[str, str] = {}

    def input_image(name: str) -> str:
        node_id = f"in:{name}"
        if node_id not in input_nodes:
            input_nodes[node_id] = GraphNode(node_id, name, NodeKind.INPUT)
        return node_id

    def input_literal(text: str) -> str:
        node_id = f"lit:{text}"
        if node_id not in input_nodes:
            input_nodes[node_id] = GraphNode(node_id, text, NodeKind.INPUT)
        return node_id

    def ref_id(name: str) -> str:
        if name in var_ids:
            return var_ids[name]
        return input_image(name)

    for index, stmt in enumerate(ast.statements):
        target_id = f"var:{stmt.target}"
        kind = stmt.module
        deterministic = kind in CROP_KINDS or kind is ModuleKind.RESULT
        latent_nodes.append(GraphNode(target_id, stmt.target, NodeKind.LATENT,
                                      producer=(kind, index),
                                      deterministic=deterministic))
        if kind is ModuleKind.EVAL:
            for name in placeholders(parse_eval(stmt.lit_arg("expr"))):
                edges.append((ref_id(name), target_id))
        else:
            for _, arg in stmt.args:
                if isinstance(arg, VarRef):
                    edges.append((ref_id(arg.name), target_id))
                else:
                    assert isinstance(arg, Literal)
                    edges.append((input_literal(arg.text), target_id))
        if kind is ModuleKind.LOC:
            param_used["loc"] = True
            edges.append(("param:loc", target_id))
        elif kind is ModuleKind.VQA:
            param_used["vqa"] = True
            edges.append(("param:vqa", target_id))
        var_ids[stmt.target] = target_id

    param_nodes = [GraphNode(f"param:{fam}", f"theta_{fam}", NodeKind.PARAMETER)
                   for fam in ("loc", "vqa") if param_used[fam]]
    nodes = list(input_nodes.values()) + param_nodes + latent_nodes
    result_node = f"var:{ast.statements[-1].target}"
    return ProbGraph(nodes, edges, result_node)


def topological_order(graph: ProbGraph) -> list[GraphNode]:
    """Parents before children; parameters, then inputs, then statement order."""

    def rank(node: GraphNode):
        if node.kind is NodeKind.PARAMETER:
            return (0, 0, node.id)
        if node.kind is NodeKind.INPUT:
            return (1, 0, node.id)
        return (2, node.producer[1], node.id)

    indegree = {n.id: 0 for n in graph.nodes}
    for _, child in graph.edges:
        indegree[child] += 1
    by_id = {n.id: n for n in graph.nodes}
    ready = sorted((n for n in graph.nodes if indegree[n.id] == 0), key=rank)
    order: list[GraphNode] = []
    while ready:
        node = ready.pop(0)
        order.append(node)
        released = []
        for parent, child in graph.edges:
            if parent == node.id:
                indegree[child] -= 1
                if indegree[child] == 0:
                    released.append(by_id[child])
        ready = sorted(ready + released, key=rank)
    if len(order) != len(graph.nodes):
        raise CycleDetectedError("graph contains a cycle; AST validation broken")
    return order


def _contracted(graph: ProbGraph) -> tuple[list[GraphNode], list[tuple[str, str]]]:
    hidden = {n.id for n in graph.nodes if n.deterministic}
    parents: dict[str, list[str]] = {}
    children: dict[str, list[str]] = {}
    for p, c in graph.edges:
        parents.setdefault(c, []).append(p)
        children.setdefault(p, []).append(c)

    def visible_sources(node_id: str) -> list[str]:
        # walk up through hidden nodes to the visible ancestors
        out: list[str] = []
        for p in parents.get(node_id, []):
            if p in hidden:
                out.extend(visible_sources(p))
            else:
                out.append(p)
        return out

    nodes = [n for n in graph.nodes if n.id not in hidden]
    edges = []
    seen = set()
    for n in nodes:
        for src in visible_sources(n.id):
            if (src, n.id) not in seen:
                seen.add((src, n.id))
                edges.append((src, n.id))
    return nodes, edges


_DOT_COLORS = {
    NodeKind.INPUT: "lightblue",
    NodeKind.LATENT: "lightgreen",
    NodeKind.PARAMETER: "lightcoral",
}


def export_dot(graph: ProbGraph, hide_deterministic: bool = False) -> str:
    """Stable DOT text; node colors follow the input/latent/parameter classes."""
    if hide_deterministic:
        nodes, edges = _contracted(graph)
    else:
        nodes, edges = graph.nodes, graph.edges
    lines = ["digraph program {", "  rankdir=LR;"]
    for n in nodes:
        label = n.name.replace('"', r'\"')
        lines.append(
            f'  "{n.id}" [label="{label}" style=filled '
            f'fillcolor={_DOT_COLORS[n.kind]}];')
    for p, c in edges:
        lines.append(f'  "{p}" -> "{c}";')
    lines.append("}")
    return "\n".join(lines) + "\n"


def export_json(graph: ProbGraph) -> str:
    payload = {
        "nodes": [
            {
                "id": n.id,
                "name": n.name,
                "kind": n.kind.value,
                "producer": None if n.producer is None
                else {"module": n.producer[0].value, "statement": n.producer[1]},
                "deterministic": n.deterministic,
            }
            for n in graph.nodes
        ],
        "edges": [[p, c] for p, c in graph.edges],
        "result_node": graph.result_node,
    }
    return json.dumps(payload, indent=2)
