"""Conservative dependency graph over random choices and observations.

Construction follows the program order:

* start creates ``root`` and sets ``prev = root``;
* every choice / observation node takes ``prev`` as its parent and becomes ``prev``;
* a ``mapData`` call creates a ``split`` node (parent ``prev``) and pushes it;
* each iteration starts from ``split``; its last node becomes a parent of ``join``;
* ``mapData`` end creates ``join`` and sets ``prev = join``.

``join`` is created when its mapData finishes so that parents always precede
children in creation order, which lets :func:`compute_weights` run as one
reverse pass.

Inside a vectorized mapData each lane (datum) owns a separate chain, so the
builder's ``prev`` becomes a list with one entry per lane.  Independent
particles (``shared_lanes``) instead share one chain whose nodes carry a vector
of per-particle terms; :func:`compute_weights` then returns one column per
particle.

Per-choice weights
------------------
For a choice ``i`` the weight sums the log-ratio terms of ``i`` and every node
downstream of it.  Under minibatching each downstream term is multiplied by
its scale *relative to the innermost mapData iteration shared with i*; terms
inside ``i``'s own iteration are therefore unscaled, while the surrogate
multiplies the whole weight by ``scale_i``.  With full batches every scale is
one and the weight is the plain downstream sum.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

__all__ = ["GraphNode", "DependencyGraph", "GraphBuilder", "GraphEventError", "compute_weights"]


class GraphEventError(RuntimeError):
    """Graph events arrived in an illegal order."""


class GraphNode:
    __slots__ = ("kind", "index", "parents", "children", "payload", "lane", "join", "factor")

    def __init__(self, kind: str, index: int, payload=None, lane: int | None = None):
        self.kind = kind
        self.index = index
        self.parents: list[GraphNode] = []
        self.children: list[GraphNode] = []
        self.payload = payload
        self.lane = lane
        self.join: GraphNode | None = None
        self.factor = 1.0

    def __repr__(self) -> str:
        return f"GraphNode({self.kind}#{self.index})"


class DependencyGraph:
    def __init__(self):
        self.nodes: list[GraphNode] = []

    @property
    def root(self) -> GraphNode:
        return self.nodes[0]

    def _new(self, kind, parents, payload=None, lane=None) -> GraphNode:
        node = GraphNode(kind, len(self.nodes), payload, lane)
        seen = set()
        for p in parents:
            if id(p) not in seen:
                seen.add(id(p))
                node.parents.append(p)
                p.children.append(node)
        self.nodes.append(node)
        return node

    def downstream(self, node: GraphNode) -> set:
        """All nodes reachable from ``node`` along child edges, excluding it."""
        seen: set = set()
        stack = list(node.children)
        while stack:
            n = stack.pop()
            if n.index in seen:
                continue
            seen.add(n.index)
            stack.extend(n.children)
        return {self.nodes[i] for i in seen}

    def to_dot(self) -> str:
        lines = ["digraph dependencies {"]
        for n in self.nodes:
            label = n.kind
            if n.payload is not None:
                label += f" {n.payload.address}"
                if n.lane is not None:
                    label += f" lane {n.lane}"
            lines.append(f'  n{n.index} [label="{label}"];')
        for n in self.nodes:
            for c in n.children:
                lines.append(f"  n{n.index} -> n{c.index};")
        lines.append("}")
        return "\n".join(lines) + "\n"

    def __len__(self) -> int:
        return len(self.nodes)


@dataclass
class _MapFrame:
    split: Any  # node, or list of per-lane nodes
    pending: list
    factor: float
    lanes: int | None = None  # lane count of a vectorized mapData
    per_lane: bool = False  # scalar mapData nested in a vectorized one
    iterating: bool = field(default=False)


class GraphBuilder:
    """Receives runtime events and grows a :class:`DependencyGraph`."""

    def __init__(self):
        self.graph = DependencyGraph()
        self.prev: Any = None
        self.stack: list[_MapFrame] = []
        self.shared_lanes: int | None = None

    def on_start(self) -> GraphNode:
        if self.graph.nodes:
            raise GraphEventError("start after nodes were created")
        self.prev = self.graph._new("root", [])
        return self.prev

    def _chain(self, kind, payload, lanes):
        g = self.graph
        if self.prev is None:
            raise GraphEventError(f"{kind} before start")
        if isinstance(self.prev, list):
            if lanes is not None and lanes != len(self.prev):
                raise GraphEventError("lane count mismatch")
            nodes = [g._new(kind, [p], payload, r) for r, p in enumerate(self.prev)]
            self.prev = list(nodes)
            return nodes
        if lanes is not None and lanes != self.shared_lanes:
            raise GraphEventError("lane record outside a vectorized mapData")
        node = g._new(kind, [self.prev], payload)
        self.prev = node
        return [node]

    def on_choice(self, payload, lanes: int | None = None) -> list:
        return self._chain("choice", payload, lanes)

    def on_observe(self, payload, lanes: int | None = None) -> list:
        return self._chain("observe", payload, lanes)

    def on_global_choice(self, payload) -> list:
        """Attach a lane-free choice; inside lanes it joins the first lane's chain."""
        g = self.graph
        if isinstance(self.prev, list):
            node = g._new("choice", [self.prev[0]], payload)
            self.prev[0] = node
        else:
            node = g._new("choice", [self.prev], payload)
            self.prev = node
        return [node]

    def on_mapdata_begin(self, factor: float = 1.0, lanes: int | None = None) -> None:
        g = self.graph
        if self.prev is None:
            raise GraphEventError("mapData before start")
        if isinstance(self.prev, list):
            if lanes is not None:
                raise GraphEventError("vectorized mapData cannot nest inside another")
            splits = [g._new("split", [p], None, r) for r, p in enumerate(self.prev)]
            for s in splits:
                s.factor = factor
            self.stack.append(_MapFrame(splits, [[] for _ in splits], factor, per_lane=True))
        else:
            split = g._new("split", [self.prev])
            split.factor = factor
            self.stack.append(_MapFrame(split, [], factor, lanes=lanes))

    def on_iter_begin(self) -> None:
        if not self.stack:
            raise GraphEventError("iteration outside mapData")
        f = self.stack[-1]
        if f.iterating:
            raise GraphEventError("iteration begin without end")
        f.iterating = True
        if f.lanes is not None:
            self.prev = [f.split] * f.lanes
        elif f.per_lane:
            self.prev = list(f.split)
        else:
            self.prev = f.split

    def on_iter_end(self) -> None:
        if not self.stack or not self.stack[-1].iterating:
            raise GraphEventError("iteration end without begin")
        f = self.stack[-1]
        f.iterating = False
        if f.lanes is not None:
            f.pending.extend(self.prev)
        elif f.per_lane:
            for r, p in enumerate(self.prev):
                f.pending[r].append(p)
        else:
            f.pending.append(self.prev)

    def on_mapdata_end(self) -> None:
        if not self.stack:
            raise GraphEventError("mapData end without begin")
        f = self.stack.pop()
        if f.iterating:
            raise GraphEventError("mapData end inside an iteration")
        g = self.graph
        if f.per_lane:
            joins = []
            for r, (s, parents) in enumerate(zip(f.split, f.pending)):
                j = g._new("join", parents or [s], None, r)
                s.join = j
                joins.append(j)
            self.prev = joins
        else:
            j = g._new("join", f.pending or [f.split])
            f.split.join = j
            self.prev = j

    def finish(self) -> DependencyGraph:
        if self.stack:
            raise GraphEventError("unterminated mapData")
        return self.graph


def _node_term(node: GraphNode) -> tuple[float, float]:
    """(unscaled log-ratio term, scale) of a node; structural nodes give (0, 1)."""
    rec = node.payload
    if rec is None:
        return 0.0, 1.0
    t = rec.term_values()
    v = float(t if node.lane is None else t[node.lane])
    return v, rec.scale


def _shared_weights(graph: DependencyGraph, lanes: int) -> tuple[np.ndarray, np.ndarray]:
    # a single chain (no mapData) whose node terms are per-particle vectors
    nodes = graph.nodes
    rel = np.zeros((len(nodes), lanes))
    acc = np.zeros(lanes)
    for i in range(len(nodes) - 1, -1, -1):
        node = nodes[i]
        if node.kind in ("split", "join") or len(node.children) > 1:
            raise GraphEventError("particle graphs must be a single chain")
        if node.payload is not None:
            acc = acc + node.payload.scale * np.broadcast_to(node.payload.term_values(), (lanes,))
        rel[i] = acc
    return rel, rel.copy()


def compute_weights(graph: DependencyGraph, lanes: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Downstream sums for every node in one reverse-topological pass.

    Returns ``(rel, absolute)``: ``rel[i]`` scales downstream terms relative to
    node i's own mapData iteration; ``absolute[i]`` uses each term's full scale.
    ``absolute[root]`` is the scale-weighted total log-ratio of the trace.
    With ``lanes`` (a shared-lane particle graph) both arrays have one column
    per particle.
    """
    if lanes is not None:
        return _shared_weights(graph, lanes)
    nodes = graph.nodes
    n = len(nodes)
    rel = np.zeros(n)
    ab = np.zeros(n)
    for i in range(n - 1, -1, -1):
        node = nodes[i]
        if node.kind == "split":
            j = node.join.index
            ra, aa = rel[j], ab[j]
            tr, ta = ra, aa
            s = node.factor
            for c in node.children:
                if c.kind == "join" and c is node.join:
                    continue
                tr += s * (rel[c.index] - ra)
                ta += ab[c.index] - aa
            rel[i] = tr
            ab[i] = ta
            continue
        t, sc = _node_term(node)
        if node.children:
            c = node.children[0].index
            rel[i] = t + rel[c]
            ab[i] = sc * t + ab[c]
        else:
            rel[i] = t
            ab[i] = sc * t
    return rel, ab
