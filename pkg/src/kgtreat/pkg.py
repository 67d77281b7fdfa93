"""Per-patient personalised KGs (PKGs) with k-hop bridge nodes.

A PKG holds the patient's mapped concepts (seeds), an optional anchor concept
(treatment or outcome), every KG node that sits on a simple path of at most
``k`` edges between two distinct members, the KG edges induced on that node
set, and a synthetic CLS node joined to every other node.
"""
from __future__ import annotations

import json
import warnings
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cohortgen import KnowledgeGraph, PatientRecord

SEED, BRIDGE, CLS_ORIGIN = 0, 1, 2
ORIGIN_NAMES = {SEED: "seed", BRIDGE: "bridge", CLS_ORIGIN: "cls"}


class InvalidAnchor(ValueError):
    pass


@dataclass
class SeedSet:
    nodes: np.ndarray
    unmapped: int

    @property
    def empty(self) -> bool:
        return self.nodes.size == 0


@dataclass
class Pkg:
    nodes: np.ndarray  # KG node ids; the CLS slot holds ``cls_id``
    origin: np.ndarray  # SEED / BRIDGE / CLS_ORIGIN per node
    edges: np.ndarray  # (E, 3) (head, relation, tail) in KG ids
    cls_index: int
    cls_id: int
    cls_relation: int
    anchor_index: int | None = None

    def __len__(self) -> int:
        return int(self.nodes.size)

    def local_edges(self) -> np.ndarray:
        """Edges with endpoints rewritten as positions in ``nodes``."""
        pos = {int(n): i for i, n in enumerate(self.nodes)}
        out = np.empty_like(self.edges)
        for j, (h, r, t) in enumerate(self.edges.tolist()):
            out[j] = (pos[h], r, pos[t])
        return out

    def neighbours(self, i: int) -> set[int]:
        loc = self.local_edges()
        out = set(loc[loc[:, 0] == i, 2].tolist()) | set(loc[loc[:, 2] == i, 0].tolist())
        out.discard(i)
        return out

    def to_json(self) -> dict:
        return {
            "nodes": self.nodes.tolist(),
            "origin": [ORIGIN_NAMES[int(o)] for o in self.origin],
            "edges": self.edges.tolist(),
            "cls": self.cls_index,
            "anchor": self.anchor_index,
            "cls_relation": self.cls_relation,
        }

    @classmethod
    def from_json(cls, d: dict) -> "Pkg":
        inv = {v: k for k, v in ORIGIN_NAMES.items()}
        nodes = np.array(d["nodes"], dtype=np.int64)
        return cls(
            nodes=nodes,
            origin=np.array([inv[o] for o in d["origin"]], dtype=np.int64),
            edges=np.array(d["edges"], dtype=np.int64).reshape(-1, 3),
            cls_index=int(d["cls"]),
            cls_id=int(nodes[d["cls"]]),
            cls_relation=int(d["cls_relation"]),
            anchor_index=d.get("anchor"),
        )


@dataclass
class DualPkg:
    treatment_pkg: Pkg
    outcome_pkg: Pkg
    treatment_anchor: int | None = None
    outcome_anchor: int | None = None

    @property
    def shared(self) -> bool:
        return self.treatment_pkg is self.outcome_pkg


def map_codes_to_nodes(record: PatientRecord, kg: KnowledgeGraph) -> SeedSet:
    """Unique KG nodes for the record's clinical codes; unmapped codes are counted."""
    found: set[int] = set()
    unmapped = 0
    for code in record.codes():
        node = kg.code_map.get(int(code))
        if node is None:
            unmapped += 1
        else:
            found.add(node)
    seeds = SeedSet(np.array(sorted(found), dtype=np.int64), unmapped)
    if seeds.empty:
        warnings.warn(f"record {record.pid}: no codes map to KG nodes; PKG is CLS-only", stacklevel=2)
    return seeds


def find_bridges(members: list[int], kg: KnowledgeGraph, k: int) -> dict[int, int]:
    """Non-member nodes on a simple path of <= k edges between two distinct members.

    Returns ``{bridge: hop distance to the nearest member}``. Paths are
    enumerated by depth-bounded DFS from each member; an endpoint pair is
    counted once (the later endpoint must have the larger id).
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    adj = kg.adjacency
    member = set(members)
    hits: set[int] = set()
    for s in sorted(member):
        path = [s]
        on_path = {s}
        stack = [iter(adj[s])]
        while stack:
            nxt = next(stack[-1], None)
            if nxt is None:
                stack.pop()
                on_path.discard(path.pop())
                continue
            w = int(nxt)
            if w in on_path:
                continue
            if w in member and w > s and len(path) > 1:
                hits.update(n for n in path[1:] if n not in member)
            if len(path) < k:
                path.append(w)
                on_path.add(w)
                stack.append(iter(adj[w]))
    if not hits:
        return {}
    # multi-source BFS gives each bridge's distance to the member set
    dist = {m: 0 for m in member}
    queue = deque(sorted(member))
    while queue:
        u = queue.popleft()
        if dist[u] >= k:
            continue
        for w in adj[u]:
            w = int(w)
            if w not in dist:
                dist[w] = dist[u] + 1
                queue.append(w)
    return {b: dist[b] for b in hits}


def build_pkg(
    seeds,
    anchor: int | None,
    kg: KnowledgeGraph,
    k: int = 2,
    cap: int = 200,
) -> Pkg:
    """Assemble one PKG. Node order: anchor, seeds (by id), bridges by (hop, id), CLS."""
    if anchor is not None and not 0 <= int(anchor) < kg.n_nodes:
        raise InvalidAnchor(f"anchor {anchor} is not a node of the KG")
    if cap < 2:
        raise ValueError("cap must leave room for at least one node plus CLS")
    seed_ids = sorted({int(s) for s in np.asarray(seeds).reshape(-1)})
    members = ([int(anchor)] if anchor is not None else []) + [s for s in seed_ids if s != anchor]

    bridges = find_bridges(members, kg, k) if len(members) > 1 else {}
    ordered_bridges = sorted(bridges, key=lambda b: (bridges[b], b))
    room = cap - 1
    if len(members) > room:
        members = members[:room]
        ordered_bridges = []
    else:
        ordered_bridges = ordered_bridges[: room - len(members)]

    kept = members + ordered_bridges
    cls_id = kg.n_nodes
    cls_rel = kg.n_relations
    nodes = np.array(kept + [cls_id], dtype=np.int64)
    origin = np.array([SEED] * len(members) + [BRIDGE] * len(ordered_bridges) + [CLS_ORIGIN], dtype=np.int64)

    tri = kg.triples
    inside = np.zeros(kg.n_nodes + 1, dtype=bool)
    inside[kept] = True
    induced = tri[inside[tri[:, 0]] & inside[tri[:, 2]]]
    induced = induced[np.lexsort((induced[:, 1], induced[:, 2], induced[:, 0]))] if induced.size else induced
    cls_edges = []
    for n in kept:
        cls_edges.append((cls_id, cls_rel, n))
        cls_edges.append((n, cls_rel, cls_id))
    edges = np.concatenate([induced.reshape(-1, 3), np.array(cls_edges, dtype=np.int64).reshape(-1, 3)])
    return Pkg(
        nodes=nodes,
        origin=origin,
        edges=edges,
        cls_index=len(kept),
        cls_id=cls_id,
        cls_relation=cls_rel,
        anchor_index=0 if anchor is not None else None,
    )


def build_dual_pkgs(
    record: PatientRecord,
    treatment_node: int | None,
    outcome_node: int | None,
    kg: KnowledgeGraph,
    k: int = 2,
    cap: int = 200,
) -> DualPkg:
    """Treatment-covariate and outcome-covariate PKGs for one record.

    With neither anchor the two PKGs are the same object (the covariate PKG).
    """
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        seeds = map_codes_to_nodes(record, kg)
    if treatment_node is None and outcome_node is None:
        g = build_pkg(seeds.nodes, None, kg, k, cap)
        return DualPkg(g, g)
    return DualPkg(
        build_pkg(seeds.nodes, treatment_node, kg, k, cap),
        build_pkg(seeds.nodes, outcome_node, kg, k, cap),
        treatment_node,
        outcome_node,
    )


def task_anchors(kg: KnowledgeGraph, treatment_code: int | None, outcome_code: int | None):
    t = kg.code_map.get(int(treatment_code)) if treatment_code is not None else None
    o = kg.code_map.get(int(outcome_code)) if outcome_code is not None else None
    return t, o


# -- cache -------------------------------------------------------------------
def save_pkg_cache(path: str | Path, fp: str, pids: list[int], duals: list[DualPkg]) -> None:
    lines = [json.dumps({"kind": "pkg-cache", "fingerprint": fp})]
    for pid, d in zip(pids, duals):
        row = {"id": pid, "t": d.treatment_pkg.to_json(), "ta": d.treatment_anchor, "oa": d.outcome_anchor}
        row["o"] = None if d.shared else d.outcome_pkg.to_json()
        lines.append(json.dumps(row, sort_keys=True))
    Path(path).write_text("\n".join(lines) + "\n")


def load_pkg_cache(path: str | Path, fp: str | None = None) -> dict[int, DualPkg] | None:
    """Cached PKGs keyed by patient id; ``None`` when stale or absent."""
    path = Path(path)
    if not path.exists():
        return None
    lines = path.read_text().splitlines()
    header = json.loads(lines[0])
    if fp is not None and header.get("fingerprint") != fp:
        return None
    out = {}
    for line in lines[1:]:
        row = json.loads(line)
        t = Pkg.from_json(row["t"])
        o = t if row["o"] is None else Pkg.from_json(row["o"])
        out[int(row["id"])] = DualPkg(t, o, row.get("ta"), row.get("oa"))
    return out
