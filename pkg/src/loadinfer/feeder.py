"""Radial distribution feeder model and backward/forward-sweep power flow.

The feeder is a single-phase balanced equivalent: nodes carry kW/kvar loads,
branches carry series impedance in per-unit. The power flow is a classic
backward/forward sweep, which is exact for radial networks and serves as the
independent oracle for the WLS branch-current estimator.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class FeederFormatError(ValueError):
    """Malformed feeder file."""


class TopologyError(ValueError):
    """Feeder graph is not a connected radial network with a valid slack."""


class PowerFlowError(RuntimeError):
    """Backward/forward sweep failed to converge (infeasible loading)."""


@dataclass(frozen=True)
class Node:
    id: int
    load_kw: float = 0.0
    load_kvar: float = 0.0
    customer_ids: tuple[str, ...] = ()
    sector: str | None = None


@dataclass(frozen=True)
class Branch:
    from_node: int
    to_node: int
    r: float
    x: float

    @property
    def z(self) -> complex:
        return complex(self.r, self.x)


@dataclass(frozen=True)
class FeederModel:
    nodes: tuple[Node, ...]
    branches: tuple[Branch, ...]
    slack_node: int
    base_kva: float
    base_kv: float

    def node(self, node_id: int) -> Node:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    @property
    def node_ids(self) -> list[int]:
        return [n.id for n in self.nodes]


def validate_feeder(feeder: FeederModel) -> None:
    """Check connectivity, radiality and slack existence; raise TopologyError."""
    ids = feeder.node_ids
    if len(set(ids)) != len(ids):
        raise TopologyError("duplicate node ids")
    if feeder.slack_node not in ids:
        raise TopologyError(f"slack node {feeder.slack_node} not in feeder")
    for b in feeder.branches:
        if b.from_node == b.to_node:
            raise TopologyError(f"self-loop branch at node {b.from_node}")
        if b.from_node not in ids or b.to_node not in ids:
            raise TopologyError(f"branch {b.from_node}-{b.to_node} references unknown node")
        if b.r < 0:
            raise TopologyError(f"negative resistance on branch {b.from_node}-{b.to_node}")
    if len(feeder.branches) != len(feeder.nodes) - 1:
        raise TopologyError(
            f"{len(feeder.branches)} branches for {len(feeder.nodes)} nodes: not a tree"
        )
    # BFS reachability; |E| = |V|-1 plus connectivity implies a tree (no cycles)
    adj: dict[int, list[int]] = {i: [] for i in ids}
    for b in feeder.branches:
        adj[b.from_node].append(b.to_node)
        adj[b.to_node].append(b.from_node)
    seen = {feeder.slack_node}
    frontier = [feeder.slack_node]
    while frontier:
        nxt = []
        for u in frontier:
            for v in adj[u]:
                if v not in seen:
                    seen.add(v)
                    nxt.append(v)
        frontier = nxt
    if len(seen) != len(ids):
        missing = sorted(set(ids) - seen)
        raise TopologyError(f"nodes {missing} unreachable from slack")


class FeederStructure:
    """BFS-oriented view of a radial feeder with precomputed sweep matrices.

    All per-branch arrays follow the order of ``feeder.branches``; currents
    are oriented parent -> child regardless of the file's from/to order.
    """

    def __init__(self, feeder: FeederModel):
        validate_feeder(feeder)
        self.feeder = feeder
        ids = feeder.node_ids
        adj: dict[int, list[tuple[int, int]]] = {i: [] for i in ids}
        for k, b in enumerate(feeder.branches):
            adj[b.from_node].append((b.to_node, k))
            adj[b.to_node].append((b.from_node, k))
        # BFS from slack fixes node order and branch orientation
        order = [feeder.slack_node]
        parent_of: dict[int, tuple[int, int]] = {}
        seen = {feeder.slack_node}
        frontier = [feeder.slack_node]
        while frontier:
            nxt = []
            for u in frontier:
                for v, k in adj[u]:
                    if v not in seen:
                        seen.add(v)
                        parent_of[v] = (u, k)
                        order.append(v)
                        nxt.append(v)
            frontier = nxt
        self.node_ids = order
        self.idx = {nid: i for i, nid in enumerate(order)}
        n, nb = len(order), len(feeder.branches)
        self.parent_idx = np.zeros(nb, dtype=int)
        self.child_idx = np.zeros(nb, dtype=int)
        self.z = np.zeros(nb, dtype=complex)
        for child, (par, k) in parent_of.items():
            self.parent_idx[k] = self.idx[par]
            self.child_idx[k] = self.idx[child]
            self.z[k] = feeder.branches[k].z
        # path_bool[i, k] = 1 if branch k lies on the path slack -> node i
        path_bool = np.zeros((n, nb))
        for child, (par, k) in parent_of.items():
            i = self.idx[child]
            path_bool[i] = path_bool[self.idx[par]]
            path_bool[i, k] = 1.0
        self.path_bool = path_bool
        self.path_z = path_bool * self.z[None, :]
        # load_inc @ J gives the load current drawn at each node (KCL):
        # +1 for the branch feeding the node, -1 for branches leaving it.
        load_inc = np.zeros((n, nb))
        for k in range(nb):
            load_inc[self.child_idx[k], k] = 1.0
            load_inc[self.parent_idx[k], k] = -1.0
        self.load_inc = load_inc
        self.head_branches = np.where(self.parent_idx == 0)[0]

    def loads_pu(self, loads: dict[int, tuple[float, float]] | None = None) -> np.ndarray:
        """Complex per-unit load vector in BFS node order (slack entry zero)."""
        f = self.feeder
        S = np.zeros(len(self.node_ids), dtype=complex)
        if loads is None:
            for nd in f.nodes:
                S[self.idx[nd.id]] = complex(nd.load_kw, nd.load_kvar) / f.base_kva
        else:
            for nid, (kw, kvar) in loads.items():
                if nid not in self.idx:
                    raise KeyError(f"load given for unknown node {nid}")
                S[self.idx[nid]] = complex(kw, kvar) / f.base_kva
        S[0] = 0.0
        return S

    def voltages(self, branch_currents: np.ndarray, slack_voltage: complex) -> np.ndarray:
        """Node voltages implied by branch currents, BFS order."""
        return slack_voltage - self.path_z @ branch_currents


@dataclass
class PowerFlowResult:
    node_ids: list[int]
    voltages: np.ndarray        # complex, BFS node order
    branch_currents: np.ndarray  # complex pu, feeder.branches order, parent -> child
    sweeps: int

    def voltage(self, node_id: int) -> complex:
        return complex(self.voltages[self.node_ids.index(node_id)])

    @property
    def voltage_by_node(self) -> dict[int, complex]:
        return {nid: complex(v) for nid, v in zip(self.node_ids, self.voltages)}


def power_flow(
    feeder: FeederModel,
    loads: dict[int, tuple[float, float]] | None = None,
    slack_voltage: complex = 1.0 + 0.0j,
    tol: float = 1e-10,
    max_sweeps: int = 100,
    structure: FeederStructure | None = None,
) -> PowerFlowResult:
    """Backward/forward sweep power flow on a radial feeder.

    ``loads`` maps node id -> (kW, kvar); defaults to the loads stored on the
    feeder nodes. Converges when the max voltage change between sweeps drops
    below ``tol`` (per-unit).
    """
    if abs(slack_voltage) <= 0:
        raise ValueError("slack voltage magnitude must be positive")
    st = structure or FeederStructure(feeder)
    S = st.loads_pu(loads)
    n = len(st.node_ids)
    V = np.full(n, slack_voltage, dtype=complex)
    J = np.zeros(len(feeder.branches), dtype=complex)
    for sweep in range(1, max_sweeps + 1):
        if np.any(np.abs(V) < 1e-6):
            raise PowerFlowError("voltage collapsed during sweep (infeasible loading)")
        I_load = np.conj(S / V)
        I_load[0] = 0.0
        J = st.path_bool.T @ I_load
        V_new = st.voltages(J, slack_voltage)
        delta = float(np.max(np.abs(V_new - V)))
        V = V_new
        if delta < tol:
            return PowerFlowResult(st.node_ids, V, J, sweep)
    raise PowerFlowError(f"no convergence after {max_sweeps} sweeps")


def _parse_nodes(raw: list) -> tuple[Node, ...]:
    nodes = []
    for item in raw:
        try:
            nodes.append(
                Node(
                    id=int(item["id"]),
                    load_kw=float(item.get("load_kw", 0.0)),
                    load_kvar=float(item.get("load_kvar", 0.0)),
                    customer_ids=tuple(item.get("customer_ids", ())),
                    sector=item.get("sector"),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise FeederFormatError(f"bad node entry {item!r}: {exc}") from exc
    return tuple(nodes)


def _parse_branches(raw: list) -> tuple[Branch, ...]:
    branches = []
    for item in raw:
        try:
            branches.append(
                Branch(
                    from_node=int(item["from"]),
                    to_node=int(item["to"]),
                    r=float(item["r"]),
                    x=float(item["x"]),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise FeederFormatError(f"bad branch entry {item!r}: {exc}") from exc
    return tuple(branches)


def load_feeder(path: str | Path) -> FeederModel:
    """Load and validate a feeder from its JSON file format.

    The file has four sections: ``bases`` (base_kva/base_kv), ``slack``
    (node id), ``nodes`` and ``branches``. See data/feeder18.json for the
    canonical example.
    """
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FeederFormatError(f"{path}: not valid JSON: {exc}") from exc
    for section in ("bases", "slack", "nodes", "branches"):
        if section not in raw:
            raise FeederFormatError(f"{path}: missing section {section!r}")
    try:
        bases = raw["bases"]
        feeder = FeederModel(
            nodes=_parse_nodes(raw["nodes"]),
            branches=_parse_branches(raw["branches"]),
            slack_node=int(raw["slack"]),
            base_kva=float(bases["base_kva"]),
            base_kv=float(bases["base_kv"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise FeederFormatError(f"{path}: {exc}") from exc
    validate_feeder(feeder)
    return feeder


def feeder18() -> FeederModel:
    """The shipped 18-node fixture (3%/20%/77% industrial/commercial/residential)."""
    return load_feeder(Path(__file__).parent / "data" / "feeder18.json")


def random_radial_feeder(
    n_nodes: int,
    rng: np.random.Generator,
    base_kva: float = 1000.0,
    base_kv: float = 12.66,
) -> FeederModel:
    """Random radial test feeder: random tree, moderate impedances and loads."""
    if n_nodes < 2:
        raise ValueError("need at least 2 nodes")
    nodes = [Node(id=1)]
    branches = []
    for i in range(2, n_nodes + 1):
        parent = int(rng.integers(1, i))
        kw = float(rng.uniform(10.0, 60.0))
        nodes.append(Node(id=i, load_kw=kw, load_kvar=kw * float(rng.uniform(0.2, 0.5))))
        branches.append(
            Branch(
                from_node=parent,
                to_node=i,
                r=float(rng.uniform(0.001, 0.008)),
                x=float(rng.uniform(0.002, 0.012)),
            )
        )
    return FeederModel(
        nodes=tuple(nodes),
        branches=tuple(branches),
        slack_node=1,
        base_kva=base_kva,
        base_kv=base_kv,
    )
