"""Gas network topology."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

from .errors import SpecError, TopologyError
from .gas_dynamics import PipelineParams

SOURCE = "source"
JUNCTION = "junction"
LOAD = "load"
ROLES = (SOURCE, JUNCTION, LOAD)


@dataclass(frozen=True)
class GasNode:
    id: str
    role: str = JUNCTION
    p_min: float = 1.0e6
    p_max: float = 8.0e6

    def __post_init__(self):
        if self.role not in ROLES:
            raise SpecError(f"node {self.id}: role must be one of {ROLES}, got {self.role!r}")
        if not 0 < self.p_min < self.p_max:
            raise SpecError(f"node {self.id}: need 0 < p_min < p_max")


@dataclass(frozen=True)
class Pipeline:
    id: str
    from_node: str
    to_node: str
    params: PipelineParams
    segments: int | None = None

    @property
    def K(self) -> int:
        return self.segments if self.segments else self.params.default_segments()


@dataclass(frozen=True)
class GasNetworkSpec:
    """Nodes and directed pipelines; flow direction is from ``from_node`` to ``to_node``."""

    nodes: tuple[GasNode, ...]
    pipelines: tuple[Pipeline, ...]
    name: str = "network"
    _index: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "pipelines", tuple(self.pipelines))
        ids = [n.id for n in self.nodes]
        if len(set(ids)) != len(ids):
            raise SpecError("duplicate node ids")
        pids = [p.id for p in self.pipelines]
        if len(set(pids)) != len(pids):
            raise SpecError("duplicate pipeline ids")
        index = {nid: i for i, nid in enumerate(ids)}
        object.__setattr__(self, "_index", index)
        for p in self.pipelines:
            for end in (p.from_node, p.to_node):
                if end not in index:
                    raise TopologyError(f"pipeline {p.id} references unknown node {end!r}")
            if p.from_node == p.to_node:
                raise TopologyError(f"pipeline {p.id} is a self loop")
        if not self.pipelines:
            raise TopologyError("network has no pipelines")
        self._check_connected()
        for n in self.nodes:
            if n.role == SOURCE and not any(p.from_node == n.id for p in self.pipelines):
                raise TopologyError(f"source {n.id} has no outgoing pipeline")
        if not self.sources:
            raise TopologyError("network needs at least one source node")

    def _check_connected(self):
        adj = {n.id: [] for n in self.nodes}
        for p in self.pipelines:
            adj[p.from_node].append(p.to_node)
            adj[p.to_node].append(p.from_node)
        seen = {self.nodes[0].id}
        queue = deque(seen)
        while queue:
            for nxt in adj[queue.popleft()]:
                if nxt not in seen:
                    seen.add(nxt)
                    queue.append(nxt)
        if len(seen) != len(self.nodes):
            missing = sorted(set(adj) - seen)
            raise TopologyError(f"network is disconnected; unreachable nodes {missing}")

    def node_index(self, node_id: str) -> int:
        return self._index[node_id]

    def node(self, node_id: str) -> GasNode:
        return self.nodes[self._index[node_id]]

    def pipeline(self, pipe_id: str) -> Pipeline:
        for p in self.pipelines:
            if p.id == pipe_id:
                return p
        raise KeyError(pipe_id)

    @property
    def sources(self) -> list[str]:
        return [n.id for n in self.nodes if n.role == SOURCE]

    @property
    def loads(self) -> list[str]:
        return [n.id for n in self.nodes if n.role == LOAD]

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "nodes": [
                {"id": n.id, "role": n.role, "p_min": n.p_min, "p_max": n.p_max}
                for n in self.nodes
            ],
            "pipelines": [
                {
                    "id": p.id,
                    "from": p.from_node,
                    "to": p.to_node,
                    "segments": p.segments,
                    **{k: v for k, v in p.params.to_dict().items() if k != "name"},
                }
                for p in self.pipelines
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GasNetworkSpec":
        try:
            nodes = [GasNode(**n) for n in data["nodes"]]
            pipes = []
            for raw in data["pipelines"]:
                raw = dict(raw)
                pid = raw.pop("id")
                params = PipelineParams.from_dict({**raw, "name": pid})
                pipes.append(Pipeline(pid, raw["from"], raw["to"], params, raw.get("segments")))
        except (KeyError, TypeError) as exc:
            raise SpecError(f"malformed gas network: {exc}") from exc
        return cls(nodes, pipes, data.get("name", "network"))


def single_pipeline_network(params: PipelineParams, segments: int | None = None) -> GasNetworkSpec:
    """Source -- pipeline -- load network wrapping one pipeline."""
    lo, hi = params.p_min * 0.5, params.p_max * 2.0
    return GasNetworkSpec(
        (GasNode("inlet", SOURCE, lo, hi), GasNode("outlet", LOAD, lo, hi)),
        (Pipeline(params.name, "inlet", "outlet", params, segments),),
        name=params.name,
    )
