"""Cluster topology model, reduce schedules, simulated execution, cost model.

The modeled machine is four groups of 24 dual-processor nodes whose groups
form the vertices of a tetrahedron: every pair of groups shares one switch,
and each node's three NICs map to the three switch edges leaving its group.
One extra dual-processor server node hangs off a gigabit uplink and hosts the
master process, giving 4*24*2 + 2 = 194 processes.

Three reduce schedules combine one vector per process into an elementwise sum
at the master:

* ``plan_naive``     every process ships its vector straight to the master;
                     the 192 worker vectors serialize over the gigabit uplink.
* ``plan_binomial``  the generic library tree: pair-wise combines over
                     ceil(log2 n) stages, topology-oblivious TCP transfers.
* ``plan_staged``    the topology-aware schedule: (1) node-local shared-memory
                     combine on all 97 nodes, (2) the 24 first-group nodes
                     reduce onto their second-group counterparts in parallel
                     (and third onto fourth), (3) each surviving group splits
                     into sets of four whose members feed the set root over
                     three distinct NICs simultaneously, (4) the 12 roots feed
                     the master over the gigabit uplink.

Execution (value correctness) and cost (seconds) are decoupled:
``execute_reduce`` actually combines payload vectors with a deterministic,
plan-declared combine order, while ``cost_of`` turns the same plan into
per-stage seconds under a bandwidth model whose defaults are calibrated so a
6.6e6-byte vector reproduces the reference stage timings
(0.18 / 0.66 / 0.9 / 3.16 s, naive 10.1 s, library tree 8.5 s over 8 stages).
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .nn import gradient_flops

# calibration targets, all for one 6.6e6-byte vector:
#   node-local stage 0.18 s of which 0.005 s is the combine add
#   one 100 Mb/s NIC hop 0.66 s  -> efficiency 0.8 of the 0.528 s ideal
#   three NICs into one node aggregate to 185 Mb/s
#   final gigabit stage 3.16 s including synchronization slack
#   8-stage library tree totals 8.5 s
_REF_BYTES = 6.6e6
SHM_BANDWIDTH = _REF_BYTES / (0.18 - 0.005)
TCP_EFFICIENCY = (_REF_BYTES * 8 / 100e6) / (8.5 / 8 - 0.005)
GIGABIT_SYNC_SECONDS = 3.16 - 12 * _REF_BYTES * 8 / 1e9 - 0.005
MULTI_NIC_EFFICIENCY = 185.0 / 300.0


class PlanError(ValueError):
    """Plan and topology disagree, or a plan invariant fails."""


@dataclass(frozen=True)
class ClusterTopology:
    groups: int = 4
    nodes_per_group: int = 24
    procs_per_node: int = 2
    nics_per_node: int = 3
    switches: tuple[tuple[int, int], ...] = ((0, 1), (0, 2), (0, 3),
                                             (1, 2), (1, 3), (2, 3))
    servers: int = 2  # server-resident processes, all on one server node

    @property
    def worker_nodes(self) -> int:
        return self.groups * self.nodes_per_group

    @property
    def server_node(self) -> int:
        return self.worker_nodes

    @property
    def worker_procs(self) -> int:
        return self.worker_nodes * self.procs_per_node

    @property
    def total_procs(self) -> int:
        return self.worker_procs + self.servers

    @property
    def master(self) -> int:
        return self.worker_procs  # first server-resident process

    def node_of_proc(self, pid: int) -> int:
        if pid < self.worker_procs:
            return pid // self.procs_per_node
        return self.server_node

    def group_of_node(self, node: int) -> int:
        return node // self.nodes_per_group if node < self.worker_nodes else -1

    def incident_edges(self, group: int) -> list[tuple[int, int]]:
        return sorted(e for e in self.switches if group in e)

    def nic_index(self, group: int, edge: tuple[int, int]) -> int:
        return self.incident_edges(group).index(edge)

    def validate(self) -> None:
        pairs = Counter(tuple(sorted(e)) for e in self.switches)
        for a in range(self.groups):
            for b in range(a + 1, self.groups):
                if pairs.get((a, b), 0) != 1:
                    raise PlanError(f"groups {a},{b} must share exactly one switch")
            if len(self.incident_edges(a)) != self.nics_per_node:
                raise PlanError(f"group {a} has {len(self.incident_edges(a))} edges "
                                f"but nodes carry {self.nics_per_node} NICs")


def tetrahedron_topology() -> ClusterTopology:
    """The canonical 4-group/24-node/2-proc topology (192 + 2 processes)."""
    topo = ClusterTopology()
    topo.validate()
    return topo


def bisection_bandwidth_gbps(topo: ClusterTopology, switch_gbps: float = 3.8) -> float:
    """Worst-case aggregate capacity between two halves of the groups."""
    best = None
    g = topo.groups
    for mask in range(1, 1 << g):
        side = [i for i in range(g) if mask >> i & 1]
        if len(side) != g // 2:
            continue
        crossing = sum(1 for a, b in topo.switches if (a in side) != (b in side))
        cap = crossing * switch_gbps
        best = cap if best is None else min(best, cap)
    return best if best is not None else 0.0


@dataclass(frozen=True)
class Transfer:
    src: int
    dst: int
    kind: str  # 'shm' | 'nic' | 'gigabit' | 'tcp'
    src_nic: int = -1
    dst_nic: int = -1


@dataclass
class ReducePlan:
    name: str
    n_procs: int
    master: int
    stages: list[list[Transfer]]

    def transfer_counts(self) -> list[int]:
        return [len(s) for s in self.stages]


def plan_naive(topo: ClusterTopology) -> ReducePlan:
    """All vectors straight to the master: workers over the gigabit uplink,
    the master's node-mate through shared memory."""
    master = topo.master
    stage = [Transfer(pid, master, "gigabit") for pid in range(topo.worker_procs)]
    for pid in range(topo.worker_procs, topo.total_procs):
        if pid != master:
            stage.append(Transfer(pid, master, "shm"))
    return ReducePlan("naive", topo.total_procs, master, [stage])


def plan_binomial(topo: ClusterTopology) -> ReducePlan:
    """Library-style binomial tree over all processes, TCP everywhere."""
    n = topo.total_procs
    # rank 0 is the master; workers keep their ids shifted up by one slot
    order = [topo.master] + [p for p in range(n) if p != topo.master]
    stages = []
    span = 1
    while span < n:
        stage = [Transfer(order[r], order[r - span], "tcp")
                 for r in range(span, n, 2 * span)]
        stages.append(stage)
        span *= 2
    return ReducePlan("binomial", n, topo.master, stages)


def plan_staged(topo: ClusterTopology) -> ReducePlan:
    """The four-stage topology-aware schedule described in the module docstring."""
    if topo.procs_per_node != 2:
        raise PlanError("staged plan assumes dual-processor nodes")
    if topo.nodes_per_group % 4 != 0:
        raise PlanError("staged plan splits each group into sets of four nodes")
    ppn = topo.procs_per_node
    npg = topo.nodes_per_group

    def node_proc(node: int) -> int:
        return node * ppn

    # stage 1: second processor of every node (server included) combines into
    # the first through shared memory
    stage1 = [Transfer(node_proc(nd) + 1, node_proc(nd), "shm")
              for nd in range(topo.worker_nodes)]
    stage1.append(Transfer(topo.master + 1, topo.master, "shm"))

    # stage 2: group 2g -> group 2g+1, counterpart nodes in parallel over the
    # switch the two groups share
    stage2 = []
    sinks = []
    for ga in range(0, topo.groups, 2):
        gb = ga + 1
        edge = (ga, gb)
        nic_a = topo.nic_index(ga, edge)
        nic_b = topo.nic_index(gb, edge)
        sinks.append(gb)
        for i in range(npg):
            src_node = ga * npg + i
            dst_node = gb * npg + i
            stage2.append(Transfer(node_proc(src_node), node_proc(dst_node),
                                   "nic", nic_a, nic_b))

    # stage 3: inside each surviving group, sets of four nodes reduce onto
    # their root, the three members using three distinct NICs
    stage3 = []
    roots = []
    for g in sinks:
        for s in range(npg // 4):
            root = g * npg + 4 * s
            roots.append(root)
            for m in (1, 2, 3):
                stage3.append(Transfer(node_proc(root + m), node_proc(root),
                                       "nic", m - 1, m - 1))

    # stage 4: the set roots feed the master over the gigabit uplink
    stage4 = [Transfer(node_proc(r), topo.master, "gigabit") for r in roots]

    return ReducePlan("staged", topo.total_procs, topo.master,
                      [stage1, stage2, stage3, stage4])


PLAN_BUILDERS = {
    "naive": plan_naive,
    "binomial": plan_binomial,
    "staged": plan_staged,
}


# ---------------------------------------------------------------------------
# execution and validation


def execute_reduce(plan: ReducePlan, vectors) -> np.ndarray:
    """Combine the per-process vectors along the plan; returns the master's sum.

    Combine order is fixed: stages in order, transfers within a stage in
    declared order, which makes float32 reductions bit-reproducible.
    """
    if len(vectors) != plan.n_procs:
        raise PlanError(f"plan expects {plan.n_procs} vectors, got {len(vectors)}")
    first = np.asarray(vectors[0])
    vals = []
    for v in vectors:
        a = np.asarray(v)
        if a.shape != first.shape:
            raise PlanError("all process vectors must share one shape")
        vals.append(a.copy())
    for stage in plan.stages:
        for t in stage:
            vals[t.dst] = vals[t.dst] + vals[t.src]
    return vals[plan.master]


def trace_contributions(plan: ReducePlan) -> Counter:
    """Symbolic run: which process contributions reach the master, how often."""
    vals = [Counter({pid: 1}) for pid in range(plan.n_procs)]
    for stage in plan.stages:
        for t in stage:
            vals[t.dst] = vals[t.dst] + vals[t.src]
    return vals[plan.master]


def validate_plan(plan: ReducePlan, topo: ClusterTopology) -> None:
    """Check conservation and the per-stage channel exclusivity invariant."""
    if plan.n_procs != topo.total_procs:
        raise PlanError(f"plan covers {plan.n_procs} procs, topology has "
                        f"{topo.total_procs}")
    counts = trace_contributions(plan)
    if set(counts) != set(range(plan.n_procs)) or set(counts.values()) != {1}:
        raise PlanError(f"{plan.name}: contributions are not exactly-once: {counts}")
    for si, stage in enumerate(plan.stages):
        used: Counter = Counter()
        for t in stage:
            if t.kind == "shm":
                used[("shm", topo.node_of_proc(t.src))] += 1
            elif t.kind == "nic":
                used[("nic", topo.node_of_proc(t.src), t.src_nic)] += 1
                used[("nic", topo.node_of_proc(t.dst), t.dst_nic)] += 1
        dup = {k: c for k, c in used.items() if c > 1}
        if dup:
            raise PlanError(f"{plan.name} stage {si}: channel conflicts {dup}")


# ---------------------------------------------------------------------------
# cost model


@dataclass(frozen=True)
class CostModel:
    """Per-channel bandwidth/efficiency parameters turning a plan into seconds.

    Stage time = the slowest channel's transfer time, plus one combine-add per
    distinct channel feeding the busiest destination (serialized arrivals on a
    shared channel overlap their adds with later transfers), plus the
    synchronization constant on a gigabit stage that follows earlier stages.
    """

    shm_bandwidth: float = SHM_BANDWIDTH          # bytes/s
    nic_bandwidth: float = 100e6                  # bits/s per NIC
    nic_efficiency: float = 0.8
    multi_nic_agg_efficiency: float = MULTI_NIC_EFFICIENCY
    gigabit_bandwidth: float = 1e9                # bits/s
    gigabit_stage_seconds: float = GIGABIT_SYNC_SECONDS
    tcp_efficiency: float = TCP_EFFICIENCY
    add_seconds_per_vector: float = 0.005
    per_proc_flops: float = 1.07e9                # gradient compute rate

    def validate(self) -> None:
        for name in ("shm_bandwidth", "nic_bandwidth", "gigabit_bandwidth",
                     "per_proc_flops"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("nic_efficiency", "multi_nic_agg_efficiency", "tcp_efficiency"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValueError(f"{name} must be in (0, 1], got {v}")


@dataclass
class StageCost:
    index: int
    transfers: int
    seconds: float
    bandwidth_seconds: float
    add_seconds: float
    constant_seconds: float


@dataclass
class CostReport:
    plan: str
    vector_bytes: int
    stages: list[StageCost]
    total_seconds: float

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("plan,stage,transfers,seconds\n")
            for s in self.stages:
                fh.write(f"{self.plan},{s.index + 1},{s.transfers},{s.seconds:.6f}\n")
            fh.write(f"{self.plan},total,{sum(s.transfers for s in self.stages)},"
                     f"{self.total_seconds:.6f}\n")


def cost_of(plan: ReducePlan, vector_bytes: int, model: CostModel | None = None,
            topo: ClusterTopology | None = None) -> CostReport:
    """Per-stage and total seconds for moving ``vector_bytes`` along the plan."""
    if vector_bytes <= 0:
        raise ValueError("vector_bytes must be positive")
    model = CostModel() if model is None else model
    model.validate()
    topo = tetrahedron_topology() if topo is None else topo
    bits = vector_bytes * 8.0
    stages = []
    total = 0.0
    for si, stage in enumerate(plan.stages):
        nic_in: Counter = Counter()
        for t in stage:
            if t.kind == "nic":
                nic_in[topo.node_of_proc(t.dst)] += 1
        channel_time: dict = {}
        dst_channels: dict = {}
        for ti, t in enumerate(stage):
            if t.kind == "shm":
                key = ("shm", topo.node_of_proc(t.src))
                dt = vector_bytes / model.shm_bandwidth
            elif t.kind == "nic":
                eff = (model.multi_nic_agg_efficiency
                       if nic_in[topo.node_of_proc(t.dst)] >= 2
                       else model.nic_efficiency)
                key = ("nic", topo.node_of_proc(t.src), t.src_nic)
                dt = bits / (model.nic_bandwidth * eff)
            elif t.kind == "tcp":
                key = ("tcp", ti)
                dt = bits / (model.nic_bandwidth * model.tcp_efficiency)
            elif t.kind == "gigabit":
                key = ("gigabit", topo.node_of_proc(t.dst))
                dt = bits / model.gigabit_bandwidth
            else:
                raise PlanError(f"unknown channel kind {t.kind!r}")
            channel_time[key] = channel_time.get(key, 0.0) + dt
            dst_channels.setdefault(t.dst, set()).add(key)
        bw = max(channel_time.values()) if channel_time else 0.0
        adds = (max(len(ch) for ch in dst_channels.values()) if dst_channels else 0
                ) * model.add_seconds_per_vector
        const = (model.gigabit_stage_seconds
                 if si > 0 and any(t.kind == "gigabit" for t in stage) else 0.0)
        seconds = bw + adds + const
        stages.append(StageCost(si, len(stage), seconds, bw, adds, const))
        total += seconds
    return CostReport(plan.name, vector_bytes, stages, total)


def reduce_speedup_curve(n_patterns_list, model: CostModel | None = None,
                         topo: ClusterTopology | None = None,
                         shape: tuple[int, int, int] = (400, 480, 3203),
                         vector_bytes: int = int(_REF_BYTES)):
    """Training speedup from swapping the library reduce for the staged one.

    speedup(n_p) = (T_grad + T_library) / (T_grad + T_staged) with T_grad the
    cluster-wide gradient time at the configured per-processor flop rate;
    decreasing in n_p and tending to 1.
    """
    model = CostModel() if model is None else model
    topo = tetrahedron_topology() if topo is None else topo
    t_lib = cost_of(plan_binomial(topo), vector_bytes, model, topo).total_seconds
    t_opt = cost_of(plan_staged(topo), vector_bytes, model, topo).total_seconds
    rate = topo.total_procs * model.per_proc_flops
    n_i, n_h, n_o = shape
    rows = []
    for n_p in n_patterns_list:
        t_grad = gradient_flops(int(n_p), n_i, n_h, n_o) / rate
        rows.append((int(n_p), t_grad, (t_grad + t_lib) / (t_grad + t_opt)))
    return rows


def write_speedup_csv(rows, path) -> None:
    with open(path, "w") as fh:
        fh.write("patterns,grad_seconds,speedup\n")
        for n_p, t_grad, s in rows:
            fh.write(f"{n_p},{t_grad:.6f},{s:.6f}\n")


# ---------------------------------------------------------------------------
# topology description file


def topology_to_dict(topo: ClusterTopology, model: CostModel | None = None) -> dict:
    model = CostModel() if model is None else model
    return {
        "groups": topo.groups,
        "nodes_per_group": topo.nodes_per_group,
        "procs_per_node": topo.procs_per_node,
        "nics_per_node": topo.nics_per_node,
        "switches": [list(e) for e in topo.switches],
        "servers": topo.servers,
        "bandwidths": {
            "shm_bytes_per_second": model.shm_bandwidth,
            "nic_bits_per_second": model.nic_bandwidth,
            "nic_efficiency": model.nic_efficiency,
            "multi_nic_agg_efficiency": model.multi_nic_agg_efficiency,
            "gigabit_bits_per_second": model.gigabit_bandwidth,
            "gigabit_stage_seconds": model.gigabit_stage_seconds,
            "tcp_efficiency": model.tcp_efficiency,
            "add_seconds_per_vector": model.add_seconds_per_vector,
            "per_proc_flops": model.per_proc_flops,
        },
    }


def write_topology_json(path, topo: ClusterTopology | None = None,
                        model: CostModel | None = None) -> None:
    topo = tetrahedron_topology() if topo is None else topo
    with open(path, "w") as fh:
        json.dump(topology_to_dict(topo, model), fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_topology_json(path) -> tuple[ClusterTopology, CostModel]:
    with open(path) as fh:
        d = json.load(fh)
    topo = ClusterTopology(
        groups=d["groups"], nodes_per_group=d["nodes_per_group"],
        procs_per_node=d["procs_per_node"], nics_per_node=d["nics_per_node"],
        switches=tuple(tuple(e) for e in d["switches"]), servers=d["servers"])
    topo.validate()
    b = d["bandwidths"]
    model = CostModel(
        shm_bandwidth=b["shm_bytes_per_second"],
        nic_bandwidth=b["nic_bits_per_second"],
        nic_efficiency=b["nic_efficiency"],
        multi_nic_agg_efficiency=b["multi_nic_agg_efficiency"],
        gigabit_bandwidth=b["gigabit_bits_per_second"],
        gigabit_stage_seconds=b["gigabit_stage_seconds"],
        tcp_efficiency=b["tcp_efficiency"],
        add_seconds_per_vector=b["add_seconds_per_vector"],
        per_proc_flops=b["per_proc_flops"])
    model.validate()
    return topo, model
