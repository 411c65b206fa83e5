"""Scenario builders for the benchmark and randomized property suites."""

from __future__ import annotations

import random

from ..admin import Topology
from ..model import Endpoint
from .scenario import ChurnSpec, LookupSpec, NetSpec, NodeSpec, Scenario, TaskSpec

INTRA_HOP = 1
INTER_HOP = 4
HOP_THRESHOLD = 3


def endpoints(n: int, port: int = 7401) -> list[Endpoint]:
    return [Endpoint(f"10.{i // 250}.{(i % 250) // 50}.{i % 50 + 1}", port) for i in range(n)]


def clustered_topology(eps: list[Endpoint], g: int) -> Topology:
    """Node ``i`` sits in cluster ``i mod g``; one hop inside a cluster, four across."""
    triples = [(a, eps[j], INTRA_HOP) for i, a in enumerate(eps) for j in range(i + g, len(eps), g)]
    return Topology.from_triples(eps, triples, default_hop=INTER_HOP)


def _scenario(eps, g, seed, horizon, **kw) -> Scenario:
    nodes = kw.pop("nodes", None) or tuple(NodeSpec(ep) for ep in eps)
    return Scenario(seed=seed, nodes=tuple(nodes), topology=clustered_topology(eps, g),
                    hop_threshold=HOP_THRESHOLD, horizon=horizon, **kw)


def traffic_scenario(n: int, g: int, seed: int = 0, lookups: int = 20, providers: int = 2) -> Scenario:
    """Every service lives in exactly one cluster; lookups target services of other clusters.

    The first lookups start once elections and the first cross-domain refresh are done.
    """
    rng = random.Random(f"traffic/{seed}/{n}/{g}")
    eps = endpoints(n)
    clusters = [eps[c::g] for c in range(g)]
    services = {}
    for c, members in enumerate(clusters):
        for ep in rng.sample(members, min(providers, len(members))):
            services[ep] = frozenset({f"S{c}"})
    qs = []
    for i in range(lookups):
        c = rng.randrange(g)
        other = rng.choice([d for d in range(g) if d != c]) if g > 1 else c
        qs.append(LookupSpec(30.0 + i, rng.choice(clusters[c]), f"S{other}"))
    return _scenario(eps, g, seed, horizon=30.0 + lookups + 15, services=services,
                     lookups=tuple(qs), baseline=True, name=f"traffic-n{n}-g{g}",
                     node_configs={"default": {"balancing": False}})


TASK_CLASSES = {
    "cpu": (0.30, 0.05),
    "ram": (0.05, 0.30),
    "both": (0.20, 0.20),
}


def workload_scenario(seed: int, balancing: bool = True, n: int = 40, g: int = 4, horizon: float = 300.0) -> Scenario:
    """A quarter of the nodes receive a stream of cpu-, ram- and mixed-heavy tasks."""
    rng = random.Random(f"workload/{seed}")
    eps = endpoints(n)
    nodes = [NodeSpec(ep, round(rng.uniform(1, 8), 2), round(rng.uniform(0.05, 0.35), 2),
                      round(rng.uniform(0.10, 0.45), 2)) for ep in eps]
    hot = rng.sample(eps, n // 4)
    tasks = []
    t = 10.0
    while t < horizon - 50:
        kind = rng.choice(sorted(TASK_CLASSES))
        cpu, ram = TASK_CLASSES[kind]
        tasks.append(TaskSpec(round(t, 3), rng.choice(hot), cpu, ram, round(rng.uniform(40, 120), 3)))
        t += rng.expovariate(1.0)
    return _scenario(eps, g, seed, horizon, nodes=nodes, workload=tuple(tasks),
                     node_configs={"default": {"balancing": balancing}}, name=f"workload-{seed}")


FAST = {"gl_refresh_period": 20.0, "services_period_multiplier": 50}


def safety_scenario(seed: int, max_n: int = 200, max_g: int = 10) -> Scenario:
    """Random sizes, lossy links and crashes up to time T, then a clean settling period."""
    rng = random.Random(f"safety/{seed}")
    n = rng.choice([rng.randint(2, 30), rng.randint(2, 60), rng.randint(2, max_n)])
    g = rng.randint(1, min(max_g, n))
    eps = endpoints(n)
    fault_end = rng.uniform(20, 80)
    churn = []
    for ep in rng.sample(eps, rng.randint(0, max(1, n // 5))):
        down = rng.uniform(1, fault_end - 1)
        churn.append(ChurnSpec(round(down, 3), ep, "DOWN"))
        if rng.random() < 0.7:
            churn.append(ChurnSpec(round(rng.uniform(down, fault_end), 3), ep, "UP"))
    churn.sort(key=lambda c: (c.time, c.node))
    nodes = tuple(NodeSpec(ep, round(rng.uniform(0, 10), 2), start=round(rng.uniform(0, 10), 3)) for ep in eps)
    net = NetSpec(0.01, rng.uniform(0.05, 1.0), round(rng.uniform(0, 0.2), 3), round(fault_end, 3))
    settle = 4 * FAST["gl_refresh_period"] + 30
    return _scenario(eps, g, seed, horizon=round(fault_end + settle, 3), nodes=nodes, churn=tuple(churn),
                     net=net, node_configs={"default": dict(FAST, balancing=False)}, name=f"safety-{seed}")


def discovery_scenario(seed: int) -> Scenario:
    """Lossy start with transient crashes, then lookups for a mix of present and absent services."""
    rng = random.Random(f"discovery/{seed}")
    n = rng.randint(3, 40)
    g = rng.randint(1, min(6, n))
    eps = endpoints(n)
    pool = [f"S{i}" for i in range(rng.randint(2, 12))]
    services = {}
    for ep in eps:
        k = rng.choice([0, 0, 1, 1, 2])
        if k:
            services[ep] = frozenset(rng.sample(pool, k))
    fault_end = rng.uniform(10, 40)
    churn = []
    for ep in rng.sample(eps, rng.randint(0, max(1, n // 6))):
        down = rng.uniform(1, fault_end - 2)
        churn += [ChurnSpec(round(down, 3), ep, "DOWN"), ChurnSpec(round(rng.uniform(down, fault_end), 3), ep, "UP")]
    churn.sort(key=lambda c: (c.time, c.node))
    start = fault_end + 3 * FAST["gl_refresh_period"] + 30
    qs = tuple(LookupSpec(round(start + 2 * i, 3), rng.choice(eps), rng.choice(pool + ["ABSENT"])) for i in range(10))
    net = NetSpec(0.01, 0.2, round(rng.uniform(0, 0.2), 3), round(fault_end, 3))
    cfg = {"gl_refresh_period": FAST["gl_refresh_period"], "balancing": False}
    return _scenario(eps, g, seed, horizon=qs[-1].time + 15, services=services, lookups=qs, churn=tuple(churn),
                     net=net, node_configs={"default": cfg}, name=f"discovery-{seed}")
