import numpy as np
import pytest

from hetmile.hetgraph import TypeRegistry, build_graph


def random_typed_graph(rng, max_nodes=50, num_types=None, edge_density=2.0,
                       same_type_relation=False):
    """Random heterogeneous graph for property tests.

    Types get random block sizes; one relation per consecutive type pair,
    optionally one same-type relation on type 0. Weights uniform in
    [0.5, 2.5).
    """
    t = int(num_types) if num_types else int(rng.integers(2, 4))
    counts = rng.integers(1, max(2, max_nodes // t), size=t)
    while counts.sum() > max_nodes:
        counts[np.argmax(counts)] -= 1
    reg = TypeRegistry()
    for i in range(t):
        reg.add_node_type(f"t{i}")
    for i in range(t - 1):
        reg.add_edge_type(f"r{i}{i + 1}", i, i + 1)
    if same_type_relation:
        reg.add_edge_type("loop0", 0, 0)
    node_type = np.concatenate([np.full(c, i, dtype=np.int32)
                                for i, c in enumerate(counts)])
    offsets = np.concatenate([[0], np.cumsum(counts)])
    edges = {}
    for e, (_, st, dt) in enumerate(reg.edge_types):
        n_st = counts[st]
        n_dt = counts[dt]
        m = int(rng.integers(0, max(1, int(edge_density * (n_st + n_dt))) + 1))
        us = rng.integers(offsets[st], offsets[st + 1], size=m)
        vs = rng.integers(offsets[dt], offsets[dt + 1], size=m)
        keep = us != vs
        ws = rng.uniform(0.5, 2.5, size=m)
        edges[e] = (us[keep], vs[keep], ws[keep])
    return build_graph(reg, node_type, edges)


def bfs_two_hop(g, u):
    """Brute-force 1-hop + 2-hop neighborhood (oracle for tests)."""
    one = {v for v, _ in g.neighbors(u)}
    two = set()
    for v in one:
        two |= {w for w, _ in g.neighbors(v)}
    return (one | two) - {u}


def bipartite_pairs_graph(k):
    """k author pairs, each pair sharing two private papers; every node has
    a same-type co-neighbor partner so matching halves the graph exactly."""
    reg = TypeRegistry()
    a = reg.add_node_type("author")
    p = reg.add_node_type("paper")
    reg.add_edge_type("writes", a, p)
    node_type = np.array([0] * (2 * k) + [1] * (2 * k), dtype=np.int32)
    us, vs = [], []
    for i in range(k):
        a1, a2 = 2 * i, 2 * i + 1
        p1, p2 = 2 * k + 2 * i, 2 * k + 2 * i + 1
        for a_ in (a1, a2):
            for p_ in (p1, p2):
                us.append(a_)
                vs.append(p_)
    edges = {0: (np.array(us), np.array(vs), np.ones(len(us)))}
    return build_graph(reg, node_type, edges)


@pytest.fixture
def ap_graph():
    """Two author pairs sharing papers (8 nodes), the smoke-test standard."""
    return bipartite_pairs_graph(2)
