"""Synthetic heterogeneous stochastic-block-model datasets for desk-scale
benchmarking: typed node blocks chained by one relation per consecutive type
pair, with planted communities shared across types."""

import json
import os

import numpy as np

from .errors import ConfigError


def generate_sbm(n_per_type, types=3, communities=4, p_in=0.01, p_out=0.0005,
                 seed=0):
    """Sample edges of a typed SBM; returns (edge arrays per relation,
    community labels per global node id).

    Node ids are laid out in type blocks: type t owns
    [t*n_per_type, (t+1)*n_per_type). Communities interleave within each
    block (local index mod communities) and are shared across types; edges
    between consecutive types appear with probability p_in inside a
    community and p_out across.
    """
    if types < 2:
        raise ConfigError("need at least 2 node types")
    if communities < 1:
        raise ConfigError("need at least 1 community")
    if n_per_type < communities:
        raise ConfigError("n_per_type must be >= communities")
    if not (0.0 <= p_out <= p_in <= 1.0):
        raise ConfigError("need 0 <= p_out <= p_in <= 1")
    rng = np.random.default_rng(seed)
    n = n_per_type
    labels = np.tile(np.arange(n, dtype=np.int64) % communities, types)

    members = [np.flatnonzero(np.arange(n) % communities == c)
               for c in range(communities)]
    relations = []
    for t in range(types - 1):
        us, vs = [], []
        for ca in range(communities):
            for cb in range(communities):
                p = p_in if ca == cb else p_out
                if p <= 0.0:
                    continue
                na, nb = len(members[ca]), len(members[cb])
                total = na * nb
                m = rng.binomial(total, p)
                if m == 0:
                    continue
                flat = rng.choice(total, size=m, replace=False)
                ia = members[ca][flat // nb]
                ib = members[cb][flat % nb]
                us.append(ia + t * n)
                vs.append(ib + (t + 1) * n)
        if us:
            relations.append((np.concatenate(us), np.concatenate(vs)))
        else:
            relations.append((np.empty(0, np.int64), np.empty(0, np.int64)))
    return relations, labels


def write_dataset(out_dir, n_per_type, types=3, communities=4, p_in=0.01,
                  p_out=0.0005, seed=0):
    """Generate and write edges.tsv / nodes.tsv / labels.tsv / schema.cfg.

    Deterministic per seed, byte for byte. Returns a dict of file paths.
    """
    relations, labels = generate_sbm(n_per_type, types, communities, p_in,
                                     p_out, seed)
    os.makedirs(out_dir, exist_ok=True)
    type_names = [f"t{t}" for t in range(types)]
    paths = {
        "edges": os.path.join(out_dir, "edges.tsv"),
        "nodes": os.path.join(out_dir, "nodes.tsv"),
        "labels": os.path.join(out_dir, "labels.tsv"),
        "schema": os.path.join(out_dir, "schema.cfg"),
        "meta": os.path.join(out_dir, "meta.json"),
    }
    with open(paths["schema"], "w") as fh:
        for name in type_names:
            fh.write(f"node_type {name}\n")
        for t in range(types - 1):
            fh.write(f"edge_type r{t}{t + 1} {type_names[t]} "
                     f"{type_names[t + 1]}\n")
        fh.write("node_file nodes.tsv\n")
    with open(paths["nodes"], "w") as fh:
        for t in range(types):
            for i in range(n_per_type):
                fh.write(f"{t * n_per_type + i}\t{type_names[t]}\n")
    n_edges = 0
    with open(paths["edges"], "w") as fh:
        for t, (us, vs) in enumerate(relations):
            order = np.lexsort((vs, us))
            for u, v in zip(us[order], vs[order]):
                fh.write(f"{u}\t{v}\tr{t}{t + 1}\n")
            n_edges += len(us)
    with open(paths["labels"], "w") as fh:
        for i, c in enumerate(labels):
            fh.write(f"{i}\t{c}\n")
    meta = {"n_per_type": n_per_type, "types": types,
            "communities": communities, "p_in": p_in, "p_out": p_out,
            "seed": seed, "num_nodes": int(types * n_per_type),
            "num_edges": int(n_edges),
            "meta_path": "-".join(type_names + type_names[-2::-1])}
    with open(paths["meta"], "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    return paths
