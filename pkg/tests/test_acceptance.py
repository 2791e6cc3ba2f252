"""Acceptance suite: one test per criterion, each printing a summary line.

Criteria 6 and 7 share one session-scoped desk-scale benchmark on a ~20k-node
synthetic SBM; criterion 8 needs real datasets and is skipped unless the
HETMILE_DBLP_DIR / HETMILE_IMDB_DIR environment variables point at them.
"""

import os
import time

import numpy as np
import pytest

from hetmile.cli import PipelineConfig, execute_pipeline, main
from hetmile.coarsen import (CoarsenConfig, build_coarse_graph,
                             match_jaccard_max, match_jaccard_wrs, match_lsh,
                             minhash_signature)
from hetmile.evaluate import link_prediction, load_labels, node_classification
from hetmile.hetgraph import load_graph
from hetmile.refine import RefinerParams, hgcn_forward, refine_loss_and_grads
from hetmile.synth import write_dataset

from conftest import random_typed_graph
from test_coarsen import oracle_greedy_max, partition_of, wrs_fixture
from test_refine import dense_oracle_forward


def report(num, text):
    print(f"[criterion {num}] PASS: {text}")


class TestCriterion1MatchingOracle:
    def test_greedy_matcher_equals_bruteforce_oracle(self):
        t0 = time.perf_counter()
        rng = np.random.default_rng(1001)
        agree = 0
        for i in range(200):
            g = random_typed_graph(rng, max_nodes=50,
                                   num_types=int(rng.integers(2, 4)),
                                   same_type_relation=bool(rng.integers(2)))
            got = partition_of(match_jaccard_max(g))
            want = oracle_greedy_max(g)
            assert got == want, f"disagreement on random graph {i}"
            agree += 1
        elapsed = time.perf_counter() - t0
        assert elapsed < 60.0
        report(1, f"{agree}/200 random graphs agree with the brute-force "
                  f"greedy oracle in {elapsed:.1f}s")


class TestCriterion2MinhashStatistics:
    def test_mean_agreement_tracks_jaccard(self):
        t0 = time.perf_counter()
        rng = np.random.default_rng(1002)
        union = 100
        j_grid = [round(0.1 * j, 1) for j in range(1, 10)]
        for k in (128, 256, 1024):
            devs = []
            for i in range(1000):
                true_j = j_grid[i % len(j_grid)]
                inter = int(round(true_j * union))
                own = (union - inter) // 2
                ids = rng.choice(2**31, size=union, replace=False)
                shared = set(ids[:inter].tolist())
                sa = shared | set(ids[inter:inter + own].tolist())
                sb = shared | set(ids[inter + own:].tolist())
                assert len(sa & sb) == inter and len(sa | sb) == union
                siga = minhash_signature(sa, k, seed=1002 + i)
                sigb = minhash_signature(sb, k, seed=1002 + i)
                devs.append(abs(float(np.mean(siga == sigb)) - true_j))
            bound = 2.0 / np.sqrt(k)
            mean_dev = float(np.mean(devs))
            assert mean_dev < bound, (k, mean_dev, bound)
        elapsed = time.perf_counter() - t0
        assert elapsed < 60.0
        report(2, f"mean |agreement - J| under 2/sqrt(k) for k in "
                  f"{{128, 256, 1024}} over 1000 pairs each, {elapsed:.1f}s")


class TestCriterion3WeightConservation:
    def test_total_weight_conserved_by_every_matcher(self):
        rng = np.random.default_rng(1003)
        lsh_cfg = CoarsenConfig(strategy="lsh", lsh_k=16, lsh_bands=4, seed=9)
        checked = 0
        for i in range(100):
            g = random_typed_graph(rng, max_nodes=50,
                                   same_type_relation=bool(rng.integers(2)))
            g.self_weights[:] = rng.uniform(0, 2, g.num_nodes) * \
                rng.integers(0, 2, g.num_nodes)
            total = g.total_weight()
            for m in (match_jaccard_max(g, i), match_jaccard_wrs(g, i),
                      match_lsh(g, lsh_cfg, seed=i)):
                g2 = build_coarse_graph(g, m)
                assert abs(g2.total_weight() - total) <= 1e-9 * max(total, 1.0)
                checked += 1
        report(3, f"edge + self weight conserved to 1e-9 across {checked} "
                  f"matcher runs on 100 random graphs")


class TestCriterion4HgcnCorrectness:
    def test_forward_matches_dense_oracle(self):
        t0 = time.perf_counter()
        rng = np.random.default_rng(1004)
        worst = 0.0
        for _ in range(100):
            g = random_typed_graph(rng, max_nodes=30,
                                   same_type_relation=bool(rng.integers(2)))
            g.self_weights[:] = rng.uniform(0, 2, g.num_nodes) * \
                rng.integers(0, 2, g.num_nodes)
            d = int(rng.integers(2, 6))
            layers = int(rng.integers(1, 4))
            params = RefinerParams.init(g.registry, d, layers,
                                        seed=int(rng.integers(10000)))
            h = rng.normal(size=(g.num_nodes, d))
            err = np.max(np.abs(hgcn_forward(g, h, params) -
                                dense_oracle_forward(g, h, params)))
            worst = max(worst, float(err))
            assert err < 1e-10
        self._elapsed_forward = time.perf_counter() - t0
        report(4, f"forward within {worst:.2e} of the dense oracle on 100 "
                  f"graphs ({self._elapsed_forward:.1f}s)")

    def test_training_gradients_match_finite_differences(self):
        t0 = time.perf_counter()
        rng = np.random.default_rng(10041)
        g = random_typed_graph(rng, max_nodes=10, num_types=2,
                               same_type_relation=True)
        assert g.num_nodes <= 10
        g.self_weights[:2] = [0.7, 1.3]
        d = 4
        params = RefinerParams.init(g.registry, d, 2, seed=77)
        h_in = rng.normal(size=(g.num_nodes, d))
        target = rng.normal(size=(g.num_nodes, d))
        _, gW, gq, _ = refine_loss_and_grads(g, h_in, target, params)
        eps = 1e-6
        worst = 0.0
        for l in range(params.layers):
            for bi in range(len(params.branches)):
                for arr, grad in ((params.W[l][bi], gW[l][bi]),
                                  (params.q[l][bi], gq[l][bi])):
                    flat = arr.ravel()
                    gflat = np.asarray(grad).ravel()
                    for i in range(flat.size):
                        orig = flat[i]
                        flat[i] = orig + eps
                        hi = refine_loss_and_grads(g, h_in, target, params)[0]
                        flat[i] = orig - eps
                        lo = refine_loss_and_grads(g, h_in, target, params)[0]
                        flat[i] = orig
                        num = (hi - lo) / (2 * eps)
                        rel = abs(num - gflat[i]) / max(abs(num),
                                                        abs(gflat[i]), 1e-8)
                        worst = max(worst, rel)
                        assert rel < 1e-4
        elapsed = time.perf_counter() - t0
        assert elapsed < 120.0
        report(4, f"analytic gradients within rel {worst:.2e} of central "
                  f"differences on a 10-node fixture ({elapsed:.1f}s)")


class TestCriterion5WrsDistribution:
    def test_partner_frequencies_within_three_points(self):
        g = wrs_fixture()
        counts = {1: 0, 2: 0}
        trials = 10000
        for seed in range(trials):
            m = match_jaccard_wrs(g, seed=seed)
            if m.assignment[0] == m.assignment[2]:
                counts[2] += 1
            else:
                assert m.assignment[0] == m.assignment[1]
                counts[1] += 1
        f1 = counts[1] / trials
        f2 = counts[2] / trials
        # J(u,v1)=0.2, J(u,v2)=0.6 -> p = 0.25 / 0.75
        assert abs(f1 - 0.25) <= 0.03, f1
        assert abs(f2 - 0.75) <= 0.03, f2
        report(5, f"WRS partner frequencies {f1:.3f}/{f2:.3f} vs expected "
                  f"0.25/0.75 over 10000 seeded draws")


# -- desk-scale benchmark (criteria 6 and 7) -----------------------------------

SBM = dict(n_per_type=6667, types=3, communities=4, p_in=0.008,
           p_out=0.0004, seed=42)
PIPE = dict(meta_paths="t0-t1-t2-t1-t0", d=64, strategy="lsh", lsh_k=128,
            lsh_bands=64, walks_per_node=10, walk_length=80, window=5,
            negatives=5, sgns_epochs=5, initial_lr=0.025, refine_layers=2,
            refine_epochs=50, refine_lr=0.01, train_pair="pool", seed=97)


@pytest.fixture(scope="session")
def desk_bench(tmp_path_factory):
    out = tmp_path_factory.mktemp("desk")
    paths = write_dataset(str(out), **SBM)

    def fresh_graph():
        return load_graph(paths["edges"], paths["schema"])

    def cfg_for(levels):
        return PipelineConfig(levels=levels, **PIPE)

    bench = {"f1": {}, "wall": {}, "timings": {}, "auroc": {}}
    t_quality = time.perf_counter()
    for m in (0, 1, 2):
        g = fresh_graph()
        labels = load_labels(paths["labels"], g)
        t0 = time.perf_counter()
        res = execute_pipeline(g, cfg_for(m))
        bench["wall"][m] = time.perf_counter() - t0
        bench["timings"][m] = res.timings
        bench["f1"][m], _ = node_classification(res.e0, labels, folds=10,
                                                seed=5)
        del g, res
    for m in (1, 2):
        g = fresh_graph()
        auc, _ = link_prediction(
            g, lambda residual, s, _m=m:
                execute_pipeline(residual, cfg_for(_m), seed=s).e0,
            holdout=0.10, seed=11, runs=1)
        bench["auroc"][m] = auc
        del g
    bench["quality_seconds"] = time.perf_counter() - t_quality

    # criterion 7 extras: m=3 pipeline and the coarsening-time comparison
    g = fresh_graph()
    t0 = time.perf_counter()
    execute_pipeline(g, cfg_for(3))
    bench["wall"][3] = time.perf_counter() - t0
    del g

    g = fresh_graph()
    t0 = time.perf_counter()
    match_lsh(g, CoarsenConfig(strategy="lsh", lsh_k=128, lsh_bands=64,
                               seed=3))
    bench["lsh_coarsen_seconds"] = time.perf_counter() - t0
    del g
    g = fresh_graph()
    t0 = time.perf_counter()
    match_jaccard_max(g, 3)
    bench["jacc_coarsen_seconds"] = time.perf_counter() - t0
    del g
    return bench


class TestCriterion6EndToEndQuality:
    def test_low_levels_preserve_quality(self, desk_bench):
        f1 = desk_bench["f1"]
        au = desk_bench["auroc"]
        assert f1[1] >= f1[0] - 0.05, (f1[0], f1[1])
        assert f1[2] >= f1[0] - 0.05, (f1[0], f1[2])
        assert au[1] > 0.75, au[1]
        assert au[2] > 0.75, au[2]
        assert desk_bench["quality_seconds"] < 900.0
        report(6, f"micro-F1 m0/m1/m2 = {f1[0]:.4f}/{f1[1]:.4f}/{f1[2]:.4f}; "
                  f"AUROC m1/m2 = {au[1]:.4f}/{au[2]:.4f}; "
                  f"{desk_bench['quality_seconds']:.0f}s < 15 min")


class TestCriterion7SpeedupTrend:
    def test_pipeline_time_shrinks_with_coarsening(self, desk_bench):
        w = desk_bench["wall"]
        assert w[1] < 0.7 * w[0], (w[1], w[0])
        assert w[1] >= w[2] >= w[3], (w[1], w[2], w[3])
        report(7, f"pipeline totals m0..m3 = {w[0]:.0f}/{w[1]:.0f}/"
                  f"{w[2]:.0f}/{w[3]:.0f}s; m1 = {w[1] / w[0]:.2f}x of m0")

    def test_lsh_coarsening_at_least_twice_as_fast(self, desk_bench):
        lsh = desk_bench["lsh_coarsen_seconds"]
        jacc = desk_bench["jacc_coarsen_seconds"]
        assert lsh < 0.5 * jacc, (lsh, jacc)
        report(7, f"LSH coarsening {lsh:.1f}s vs Jaccard {jacc:.1f}s "
                  f"({jacc / lsh:.1f}x)")


def _dataset_files(root):
    return {
        "edges": os.path.join(root, "edges.tsv"),
        "schema": os.path.join(root, "schema.cfg"),
        "labels": os.path.join(root, "labels.tsv"),
    }


@pytest.mark.skipif("HETMILE_DBLP_DIR" not in os.environ,
                    reason="optional: set HETMILE_DBLP_DIR to a prepared "
                           "DBLP dataset directory (see README)")
class TestCriterion8DblpReproduction:
    def test_dblp_jacc_max_m3(self):
        files = _dataset_files(os.environ["HETMILE_DBLP_DIR"])
        g = load_graph(files["edges"], files["schema"])
        reg = g.registry
        assert g.type_count(reg.node_type_id("author")) == 4057
        assert g.type_count(reg.node_type_id("paper")) == 14328
        assert g.type_count(reg.node_type_id("term")) == 7723
        assert g.type_count(reg.node_type_id("venue")) == 20
        ap = g.relations[reg.edge_type_id("writes")]
        assert ap.num_edges == 19645
        labels = load_labels(files["labels"], g)
        cfg = PipelineConfig(
            meta_paths="author-paper-author,author-paper-venue-paper-author",
            d=128, strategy="jacc_max", levels=3, train_pair="pool", seed=3)
        res = execute_pipeline(g, cfg)
        f1, _ = node_classification(res.e0, labels, folds=10, seed=5)
        assert abs(f1 - 0.9526) <= 0.03, f1
        auc, _ = link_prediction(
            g, lambda residual, s: execute_pipeline(residual, cfg, seed=s).e0,
            holdout=0.10, seed=7, runs=1)
        assert abs(auc - 0.7404) <= 0.05, auc
        report(8, f"DBLP micro-F1 {f1:.4f} (target 0.9526 +- 0.03), "
                  f"AUROC {auc:.4f} (target 0.7404 +- 0.05)")


@pytest.mark.skipif("HETMILE_IMDB_DIR" not in os.environ,
                    reason="optional: set HETMILE_IMDB_DIR to a prepared "
                           "IMDB dataset directory (see README)")
class TestCriterion8ImdbReproduction:
    def test_imdb_jacc_max(self):
        files = _dataset_files(os.environ["HETMILE_IMDB_DIR"])
        g = load_graph(files["edges"], files["schema"])
        labels = load_labels(files["labels"], g)
        cfg = PipelineConfig(
            meta_paths="movie-actor-movie,movie-director-movie",
            d=128, strategy="jacc_max", levels=1, train_pair="pool", seed=3)
        res = execute_pipeline(g, cfg)
        f1, _ = node_classification(res.e0, labels, folds=10, seed=5)
        assert abs(f1 - 0.5668) <= 0.05, f1
        report(8, f"IMDB micro-F1 {f1:.4f} (target 0.5668 +- 0.05)")


class TestCriterion9Determinism:
    def test_repeated_pipeline_runs_bit_identical(self, tmp_path):
        data = tmp_path / "data"
        paths = write_dataset(str(data), n_per_type=150, types=3,
                              communities=3, p_in=0.08, p_out=0.004, seed=21)
        flags = ["pipeline", "--edges", paths["edges"], "--schema",
                 paths["schema"], "--levels", "2", "--strategy", "lsh",
                 "--lsh-k", "32", "--lsh-bands", "16", "--meta-paths",
                 "t0-t1-t2-t1-t0", "--d", "16", "--walks-per-node", "4",
                 "--walk-length", "20", "--window", "3", "--negatives", "3",
                 "--sgns-epochs", "2", "--refine-layers", "2",
                 "--refine-epochs", "10", "--train-pair", "pool",
                 "--seed", "33"]
        blobs = []
        for run in ("a", "b"):
            out = tmp_path / run
            assert main(flags + ["--out-dir", str(out)]) == 0
            blobs.append((out / "e0.hmeb").read_bytes())
        assert blobs[0] == blobs[1]
        report(9, f"two cmd_pipeline runs produced bit-identical E_0 "
                  f"binaries ({len(blobs[0])} bytes)")
