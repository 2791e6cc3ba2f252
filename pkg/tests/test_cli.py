import json
import warnings

import numpy as np
import pytest

from hetmile import cli
from hetmile.cli import PipelineConfig, execute_pipeline, main, merge_config
from hetmile.embed_base import MetaPath, base_embed
from hetmile.errors import DataError
from hetmile.evaluate import load_labels, node_classification
from hetmile.hetgraph import load_embeddings, load_graph
from hetmile.synth import write_dataset

TINY = dict(n_per_type=40, types=3, communities=2, p_in=0.25, p_out=0.02,
            seed=5)

FAST_FLAGS = ["--meta-paths", "t0-t1-t2-t1-t0", "--d", "8",
              "--walks-per-node", "2", "--walk-length", "10",
              "--window", "2", "--negatives", "2", "--sgns-epochs", "1",
              "--refine-layers", "2", "--refine-epochs", "5",
              "--seed", "11"]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("synthdata")
    return write_dataset(str(out), **TINY)


def run_cli(*args):
    return main([str(a) for a in args])


class TestSynth:
    def test_deterministic_bytes(self, tmp_path):
        a = write_dataset(str(tmp_path / "a"), n_per_type=30, seed=9)
        b = write_dataset(str(tmp_path / "b"), n_per_type=30, seed=9)
        for key in ("edges", "nodes", "labels", "schema"):
            assert open(a[key], "rb").read() == open(b[key], "rb").read()

    def test_different_seed_differs(self, tmp_path):
        a = write_dataset(str(tmp_path / "a"), n_per_type=30, seed=1)
        b = write_dataset(str(tmp_path / "b"), n_per_type=30, seed=2)
        assert open(a["edges"]).read() != open(b["edges"]).read()

    def test_planted_structure_mostly_intra_community(self, dataset):
        g = load_graph(dataset["edges"], dataset["schema"])
        labels = load_labels(dataset["labels"], g)
        lab = np.zeros(g.num_nodes, dtype=np.int64)
        lab[labels.ids] = labels.y
        intra = inter = 0
        for rel in g.relations.values():
            src = np.repeat(np.arange(g.num_nodes), np.diff(rel.indptr))
            same = lab[src] == lab[rel.indices]
            intra += int(same.sum())
            inter += int((~same).sum())
        assert intra > 5 * inter

    def test_infeasible_probabilities_rejected(self, tmp_path):
        from hetmile.errors import ConfigError
        with pytest.raises(ConfigError, match="p_out <= p_in"):
            write_dataset(str(tmp_path / "bad"), n_per_type=10, p_in=0.01,
                          p_out=0.5)
        with pytest.raises(ConfigError, match="n_per_type"):
            write_dataset(str(tmp_path / "bad"), n_per_type=2, communities=5)

    def test_single_community_labels_reject_classification(self, tmp_path):
        paths = write_dataset(str(tmp_path / "one"), n_per_type=30,
                              communities=1, seed=3)
        g = load_graph(paths["edges"], paths["schema"])
        labels = load_labels(paths["labels"], g)
        emb = np.random.default_rng(0).normal(size=(g.num_nodes, 4))
        with pytest.raises(DataError, match="two classes"):
            node_classification(emb, labels)

    def test_cli_command(self, tmp_path):
        rc = run_cli("synth", "--out", tmp_path / "s", "--n-per-type", 20,
                     "--communities", 2, "--seed", 1)
        assert rc == 0
        assert (tmp_path / "s" / "edges.tsv").exists()
        assert (tmp_path / "s" / "manifest.json").exists()

    def test_base_embedding_separates_planted_communities(self, tmp_path):
        paths = write_dataset(str(tmp_path / "smoke"), n_per_type=1000,
                              types=2, communities=2, p_in=0.1, p_out=0.001,
                              seed=13)
        g = load_graph(paths["edges"], paths["schema"])
        labels = load_labels(paths["labels"], g)
        cfg = PipelineConfig(meta_paths="t0-t1-t0", d=16, levels=0,
                             walks_per_node=4, walk_length=30, window=3,
                             negatives=3, sgns_epochs=2, seed=29)
        res = execute_pipeline(g, cfg)
        f1, _ = node_classification(res.e0, labels, seed=3)
        assert f1 > 0.9


class TestPipelineCommand:
    def test_level_zero_bypasses_and_matches_base_embed(self, dataset,
                                                        tmp_path):
        out = tmp_path / "m0"
        rc = run_cli("pipeline", "--edges", dataset["edges"], "--schema",
                     dataset["schema"], "--levels", "0", "--out-dir", out,
                     *FAST_FLAGS)
        assert rc == 0
        emb, _ = load_embeddings(str(out / "e0.hmeb"))
        assert not (out / "refiner.hmrp").exists()

        g = load_graph(dataset["edges"], dataset["schema"])
        cfg = PipelineConfig(meta_paths="t0-t1-t2-t1-t0", d=8,
                             walks_per_node=2, walk_length=10, window=2,
                             negatives=2, sgns_epochs=1, seed=11)
        mp = MetaPath.from_names(g.registry, "t0-t1-t2-t1-t0")
        res = base_embed(g, [mp], 8, cfg.walk_config())
        assert np.array_equal(emb, res.embedding)

    def test_level_two_artifacts_and_report(self, dataset, tmp_path):
        out = tmp_path / "m2"
        rc = run_cli("pipeline", "--edges", dataset["edges"], "--schema",
                     dataset["schema"], "--labels", dataset["labels"],
                     "--levels", "2", "--strategy", "lsh", "--lsh-k", "16",
                     "--train-pair", "pool", "--out-dir", out, *FAST_FLAGS)
        assert rc == 0
        for name in ("e0.hmeb", "refiner.hmrp", "refine_curve.csv",
                     "report.json", "manifest.json"):
            assert (out / name).exists(), name
        report = json.loads((out / "report.json").read_text())
        assert report["level"] == 2
        assert report["micro_f1"] is not None
        assert 0.0 <= report["micro_f1"]["mean"] <= 1.0
        assert set(report["timings"]) == {"coarsen_seconds", "embed_seconds",
                                          "refine_seconds", "total_seconds"}
        curve = (out / "refine_curve.csv").read_text().strip().splitlines()
        assert curve[0] == "epoch,loss" and len(curve) == 6

        manifest = json.loads((out / "manifest.json").read_text())
        assert str(out / "e0.hmeb") in manifest["outputs"]

    def test_determinism_bit_identical(self, dataset, tmp_path):
        outs = []
        for run in ("r1", "r2"):
            out = tmp_path / run
            rc = run_cli("pipeline", "--edges", dataset["edges"], "--schema",
                         dataset["schema"], "--levels", "1", "--train-pair",
                         "pool", "--out-dir", out, *FAST_FLAGS)
            assert rc == 0
            outs.append((out / "e0.hmeb").read_bytes())
        assert outs[0] == outs[1]


class TestStageComposition:
    @pytest.mark.parametrize("train_pair", ["pool", "embed"])
    def test_stages_reproduce_pipeline_bit_exact(self, dataset, tmp_path,
                                                 train_pair):
        base = ["--edges", dataset["edges"], "--schema", dataset["schema"],
                "--levels", "2", "--train-pair", train_pair, *FAST_FLAGS]
        out_pipe = tmp_path / "pipe"
        assert run_cli("pipeline", *base, "--out-dir", out_pipe) == 0

        chain_dir = tmp_path / "chain"
        assert run_cli("coarsen", *base, "--out-dir", chain_dir) == 0
        emb_dir = tmp_path / "embed"
        assert run_cli("embed", *base, "--chain", chain_dir,
                       "--out-dir", emb_dir) == 0
        ref_dir = tmp_path / "refine"
        assert run_cli("refine", *base, "--chain", chain_dir, "--embedding",
                       emb_dir / "em.hmeb", "--out-dir", ref_dir) == 0

        assert (out_pipe / "e0.hmeb").read_bytes() == \
            (ref_dir / "e0.hmeb").read_bytes()
        assert (out_pipe / "refiner.hmrp").read_bytes() == \
            (ref_dir / "refiner.hmrp").read_bytes()

    def test_eval_reproduces_report_metrics(self, dataset, tmp_path):
        out = tmp_path / "pipe"
        base = ["--edges", dataset["edges"], "--schema", dataset["schema"],
                "--labels", dataset["labels"], "--levels", "1",
                "--train-pair", "pool", *FAST_FLAGS]
        assert run_cli("pipeline", *base, "--out-dir", out) == 0
        report = json.loads((out / "report.json").read_text())

        out_eval = tmp_path / "eval"
        assert run_cli("eval", *base, "--embedding", out / "e0.hmeb",
                       "--out-dir", out_eval) == 0
        report2 = json.loads((out_eval / "report.json").read_text())
        assert report2["micro_f1"] == report["micro_f1"]


class TestErrors:
    def test_missing_file_is_config_error(self, tmp_path):
        rc = run_cli("pipeline", "--edges", tmp_path / "absent.tsv",
                     "--schema", tmp_path / "absent.cfg", *FAST_FLAGS)
        assert rc == 2

    def test_bad_edge_file_is_data_error(self, dataset, tmp_path):
        bad = tmp_path / "bad.tsv"
        bad.write_text("0\t999999\tr01\n")
        rc = run_cli("pipeline", "--edges", bad, "--schema",
                     dataset["schema"], "--out-dir", tmp_path / "o",
                     *FAST_FLAGS)
        assert rc == 3

    def test_divergence_is_numeric_error(self, dataset, tmp_path):
        with np.errstate(all="ignore"), warnings.catch_warnings():
            warnings.simplefilter("ignore")
            rc = run_cli("pipeline", "--edges", dataset["edges"], "--schema",
                         dataset["schema"], "--levels", "1", "--train-pair",
                         "pool", "--refine-lr", "1e300",
                         "--out-dir", tmp_path / "o", *FAST_FLAGS)
        assert rc == 4

    def test_unknown_config_key_rejected(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text('{"bogus": 1}')
        rc = run_cli("pipeline", "--config", cfg, *FAST_FLAGS)
        assert rc == 2


class TestConfigPlumbing:
    def test_lsh_k_threads_through(self, dataset, tmp_path):
        out = tmp_path / "chain"
        rc = run_cli("coarsen", "--edges", dataset["edges"], "--schema",
                     dataset["schema"], "--strategy", "lsh", "--lsh-k", "256",
                     "--lsh-bands", "32", "--levels", "1", "--out-dir", out,
                     *FAST_FLAGS)
        assert rc == 0
        meta = json.loads((out / "chain.json").read_text())
        assert meta["config"]["lsh_k"] == 256
        assert meta["config"]["lsh_bands"] == 32

    def test_precedence_flags_over_file_over_defaults(self, tmp_path):
        cfg_file = tmp_path / "c.json"
        cfg_file.write_text('{"d": 32, "window": 9}')
        file_values = cli.load_config(str(cfg_file))
        merged = merge_config(file_values, {"d": 16})
        assert merged.d == 16          # flag wins
        assert merged.window == 9      # file wins over default
        assert merged.walk_length == 80  # default

    def test_env_threads_overrides_flag(self, monkeypatch):
        monkeypatch.setenv("HETMILE_THREADS", "3")
        parser = cli.build_parser()
        args = parser.parse_args(["pipeline", "--edges", "x", "--schema", "y",
                                  "--threads", "8"])
        vals = cli._flag_values(args)
        assert vals["threads"] == 3
        monkeypatch.delenv("HETMILE_THREADS")
        vals = cli._flag_values(args)
        assert vals["threads"] == 8


class TestBenchCommand:
    def test_grid_rows(self, dataset, tmp_path):
        out = tmp_path / "bench"
        rc = run_cli("bench", "--edges", dataset["edges"], "--schema",
                     dataset["schema"], "--labels", dataset["labels"],
                     "--strategies", "jacc_max,lsh", "--levels-grid", "1,2",
                     "--train-pair", "pool", "--runs", "1", "--out-dir", out,
                     *FAST_FLAGS)
        assert rc == 0
        rows = (out / "bench.csv").read_text().strip().splitlines()
        assert len(rows) == 1 + 4  # header + 2x2 grid
        data = json.loads((out / "bench.json").read_text())
        assert {(r["strategy"], r["level"]) for r in data} == \
            {("jacc_max", 1), ("jacc_max", 2), ("lsh", 1), ("lsh", 2)}


class TestExecutePipeline:
    def test_m0_timings_shape(self, dataset):
        g = load_graph(dataset["edges"], dataset["schema"])
        cfg = PipelineConfig(meta_paths="t0-t1-t2-t1-t0", d=8, levels=0,
                             walks_per_node=2, walk_length=10, window=2,
                             negatives=2, sgns_epochs=1, seed=3)
        res = execute_pipeline(g, cfg)
        assert res.e0.shape == (g.num_nodes, 8)
        assert res.timings["coarsen_seconds"] == 0.0
        assert res.timings["refine_seconds"] == 0.0
