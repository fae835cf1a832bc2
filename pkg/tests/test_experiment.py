"""Experiment configuration, comparison runs, manifests, downstream BO and the CLI."""

import json
import os
import shutil
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from kernel_manifold.bo import SearchTrace
from kernel_manifold.cli import main
from kernel_manifold.errors import ConfigurationError
from kernel_manifold.experiment import (
    ComparisonSummary,
    DatasetSpec,
    ExperimentConfig,
    downstream_bo,
    run_experiment,
    svg_line_chart,
    verify,
)
from kernel_manifold.gp import FitBudget

SMALL = dict(
    datasets=(DatasetSpec("dropwave", n=10),),
    methods=("bo_multiscale", "random", "ga"),
    seeds=(0, 1),
    n_init=3,
    iters=2,
    max_depth=2,
    divergence="hellinger_sq",
    samples=4,
    n_ref=10,
    p=3,
    fit_restarts=2,
    fit_max_evals=40,
)


def small_config(tmp_path, name="out", **kw):
    return ExperimentConfig(**(SMALL | {"out_dir": str(tmp_path / name)} | kw))


def read(path):
    with open(path, "rb") as fh:
        return fh.read()


class TestConfig:
    def test_json_roundtrip(self, tmp_path):
        cfg = small_config(tmp_path)
        back = ExperimentConfig.from_json(json.loads(json.dumps(cfg.to_json())))
        assert back == cfg and back.hash() == cfg.hash()

    def test_hash_ignores_output_location(self, tmp_path):
        assert small_config(tmp_path, "a").hash() == small_config(tmp_path, "b", workers=3).hash()
        assert small_config(tmp_path).hash() != small_config(tmp_path, iters=3).hash()

    def test_rejects_unknown_keys(self):
        with pytest.raises(ConfigurationError, match="unknown config keys"):
            ExperimentConfig.from_json({"iterations": 5})

    def test_dataset_shorthand(self):
        cfg = ExperimentConfig.from_json({"datasets": ["ackley", {"benchmark": "levy", "n": 12}]})
        assert [d.label for d in cfg.datasets] == ["ackley_n40_s0", "levy_n12_s0"]

    @pytest.mark.parametrize("kw", [
        {"methods": ("bo_multiscale", "hill_climb")},
        {"datasets": (DatasetSpec(),)},
        {"datasets": (DatasetSpec("ackley", csv="x.csv"),)},
        {"datasets": (DatasetSpec(csv="/nonexistent.csv"),)},
        {"n_init": 1},
        {"divergence": "wasserstein"},
        {"seeds": ()},
    ])
    def test_validation(self, tmp_path, kw):
        with pytest.raises(ConfigurationError):
            small_config(tmp_path, **kw).validate()


class TestSummary:
    def _trace(self, vals, seconds=0.1):
        t = SearchTrace("random", 0)
        for i, v in enumerate(vals):
            t.append(i, "SE", v, None, seconds)
        return t

    def test_mean_std_population(self):
        traces = {("d", "random"): [self._trace([1.0, 3.0]), self._trace([2.0, 0.0, 5.0])]}
        s = ComparisonSummary.from_traces(traces, 3, failures=[{"dataset": "d", "method": "random", "seed": 9}])
        st = s.stats["d"]["random"]
        np.testing.assert_allclose(st.mean, [1.5, 2.5, 4.0])
        np.testing.assert_allclose(st.std, [0.5, 0.5, 1.0])
        assert st.completed == 2 and st.failed == 1
        lines = s.csv_text().splitlines()
        assert lines[0] == "dataset,method,iteration,mean_best_lml,std_best_lml,n_seeds"
        assert lines[1] == "d,random,1,1.5,0.5,2"

    def test_all_failed_cell(self):
        s = ComparisonSummary.from_traces({("d", "ga"): []}, 2)
        assert np.all(np.isnan(s.stats["d"]["ga"].mean))

    def test_svg_is_well_formed(self):
        svg = svg_line_chart({"a": (np.arange(5.0), np.ones(5)), "b<c": (np.zeros(5), np.zeros(5))}, "t")
        root = ET.fromstring(svg.replace("b<c", "b&lt;c"))
        assert root.tag.endswith("svg")
        assert svg.count("<polyline") == 2


@pytest.fixture(scope="module")
def finished_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("bench")
    cfg = ExperimentConfig(**(SMALL | {"out_dir": str(root / "run")}))
    summary = run_experiment(cfg, log=lambda *_: None)
    return cfg, summary


class TestRunExperiment:
    def test_layout(self, finished_run):
        cfg, summary = finished_run
        out = cfg.out_dir
        for name in ("config.json", "library.json", "embedding.csv", "summary.json", "timing.json",
                     "curves.csv", "manifest.json"):
            assert os.path.exists(os.path.join(out, name)), name
        label = cfg.datasets[0].label
        for m in cfg.methods:
            for s in cfg.seeds:
                assert os.path.exists(os.path.join(out, "traces", label, f"{m}_seed{s}.jsonl"))
        assert set(summary.stats[label]) == set(cfg.methods)
        body = json.loads(read(os.path.join(out, "summary.json")))
        assert body["datasets_meta"][label]["n"] == 10

    def test_equal_budgets(self, finished_run):
        cfg, _ = finished_run
        label = cfg.datasets[0].label
        for m in cfg.methods:
            t = SearchTrace.load(os.path.join(cfg.out_dir, "traces", label, f"{m}_seed0"))
            assert len(t.records) == cfg.budget

    def test_rerun_is_byte_identical(self, finished_run, tmp_path):
        cfg, _ = finished_run
        again = ExperimentConfig(**(SMALL | {"out_dir": str(tmp_path / "again")}))
        run_experiment(again, log=lambda *_: None)
        a = json.loads(read(os.path.join(cfg.out_dir, "manifest.json")))
        b = json.loads(read(os.path.join(again.out_dir, "manifest.json")))
        # config.json records the output directory itself
        assert a["config_hash"] == b["config_hash"]
        a["files"].pop("config.json")
        b["files"].pop("config.json")
        assert a == b and len(a["files"]) > 10
        assert read(os.path.join(cfg.out_dir, "curves.csv")) == read(os.path.join(again.out_dir, "curves.csv"))

    def test_parallel_matches_serial(self, finished_run, tmp_path):
        cfg, _ = finished_run
        par = ExperimentConfig(**(SMALL | {"out_dir": str(tmp_path / "par"), "workers": 2}))
        run_experiment(par, log=lambda *_: None)
        assert read(os.path.join(cfg.out_dir, "curves.csv")) == read(os.path.join(par.out_dir, "curves.csv"))

    def test_zero_iterations_equals_initial_best(self, tmp_path):
        cfg = small_config(tmp_path, iters=0, methods=("bo_multiscale", "random"))
        summary = run_experiment(cfg, log=lambda *_: None)
        label = cfg.datasets[0].label
        # BO and random share their initial draws
        assert summary.final(label, "bo_multiscale") == summary.final(label, "random")


class TestVerify:
    def _copy(self, src, dst):
        shutil.copytree(src, dst)
        return str(dst)

    def test_clean(self, finished_run):
        assert verify(finished_run[0].out_dir) == []

    def test_detects_tampering(self, finished_run, tmp_path):
        root = self._copy(finished_run[0].out_dir, tmp_path / "t")
        with open(os.path.join(root, "curves.csv"), "a") as fh:
            fh.write("x\n")
        assert any("hash mismatch: curves.csv" in p for p in verify(root))

    def test_detects_missing_and_untracked(self, finished_run, tmp_path):
        root = self._copy(finished_run[0].out_dir, tmp_path / "t")
        os.remove(os.path.join(root, "embedding.csv"))
        with open(os.path.join(root, "extra.txt"), "w") as fh:
            fh.write("x")
        problems = verify(root)
        assert "missing: embedding.csv" in problems and "untracked: extra.txt" in problems

    def test_timing_not_tracked(self, finished_run, tmp_path):
        root = self._copy(finished_run[0].out_dir, tmp_path / "t")
        with open(os.path.join(root, "timing.json"), "w") as fh:
            fh.write("{}")
        assert verify(root) == []

    def test_no_manifest(self, tmp_path):
        assert verify(str(tmp_path)) == [f"no manifest.json in {tmp_path}"]


class TestDownstream:
    def test_no_iterations_gives_identical_curves(self):
        res = downstream_bo("ackley", "SE * RQ", "SE", budget=4, seeds=(0, 1), n_init=4)
        np.testing.assert_array_equal(res.curves["surrogate"], res.curves["baseline"])

    def test_short_run(self):
        fb = FitBudget(2, 50)
        a = downstream_bo("levy", "SE + RQ", "SE", budget=7, seeds=(3,), n_init=5, fit_budget=fb)
        b = downstream_bo("levy", "SE + RQ", "SE", budget=7, seeds=(3,), n_init=5, fit_budget=fb)
        assert a.csv_text() == b.csv_text()
        curve = a.curves["surrogate"][0]
        assert len(curve) == 7 and np.all(np.diff(curve) <= 0)


class TestCLI:
    def test_geometry_pipeline(self, tmp_path, capsys):
        lib, D, Z, curve = (str(tmp_path / n) for n in ("lib.json", "D.csv", "Z.csv", "curve.csv"))
        assert main(["library", "--max-depth", "2", "--out", lib]) == 0
        assert "15 kernels" in capsys.readouterr().out
        assert main(["distances", "--library", lib, "--kind", "hellinger_sq", "--samples", "3", "--n-ref", "8",
                     "--out", D]) == 0
        assert main(["diagnose", "--matrix", D]) == 0
        assert "min_eigenvalue" in capsys.readouterr().out
        assert main(["embed", "--matrix", D, "--dim", "4", "--out", Z, "--curve", curve, "--max-dim", "6"]) == 0
        assert read(curve).decode().startswith("k,mae\n1,")
        assert main(["embed", D, "--p", "4", "--out", Z]) == 0

    def test_search_and_ga(self, tmp_path):
        data = tmp_path / "data.csv"
        x = np.linspace(0, 1, 12)
        data.write_text("x,y\n" + "".join(f"{a},{np.sin(6 * a)}\n" for a in x))
        runs = str(tmp_path / "runs") + "/"
        common = ["--data", str(data), "--iters", "1", "--restarts", "1", "--max-evals", "20"]
        assert main(["search", "--method", "random", "--depth", "2", "--seed", "1..2", "--out", runs, *common]) == 0
        assert sorted(os.listdir(runs)) == sorted(f"random_seed{s}.{ext}" for s in (1, 2)
                                                  for ext in ("jsonl", "summary.json", "timing.json"))
        assert main(["ga-search", "--p", "0.7", "--max-depth", "2", "--proposer", "mock", "--seed", "3",
                     "--out", str(tmp_path / "ga"), *common]) == 0
        assert os.path.exists(tmp_path / "ga.summary.json")

    def test_errors(self, tmp_path, capsys):
        assert main(["diagnose", "--matrix", str(tmp_path / "missing.csv")]) == 2
        assert main(["verify", str(tmp_path)]) == 1
        with pytest.raises(SystemExit):
            main(["search", "--out", "x"])
        capsys.readouterr()

    def test_bench_and_verify(self, tmp_path):
        cfg = small_config(tmp_path, methods=("random",), seeds=(0,)).to_json()
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(cfg))
        out = str(tmp_path / "bench_out")
        assert main(["bench", "--config", str(path), "--out-dir", out]) == 0
        assert main(["verify", out]) == 0
