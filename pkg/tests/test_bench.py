import csv
import json

import numpy as np
import pytest

from robust_sfda import bench
from robust_sfda import nncore as nn
from robust_sfda.attack import AttackConfig
from robust_sfda.errors import ConfigError, DomainError, SchemaError
from robust_sfda.losses import LossWeights, target_loss
from robust_sfda.pseudo import PseudoLabelSet


def _csv_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestRunExperiment:
    def test_outputs_and_traceability(self, tiny_config, tmp_path):
        rep = bench.run_experiment(tiny_config, tmp_path / "r")
        expected = {
            f"{m}@{s}"
            for m, splits in {
                "source_standard": ("source/test", "target/test"),
                "source_robust": ("source/test", "target/test"),
                "standard_track": ("target/test",),
                "robust_track": ("target/test",),
                "shot": ("target/test",),
                "shot_robust": ("target/test",),
            }.items()
            for s in splits
        }
        assert set(rep.metrics) == expected
        rows = _csv_rows(tmp_path / "r" / "metrics.csv")
        assert list(rows[0]) == ["model", "split", "attack_profile", "metric", "value"]
        for row in rows:
            rec = rep.record(row["model"], row["split"])
            if row["metric"] in rec:
                assert float(row["value"]) == rec[row["metric"]]
        manifest = json.loads((tmp_path / "r" / "manifest.json").read_text())
        assert manifest["config_hash"] == rep.config_hash == tiny_config.config_hash()
        assert manifest["code_version"] == bench.code_version()
        assert rep.attack_profiles["eval"]["epsilon"] == tiny_config.epsilon
        assert set(rep.timing) == {"source_s", "adapt_s", "eval_s", "wall_clock_s"}

    def test_per_class_and_macro(self, tiny_config):
        rep = bench.run_experiment(tiny_config, write=False)
        rec = rep.record("robust_track")
        assert len(rec["clean_per_class"]) == 3
        assert rec["clean_macro_accuracy"] == pytest.approx(np.mean(rec["clean_per_class"]))

    def test_zero_eval_epsilon(self, tiny_config):
        rep = bench.run_experiment(tiny_config.with_overrides(eval_epsilon=0.0), write=False)
        for rec in rep.metrics.values():
            assert rec["adv_accuracy"] == rec["clean_accuracy"]
            assert rec["adv_per_class"] == rec["clean_per_class"]

    def test_same_config_same_metrics(self, tiny_config):
        a = bench.run_experiment(tiny_config, write=False)
        b = bench.run_experiment(tiny_config, write=False)
        assert a.metrics_json() == b.metrics_json()
        c = bench.run_experiment(tiny_config.with_overrides(seed=1), write=False)
        assert c.metrics_json() != a.metrics_json()

    def test_case_specific_sources(self, tiny_config):
        rep = bench.run_experiment(tiny_config.with_overrides(case="robust_source_only", baselines=False), write=False)
        assert {k.split("@")[0] for k in rep.metrics} == {"source_robust", "standard_track", "robust_track"}
        rep = bench.run_experiment(tiny_config.with_overrides(case="both", robust_pseudo_labels=True, baselines=False), write=False)
        assert "label_track" in rep.pseudo_label_accuracy
        assert rep.pseudo_label_accuracy["label_track"][0]["epoch"] == 0

    def test_source_cache_is_shared(self, tiny_config):
        cache = {}
        bench.run_experiment(tiny_config, write=False, cache=cache)
        keys = set(cache)
        bench.run_experiment(tiny_config.with_overrides(gamma=0.0), write=False, cache=cache)
        assert set(cache) == keys

    def test_invalid_config(self, tiny_config):
        object.__setattr__(tiny_config, "classes", 0)
        with pytest.raises(ConfigError):
            bench.run_experiment(tiny_config, write=False)

    def test_csv_domains(self, tiny_config, tmp_path):
        files = bench.generate_data(tiny_config, tmp_path / "d")
        cfg = tiny_config.with_overrides(source_csv=str(files["source"]), target_csv=str(files["target"]), baselines=False)
        rep = bench.run_experiment(cfg, write=False)
        assert rep.clean("robust_track") >= 0.0

    def test_csv_dimension_mismatch(self, tiny_config, tmp_path):
        (tmp_path / "s.csv").write_text("f0,f1,label\n0,0,0\n")
        (tmp_path / "t.csv").write_text("f0,label\n0,0\n")
        with pytest.raises(SchemaError):
            bench.prepare_data(tiny_config.with_overrides(source_csv=str(tmp_path / "s.csv"), target_csv=str(tmp_path / "t.csv")))

    def test_evaluate_empty(self, small_model):
        from robust_sfda.data import DomainDataset

        with pytest.raises(DomainError):
            bench.evaluate(small_model, DomainDataset(np.zeros((0, 5)), np.zeros(0), "e"), AttackConfig(0.1), nn.RngSeed(0))


class TestAblation:
    def test_full_row_is_a_plain_run(self, tiny_config, tmp_path):
        table = bench.run_ablation_grid(tiny_config, tmp_path / "a", rows=["full", "no_contrastive"])
        plain = bench.run_experiment(tiny_config, write=False)
        assert table.rows["full"].metrics_json() == plain.metrics_json()
        assert table.rows["no_contrastive"].config["contrastive"] is False
        assert [r["row"] for r in _csv_rows(tmp_path / "a" / "ablation.csv")] == ["full", "no_contrastive"]

    def test_unknown_row(self, tiny_config):
        with pytest.raises(ConfigError):
            bench.run_ablation_grid(tiny_config, rows=["no_everything"], write=False)

    def _one_batch(self, cfg):
        """Single full-batch epoch: the epoch-1 curve entry is the loss at the initial weights."""
        return cfg.with_overrides(adapt_epochs=1, batch_size=10_000, baselines=False)

    def test_gamma_only_changes_its_own_component(self, tiny_config):
        base = self._one_batch(tiny_config)
        a = bench.run_experiment(base, write=False).curves["standard_track"][0]
        b = bench.run_experiment(base.with_overrides(gamma=0.0), write=False).curves["standard_track"][0]
        for key in ("ent", "div", "pseudo", "con"):
            assert a[key] == b[key]
        assert a["total"] - b["total"] == pytest.approx(0.2 * a["con"], rel=1e-12)

    @pytest.mark.parametrize("toggle,missing", [("contrastive", "con"), ("entropy", "ent"), ("diversity", "div")])
    def test_toggles_remove_components_in_both_phases(self, tiny_config, toggle, missing):
        curves = bench.run_experiment(self._one_batch(tiny_config).with_overrides(**{toggle: False}), write=False).curves
        assert missing not in curves["standard_track"][0]
        assert missing not in curves["robust_track"][0]

    def test_pseudo_ce_removed_from_robust_phase_only(self, tiny_config):
        curves = bench.run_experiment(self._one_batch(tiny_config).with_overrides(pseudo_ce=False), write=False).curves
        assert "pseudo" in curves["standard_track"][0]
        assert "pseudo" not in curves["robust_track"][0]

    def test_no_adv_images_trains_on_clean_inputs(self, tiny_config, tmp_path):
        cfg = self._one_batch(tiny_config).with_overrides(adv_images=False, output_dir=str(tmp_path))
        rep = bench.run_experiment(cfg, tmp_path)
        f_s_r, _ = bench.load_checkpoint(tmp_path / "checkpoints" / "source_robust.json")
        f_t, _ = bench.load_checkpoint(tmp_path / "checkpoints" / "standard_track.json")
        x = bench.prepare_data(cfg).target.train.x
        labels = f_t.predict(x)
        out = f_s_r(x)
        expected = target_loss(out.logits, out.features, PseudoLabelSet(labels, "standard_model"), LossWeights())
        got = rep.curves["robust_track"][0]
        for key, value in expected.components.items():
            assert got[key] == pytest.approx(value, rel=1e-10)


class TestClassSweep:
    def test_single_class_is_degenerate(self, tiny_config):
        sweep = bench.run_class_sweep(tiny_config, [1], write=False)
        row = sweep.rows[0]
        assert row["both_adv"] == row["standard_source_adv"] == 1.0
        assert np.isnan(sweep.rank_correlation)

    def test_single_k_is_a_pair_of_runs(self, tiny_config, tmp_path):
        sweep = bench.run_class_sweep(tiny_config, [2], seeds=[0, 1], out_dir=tmp_path)
        both, std = [], []
        for seed in (0, 1):
            cfg = tiny_config.with_overrides(class_subset=2, seed=seed, baselines=False)
            both.append(bench.run_experiment(cfg.with_overrides(case="both"), write=False).adv())
            std.append(bench.run_experiment(cfg.with_overrides(case="standard_source_only"), write=False).adv())
        row = sweep.rows[0]
        assert row["both_adv"] == np.mean(both)
        assert row["standard_source_adv"] == np.mean(std)
        assert row["advantage"] == pytest.approx(np.mean(both) - np.mean(std), abs=1e-15)
        assert row["seeds"] == 2
        assert (tmp_path / "k2" / "seed1" / "both" / "report.json").exists()
        assert json.loads((tmp_path / "sweep.json").read_text())["rows"][0]["k"] == 2

    def test_rank_correlation(self, monkeypatch, tiny_config):
        advantage = {2: 0.0, 3: 0.1}

        class Fake:
            def __init__(self, cfg):
                self.cfg = cfg

            def adv(self):
                return advantage[self.cfg.class_subset] if self.cfg.case == "both" else 0.0

            def clean(self):
                return 1.0

        monkeypatch.setattr(bench, "run_experiment", lambda cfg, *a, **k: Fake(cfg))
        sweep = bench.run_class_sweep(tiny_config, [2, 3], write=False)
        assert sweep.advantages == [0.0, 0.1]
        assert sweep.rank_correlation == pytest.approx(1.0)

    def test_empty_ks(self, tiny_config):
        with pytest.raises(ConfigError):
            bench.run_class_sweep(tiny_config, [], write=False)


class TestCheckpoints:
    def test_round_trip(self, small_model, tmp_path):
        path = bench.save_checkpoint(small_model, tmp_path / "m.json", "abc", {"role": "x"})
        model, meta = bench.load_checkpoint(path)
        assert model.param_hash() == small_model.param_hash()
        assert model.encoder.activation == "tanh"
        assert meta == {"config_hash": "abc", "role": "x"}

    def test_rejects_other_files(self, tmp_path):
        (tmp_path / "a.json").write_text("{}")
        (tmp_path / "b.json").write_text("not json")
        with pytest.raises(SchemaError):
            bench.load_checkpoint(tmp_path / "a.json")
        with pytest.raises(SchemaError):
            bench.load_checkpoint(tmp_path / "b.json")
        with pytest.raises(ConfigError):
            bench.load_checkpoint(tmp_path / "c.json")


class TestExportFeatures:
    def _toy(self):
        from robust_sfda.data import DomainDataset

        g = np.random.default_rng(0)
        ds = DomainDataset(g.uniform(0.2, 0.8, size=(12, 3)), g.integers(0, 2, 12), "toy", (0.0, 1.0), 2)
        return nn.Model.init([3, 5, 2], 2, "tanh", seed=1), ds

    def test_two_dim_features(self, tmp_path):
        model, ds = self._toy()
        path = bench.export_features(model, ds, False, tmp_path / "f.csv")
        rows = _csv_rows(path)
        assert list(rows[0]) == ["z0", "z1", "label", "pseudo_label", "correct"]
        assert len(rows) == 12
        np.testing.assert_array_equal([[float(r["z0"]), float(r["z1"])] for r in rows], model.features(ds.x))
        for r in rows:
            assert r["correct"] == str(int(r["label"] == r["pseudo_label"]))

    def test_attacked_rows_differ_only_where_inputs_moved(self, tmp_path):
        model, ds = self._toy()
        x = ds.x.copy()
        x[:4] = 0.0  # on the clamp bound: rows whose gradient points outward cannot move
        ds.x = x
        atk = AttackConfig(0.1, steps=3)
        clean = _csv_rows(bench.export_features(model, ds, False, tmp_path / "c.csv"))
        adv = _csv_rows(bench.export_features(model, ds, True, tmp_path / "a.csv", atk=atk))
        from robust_sfda.attack import attack_in_chunks

        moved = np.any(attack_in_chunks(model, ds.x, ds.y, atk.with_range(*ds.input_range)) != ds.x, axis=1)
        for r_c, r_a, m in zip(clean, adv, moved):
            same = [r_c[f"z{i}"] for i in range(2)] == [r_a[f"z{i}"] for i in range(2)]
            assert same != m
        assert moved.any()

    def test_given_pseudo_labels(self, tmp_path):
        model, ds = self._toy()
        rows = _csv_rows(bench.export_features(model, ds, False, tmp_path / "f.csv", pseudo=PseudoLabelSet(np.ones(12, dtype=int), "kmeans")))
        assert {r["pseudo_label"] for r in rows} == {"1"}

    def test_errors(self, tmp_path):
        model, ds = self._toy()
        with pytest.raises(ConfigError):
            bench.export_features(model, ds, True, tmp_path / "f.csv")
        with pytest.raises(ConfigError):
            bench.export_features(model, ds, False, tmp_path / "f.csv", pseudo=[0, 1])
        with pytest.raises(ConfigError):
            bench.export_features(nn.Model.init([4, 2], 2), ds, False, tmp_path / "f.csv")
        (tmp_path / "blocker").write_text("")
        with pytest.raises(OSError, match="blocker"):
            bench.export_features(model, ds, False, tmp_path / "blocker" / "f.csv")


def test_resolve_output_dir(tiny_config, monkeypatch, tmp_path):
    assert str(bench.resolve_output_dir(tiny_config)) == tiny_config.output_dir
    cfg = tiny_config.with_overrides(output_dir=None)
    monkeypatch.setenv(bench.OUTPUT_ROOT_ENV, str(tmp_path))
    assert bench.resolve_output_dir(cfg, "sweep") == tmp_path / f"sweep-{cfg.config_hash()[:12]}"
    monkeypatch.delenv(bench.OUTPUT_ROOT_ENV)
    assert bench.resolve_output_dir(cfg).parent.name == bench.DEFAULT_OUTPUT_ROOT
