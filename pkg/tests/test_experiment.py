import dataclasses
import json

import numpy as np
import pytest
from filelock import FileLock

from fracflow.bench.experiment import (
    MANIFEST_COLUMNS,
    SUMMARY_COLUMNS,
    SWEEP_COLUMNS,
    ConfigError,
    DataConfig,
    ModelConfig,
    RunConfig,
    StageError,
    ablation_sweep,
    build_dataset,
    config_from_dict,
    load_config,
    load_split,
    missing_piece_eval,
    n_workers,
    prepare_input,
    read_csv,
    run_experiment,
    run_stages,
    summary_rows,
)
from fracflow.flow import TrainConfig
from fracflow.retarget import RetargetConfig


def smoke_config(out_dir, **kw) -> RunConfig:
    return RunConfig(data=DataConfig(n_train=20, n_test=5, n_pts=1024),
                     model=ModelConfig(widths=(64, 64)),
                     train=TrainConfig(epochs=200, learning_rate=1e-3),
                     retarget=RetargetConfig(lr=3e-4, epochs=40),
                     draws_per_instance=2, out_dir=str(out_dir), **kw)


@pytest.fixture(scope="module")
def smoke(tmp_path_factory):
    cfg = smoke_config(tmp_path_factory.mktemp("smoke") / "run")
    return cfg, run_experiment(cfg)


class TestConfig:
    def test_nested_overrides_keep_defaults(self):
        cfg = config_from_dict({"data": {"n_train": 7}, "retarget": {"alpha": 0.8}, "seed": 3})
        assert cfg.data.n_train == 7 and cfg.data.n_test == 50
        assert cfg.retarget.alpha == 0.8 and cfg.retarget.lr == RunConfig().retarget.lr
        assert cfg.seed == 3

    def test_yaml_file(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text("latent:\n  R: 6\nmodel:\n  widths: [32, 32]\n")
        cfg = load_config(p)
        assert cfg.latent.R == 6 and cfg.model.widths == (32, 32)

    @pytest.mark.parametrize("bad", [{"nope": 1}, {"data": {"n_train": 0}}, {"retarget": {"alpha": 2}},
                                     {"frame": "camera"}, {"data": 5}])
    def test_rejects_bad_values(self, bad):
        with pytest.raises(ConfigError):
            config_from_dict(bad)

    def test_hash_ignores_out_dir_only(self):
        a = RunConfig(out_dir="a")
        assert a.config_hash() == RunConfig(out_dir="b").config_hash()
        assert a.config_hash() != RunConfig(seed=1).config_hash()

    def test_thread_env(self, monkeypatch):
        monkeypatch.setenv("JGPP_THREADS", "3")
        assert n_workers() == 3
        monkeypatch.setenv("JGPP_THREADS", "many")
        with pytest.raises(ConfigError):
            n_workers()


class TestDataset:
    def test_splits_are_disjoint_and_seeded(self, tmp_path):
        cfg = smoke_config(tmp_path)
        ds = build_dataset(cfg)
        assert not {r.instance_id for r in ds.train} & {r.instance_id for r in ds.test}
        assert not {r.shape_seed for r in ds.train} & {r.shape_seed for r in ds.test}
        again = build_dataset(cfg)
        assert all(np.array_equal(a.instance.complete.points, b.instance.complete.points)
                   for a, b in zip(ds.test, again.test))

    def test_thread_count_does_not_change_data(self, tmp_path, monkeypatch):
        cfg = smoke_config(tmp_path)
        monkeypatch.setenv("JGPP_THREADS", "1")
        one = build_dataset(cfg)
        monkeypatch.setenv("JGPP_THREADS", "4")
        four = build_dataset(cfg)
        assert [r.shape_seed for r in one.test] == [r.shape_seed for r in four.test]
        assert all(np.array_equal(prepare_input(a.instance)[0].points, prepare_input(b.instance)[0].points)
                   for a, b in zip(one.train, four.train))

    def test_world_frame_keeps_coordinates(self, tmp_path):
        rec = build_dataset(smoke_config(tmp_path)).test[0]
        cloud, nrec = prepare_input(rec.instance, "world")
        assert nrec.scale == 1.0 and cloud.points.min() >= 0 and cloud.points.max() <= 1


class TestRun:
    def test_outputs_and_schema(self, smoke):
        cfg, res = smoke
        root = res.root
        for name in ("config.json", "dataset/train.npz", "dataset/test.npz", "latents.npz", "prior.ckpt",
                     "pairs.jgrp", "finetuned.ckpt", "manifest.csv", "summary.csv", "prior_loss.csv"):
            assert (root / name).exists(), name
        man = read_csv(root / "manifest.csv")
        assert tuple(man[0]) == MANIFEST_COLUMNS and len(man) == 5
        assert all(r["config_hash"] == cfg.config_hash() for r in man)
        summ = read_csv(root / "summary.csv")
        assert tuple(summ[0]) == SUMMARY_COLUMNS
        assert [r["row"] for r in summ] == ["baseline", "reconstruction", "difference"]
        assert json.loads((root / "config.json").read_text())["config_hash"] == cfg.config_hash()

    def test_difference_row_is_reproducible(self, smoke):
        _, res = smoke
        ok = [r for r in res.manifest if r["status"] == "ok"]
        diff = res.summary[2]
        for m in ("cd", "precision", "recall"):
            expect = np.mean([r[f"recon_{m}"] for r in ok]) - np.mean([r[f"input_{m}"] for r in ok])
            assert diff[f"{m}_mean"] == pytest.approx(expect, abs=1e-12)

    def test_summary_handles_failures(self, smoke):
        cfg, res = smoke
        rows = [dict(r) for r in res.manifest]
        rows[0]["status"] = "empty_decode"
        assert summary_rows(cfg, rows)[0]["n"] == len(rows) - 1

    def test_rerun_is_identical(self, smoke, tmp_path):
        cfg, res = smoke
        other = dataclasses.replace(cfg, out_dir=str(tmp_path / "again"))
        res2 = run_experiment(other)
        for name in ("manifest.csv", "summary.csv", "dataset/test.npz", "latents.npz", "prior.ckpt",
                     "finetuned.ckpt", "pairs.jgrp"):
            assert (res.root / name).read_bytes() == (res2.root / name).read_bytes(), name

    def test_resume_reuses_artifacts(self, smoke):
        cfg, res = smoke
        before = (res.root / "finetuned.ckpt").stat().st_mtime_ns
        run_stages(cfg, "retarget")
        assert (res.root / "finetuned.ckpt").stat().st_mtime_ns == before

    def test_config_mismatch(self, smoke):
        cfg, _ = smoke
        with pytest.raises(StageError, match="config hash"):
            run_stages(dataclasses.replace(cfg, seed=99), "gen-data")

    def test_locked_directory(self, smoke):
        cfg, res = smoke
        with FileLock(str(res.root / ".lock")):
            with pytest.raises(StageError, match="locked"):
                run_stages(cfg, "gen-data")

    def test_saved_split_round_trip(self, smoke):
        _, res = smoke
        back = load_split(res.root / "dataset" / "test.npz")
        for a, b in zip(res.dataset.test, back):
            assert a.instance_id == b.instance_id and a.instance.present == b.instance.present
            assert np.array_equal(a.instance.complete.points, b.instance.complete.points)

    def test_stage_failure_is_recorded(self, tmp_path):
        cfg = smoke_config(tmp_path / "broken")
        run_stages(cfg, "gen-data")
        (tmp_path / "broken" / "latents.npz").write_bytes(b"not an archive")
        with pytest.raises(StageError) as info:
            run_stages(cfg, "train-prior")
        assert info.value.stage == "encode"
        assert json.loads((tmp_path / "broken" / "failure.json").read_text())["stage"] == "encode"


def test_ablation_sweep(smoke, tmp_path):
    cfg, res = smoke
    rows = ablation_sweep(cfg, [1.0, 0.1], [0.5, 1.0], model_ft=res.finetuned,
                          records=res.dataset.test[:2], out_dir=tmp_path)
    assert len(rows) == 4 and {r["n_reverse"] for r in rows} == {100, 10}
    assert tuple(read_csv(tmp_path / "sweep.csv")[0]) == SWEEP_COLUMNS
    assert (tmp_path / "cd_vs_k.png").exists() and (tmp_path / "cd_vs_alpha.png").exists()
    with pytest.raises(ConfigError):
        ablation_sweep(cfg, [], [0.5], model_ft=res.finetuned, records=res.dataset.test)


def test_missing_piece_rows(smoke, tmp_path):
    cfg, res = smoke
    rows = missing_piece_eval(cfg, 0.2, model_ft=res.finetuned, out_dir=tmp_path)
    assert [r["row"] for r in rows] == ["complete", "20% missing"]
    assert (tmp_path / "missing_pieces.csv").exists()
