import json
from collections import Counter

import pytest

from lsct import cli
from lsct.cli import CliError, cmd_ablate, cmd_eval, cmd_synth, cmd_train, main, parse_run_config
from lsct.signal import read_manifest

SMALL_MODEL = {"encoder_channels": [4, 8], "attn_heads": 2, "codebook_size": 8, "msek_heads": 2}


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def write_config(path, manifest, epochs=1, **train):
    doc = {"data": {"manifest": str(manifest)}, "model": dict(SMALL_MODEL),
           "train": {"epochs": epochs, "batch_size": 8, **train}, "eval": {"plots": 2}}
    path.write_text(json.dumps(doc))
    return path


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    return cmd_synth(root, 20, seed=3)


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = write_config(root / "cfg.json", dataset, epochs=1)
    cmd_train(cfg, root / "out")
    return cfg, root / "out"


class TestSynth:
    def test_counts(self, tmp_path):
        manifest = cmd_synth(tmp_path, 10, seed=0)
        assert len(read_manifest(manifest)) == 10
        assert len(list((tmp_path / "segments").glob("*.f32"))) == 20

    def test_byte_identical(self, tmp_path):
        cmd_synth(tmp_path / "a", 6, seed=5)
        cmd_synth(tmp_path / "b", 6, seed=5)
        assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")

    def test_split_sizes(self, tmp_path):
        recs = read_manifest(cmd_synth(tmp_path, 2000, seed=1))
        assert Counter(r.split for r in recs) == {"train": 1600, "val": 200, "test": 200}

    def test_records_carry_pressure_truth(self, dataset):
        rec = read_manifest(dataset)[0]
        assert set(rec.extra) == {"sbp", "dbp"} and rec.extra["sbp"] > rec.extra["dbp"]

    def test_bad_pair_count(self, tmp_path):
        assert main(["synth", "--out", str(tmp_path), "--pairs", "0"]) == 2


class TestConfig:
    def test_all_violations_listed(self):
        with pytest.raises(CliError) as exc:
            parse_run_config({"model": {"mode": "x", "width": 3}, "train": {"batch_size": 0},
                              "extra": {}, "eval": {"mask_ratios": [1.5]}})
        msg = str(exc.value)
        for part in ("extra: unknown section", "model.width: unknown key", "mode", "batch_size",
                     "eval.mask_ratios"):
            assert part in msg

    def test_missing_file(self, tmp_path):
        with pytest.raises(CliError, match="not found"):
            cli.load_run_config(tmp_path / "none.json")

    def test_environment_override(self, tmp_path, dataset, monkeypatch):
        cfg = write_config(tmp_path / "real.json", dataset, epochs=3)
        monkeypatch.setenv(cli.CONFIG_ENV, str(cfg))
        assert cli.load_run_config(tmp_path / "ignored.json").train.epochs == 3


class TestTrain:
    def test_zero_epochs(self, dataset, tmp_path):
        cfg = write_config(tmp_path / "cfg.json", dataset, epochs=0)
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
        assert sorted(p.name for p in (tmp_path / "o").glob("*.ckpt")) == ["last.ckpt"]
        assert (tmp_path / "o" / "train_log.csv").read_text().count("\n") == 1

    def test_one_row_per_epoch_and_rerun_identical(self, dataset, tmp_path):
        cfg = write_config(tmp_path / "cfg.json", dataset, epochs=2)
        cmd_train(cfg, tmp_path / "a")
        cmd_train(cfg, tmp_path / "b")
        log = (tmp_path / "a" / "train_log.csv").read_text()
        assert len(log.splitlines()) == 3
        assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")

    def test_effective_config_written(self, trained):
        _, out = trained
        doc = json.loads((out / "effective_config.json").read_text())
        assert doc["model"]["encoder_channels"] == [4, 8]

    def test_missing_manifest(self, tmp_path):
        cfg = write_config(tmp_path / "cfg.json", tmp_path / "nope.json")
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2


class TestEval:
    def test_single_row(self, trained, dataset, tmp_path):
        _, out = trained
        res = cmd_eval(out / "last.ckpt", dataset, [0.1], tmp_path / "rep", plots=2)
        lines = res["csv"].read_text().splitlines()
        assert len(lines) == 2 and lines[0].startswith("mask_ratio,count,rmse_mean")
        assert len(list((tmp_path / "rep" / "plots").glob("*.png"))) == 2

    def test_five_rows(self, trained, dataset, tmp_path):
        _, out = trained
        code = main(["eval", "--checkpoint", str(out / "last.ckpt"), "--manifest", str(dataset),
                     "--mask-ratios", "0.1,0.3,0.5,0.7,0.9", "--report", str(tmp_path / "rep"),
                     "--plots", "0"])
        assert code == 0
        assert len((tmp_path / "rep" / "report.csv").read_text().splitlines()) == 6

    def test_reports_identical(self, trained, dataset, tmp_path):
        _, out = trained
        cmd_eval(out / "last.ckpt", dataset, [0.1, 0.5], tmp_path / "a", plots=1)
        cmd_eval(out / "last.ckpt", dataset, [0.1, 0.5], tmp_path / "b", plots=1)
        assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")

    def test_missing_checkpoint_leaves_nothing(self, dataset, tmp_path):
        code = main(["eval", "--checkpoint", str(tmp_path / "none.ckpt"), "--manifest", str(dataset),
                     "--report", str(tmp_path / "rep")])
        assert code != 0
        assert not (tmp_path / "rep").exists()

    def test_config_mismatch_names_field(self, trained, dataset, tmp_path):
        _, out = trained
        doc = json.loads((out / "effective_config.json").read_text())
        doc["model"]["codebook_size"] = 16
        (tmp_path / "c.json").write_text(json.dumps(doc))
        with pytest.raises(CliError, match="codebook_size"):
            cmd_eval(out / "last.ckpt", dataset, [0.1], tmp_path / "rep", config=tmp_path / "c.json")
        assert not (tmp_path / "rep").exists()


class TestAblate:
    def test_single_run_table(self, dataset, tmp_path):
        cfg = write_config(tmp_path / "cfg.json", dataset, epochs=1)
        res = cmd_ablate(cfg, tmp_path / "abl", modes=["full"], seeds=[0])
        lines = res["csv"].read_text().splitlines()
        assert lines[0] == "method,cam,msek,runs,rmse,prd,fd"
        assert len(lines) == 2 and lines[1].startswith("CAM+MSEK,1,1,1,")

    def test_table_order_and_medians(self):
        runs = {m: [{"rmse_mean": v, "prd_mean": 2 * v, "fd_mean": 3 * v} for v in vals]
                for m, vals in {"cam+msek": [1, 5, 2], "nn-vq": [4, 4, 9], "cam": [3, 1, 7],
                                "msek": [0, 0, 0]}.items()}
        rows = cli.ablation_table(runs)
        assert [r["method"] for r in rows] == ["NN-VQ-baseline", "MSEK-only", "CAM-only", "CAM+MSEK"]
        assert [r["rmse"] for r in rows] == [4, 0, 3, 2]
        assert rows[-1]["fd"] == 6

    def test_unknown_mode(self, dataset, tmp_path):
        cfg = write_config(tmp_path / "cfg.json", dataset)
        with pytest.raises(CliError, match="unknown mode"):
            cmd_ablate(cfg, tmp_path / "abl", modes=["bogus"], seeds=[0])


class TestMetricCommand:
    def test_prints_json(self, dataset, capsys):
        rec = read_manifest(dataset)[0]
        seg = dataset.parent / rec.abp_path
        assert main(["metric", str(seg), str(seg)]) == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc == {"rmse": 0.0, "prd": 0.0, "fd": 0.0}
