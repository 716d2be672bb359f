import csv
import json

import pytest

from ipnet.channels import load_dataset
from ipnet.cli import main, read_config, ConfigError
from ipnet.evaluation import CSV_COLUMNS, git_blob_hash


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def read_rows(path):
    with open(path) as f:
        return list(csv.DictReader(f))


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """Tiny 2x2 datasets and one-epoch checkpoints, perfect CSI and PNR 20 dB."""
    d = tmp_path_factory.mktemp("trained")
    assert main(["gen", "--m", "2", "--k", "2", "--count", "200", "--seed", "1", "--out", str(d / "p.ipds")]) == 0
    assert main(["gen", "--m", "2", "--k", "2", "--count", "200", "--seed", "2", "--pnr-db", "20",
                 "--out", str(d / "e.ipds")]) == 0
    for tag in ("p", "e"):
        for v in ("ipnet", "blackbox"):
            assert main(["train", "--dataset", str(d / f"{tag}.ipds"), "--variant", v, "--epochs", "1",
                         "--batch-size", "50", "--out", str(d / f"{tag}_{v}.ipck")]) == 0
    return d


class TestGen:
    def test_writes_dataset_and_summary(self, tmp_path, capsys):
        code, out, _ = run(capsys, "gen", "--m", 3, "--k", 2, "--count", 40, "--seed", 5, "--out", tmp_path / "d.ipds")
        assert code == 0
        assert "count=40" in out and "seed=5" in out
        d = load_dataset(tmp_path / "d.ipds")
        assert (d.count, d.m, d.k, d.seed) == (40, 3, 2, 5)

    def test_rerun_byte_identical(self, tmp_path, capsys):
        for name in ("a", "b"):
            run(capsys, "gen", "--count", 30, "--seed", 9, "--pnr-db", 12.5, "--out", tmp_path / name / "d.ipds")
        a, b = tmp_path / "a" / "d.ipds", tmp_path / "b" / "d.ipds"
        assert a.read_bytes() == b.read_bytes()

    def test_count_zero_rejected(self, tmp_path, capsys):
        code, _, err = run(capsys, "gen", "--count", 0, "--out-dir", tmp_path)
        assert code == 2
        report = json.loads(err.strip().splitlines()[-1])
        assert report["status"] == "error" and "count" in report["message"]
        assert not list(tmp_path.iterdir())

    def test_env_output_dir(self, tmp_path, capsys, monkeypatch):
        monkeypatch.setenv("IPNET_OUTPUT_DIR", str(tmp_path / "env"))
        assert run(capsys, "gen", "--count", 10)[0] == 0
        assert len(list((tmp_path / "env").glob("*.ipds"))) == 1

    def test_manifest_echoes_config(self, tmp_path, capsys):
        run(capsys, "gen", "--count", 10, "--seed", 3, "--out", tmp_path / "d.ipds")
        m = json.loads((tmp_path / "d.ipds.manifest.json").read_text())
        assert m["command"] == "gen"
        assert m["config"]["count"] == 10 and m["config"]["seed"] == 3 and m["config"]["pnr_db"] == "inf"
        assert m["outputs"] == {str(tmp_path / "d.ipds"): git_blob_hash(tmp_path / "d.ipds")}

    def test_bad_flag_value(self, capsys):
        with pytest.raises(SystemExit) as e:
            main(["gen", "--count", "many"])
        assert e.value.code == 2


class TestConfigFile:
    def test_file_values_and_flag_override(self, tmp_path, capsys):
        ini = tmp_path / "run.ini"
        ini.write_text("[gen]\nm = 2\nk = 2\ncount = 20\nseed = 4\n")
        run(capsys, "gen", "--config", ini, "--seed", 6, "--out", tmp_path / "d.ipds")
        d = load_dataset(tmp_path / "d.ipds")
        assert (d.m, d.count, d.seed) == (2, 20, 6)

    def test_unknown_key_rejected(self, tmp_path, capsys):
        ini = tmp_path / "run.ini"
        ini.write_text("[gen]\ncuont = 20\n")
        code, _, err = run(capsys, "gen", "--config", ini, "--out-dir", tmp_path)
        assert code == 2 and "cuont" in err

    def test_unknown_section_rejected(self, tmp_path):
        ini = tmp_path / "run.ini"
        ini.write_text("[plot]\nx = 1\n")
        with pytest.raises(ConfigError, match="plot"):
            read_config(ini)

    def test_bad_value_in_file(self, tmp_path, capsys):
        ini = tmp_path / "run.ini"
        ini.write_text("[eval]\ngrid = 0,ten\n")
        assert run(capsys, "eval", "--config", ini, "--exp", "ber")[0] == 2

    def test_other_sections_checked_too(self, tmp_path, capsys):
        ini = tmp_path / "run.ini"
        ini.write_text("[gen]\ncount = 5\n[train]\nepoch = 3\n")
        assert run(capsys, "gen", "--config", ini, "--out-dir", tmp_path)[0] == 2


class TestTrain:
    def test_smoke_one_epoch(self, trained):
        rows = read_rows(trained / "p_ipnet.metrics.csv")
        assert len(rows) == 1
        assert list(rows[0]) == ["epoch", "lr", "train_sum_rate", "val_sum_rate"]

    def test_identical_runs_identical_checkpoint(self, trained, tmp_path, capsys):
        run(capsys, "train", "--dataset", trained / "p.ipds", "--variant", "ipnet", "--epochs", 1,
            "--batch-size", 50, "--out", tmp_path / "again.ipck")
        assert git_blob_hash(tmp_path / "again.ipck") == git_blob_hash(trained / "p_ipnet.ipck")
        assert (tmp_path / "again.metrics.csv").read_bytes() == (trained / "p_ipnet.metrics.csv").read_bytes()

    def test_blackbox_manifest_counts(self, tmp_path, capsys):
        run(capsys, "gen", "--count", 40, "--out", tmp_path / "d.ipds")
        code, out, _ = run(capsys, "train", "--dataset", tmp_path / "d.ipds", "--variant", "blackbox",
                           "--epochs", 1, "--batch-size", 20, "--out", tmp_path / "bb.ipck")
        assert code == 0 and "730,848 trainable" in out
        m = json.loads((tmp_path / "bb.ipck.manifest.json").read_text())
        assert m["parameters"] == {"trainable": 730_848, "non_trainable": 3_904}
        assert str(tmp_path / "d.ipds") in m["inputs"]

    def test_no_input_scaling(self, trained, tmp_path, capsys):
        run(capsys, "train", "--dataset", trained / "p.ipds", "--epochs", 1, "--batch-size", 50,
            "--no-input-scaling", "--out", tmp_path / "raw.ipck")
        _, out, _ = run(capsys, "inspect", tmp_path / "raw.ipck")
        assert json.loads(out)["metadata"]["input_scaling"] is False

    def test_missing_dataset(self, tmp_path, capsys):
        assert run(capsys, "train", "--dataset", tmp_path / "nope.ipds")[0] == 2
        assert run(capsys, "train", "--out-dir", tmp_path)[0] == 2

    def test_unknown_variant(self, trained, capsys):
        assert run(capsys, "train", "--dataset", trained / "p.ipds", "--variant", "resnet")[0] == 2


class TestEval:
    def test_sumrate_snr_schema(self, tmp_path, capsys):
        code, _, _ = run(capsys, "eval", "--exp", "sumrate-snr", "--schemes", "mmse,zf,mrt", "--grid", "0,10,20",
                         "--trials", 40, "--out", tmp_path / "r.csv")
        assert code == 0
        rows = read_rows(tmp_path / "r.csv")
        assert tuple(rows[0]) == CSV_COLUMNS
        assert len(rows) == 9
        assert {r["scheme"] for r in rows} == {"mmse", "zf", "mrt"}

    def test_ber_has_noiseless_zf_row(self, tmp_path, capsys):
        code, _, _ = run(capsys, "eval", "--exp", "ber", "--schemes", "mmse", "--grid", "0,10",
                         "--channels", 100, "--symbols", 100, "--out", tmp_path / "b.csv")
        assert code == 0
        rows = read_rows(tmp_path / "b.csv")
        noiseless = [r for r in rows if r["scheme"] == "zf-noiseless"]
        assert len(noiseless) == 1 and float(noiseless[0]["mean"]) == 0.0
        assert noiseless[0]["axis_db"] == "inf"

    def test_results_byte_identical(self, trained, tmp_path, capsys):
        for name in ("a", "b"):
            run(capsys, "eval", "--exp", "sumrate-pnr", "--m", 2, "--k", 2, "--schemes", "mmse,ipnet",
                "--checkpoints", trained / "p_ipnet.ipck", "--trials", 30, "--out", tmp_path / name / "r.csv")
        for f in ("r.csv", "r.csv.manifest.json"):
            a, b = (tmp_path / x / f for x in "ab")
            assert a.read_bytes().replace(b"/a/", b"/b/") == b.read_bytes()

    def test_generalization_summary(self, trained, tmp_path, capsys):
        code, out, _ = run(capsys, "eval", "--exp", "generalization", "--train-pnr", 20,
                           "--schemes", "ipnet,blackbox,mmse",
                           "--checkpoints", f"{trained / 'e_ipnet.ipck'},{trained / 'e_blackbox.ipck'}",
                           "--grid", "0,20", "--trials", 40, "--out", tmp_path / "g.csv")
        assert "ordering summary (pnr_db)" in out
        assert out.count("ipnet >= blackbox") == 2
        manifest = json.loads((tmp_path / "g.csv.manifest.json").read_text())
        assert len(manifest["assertions"]) == 2
        assert code == (0 if manifest["status"] == "ok" else 1)
        assert len(manifest["inputs"]) == 2

    def test_generalization_training_pnr_mismatch(self, trained, tmp_path, capsys):
        code, _, err = run(capsys, "eval", "--exp", "generalization", "--train-pnr", 10, "--schemes", "ipnet",
                           "--checkpoints", trained / "e_ipnet.ipck", "--out-dir", tmp_path)
        assert code == 2 and "PNR" in err

    def test_failed_assertion_exit_code(self, tmp_path, capsys):
        code, out, _ = run(capsys, "eval", "--exp", "sumrate-snr", "--schemes", "mmse,mrt", "--grid", 20,
                           "--trials", 100, "--asserts", "mrt>mmse", "--out", tmp_path / "r.csv")
        assert code == 1
        report = json.loads(out.strip().splitlines()[-1])
        assert report["status"] == "failed" and report["failures"][0]["check"] == "mrt >= mmse"
        assert (tmp_path / "r.csv").exists()

    def test_named_checkpoint(self, trained, tmp_path, capsys):
        code, _, _ = run(capsys, "eval", "--exp", "sumrate-snr", "--m", 2, "--k", 2, "--schemes", "mine-perfect",
                         "--checkpoints", f"mine={trained / 'p_ipnet.ipck'}", "--grid", 10, "--trials", 20,
                         "--out", tmp_path / "r.csv")
        assert code == 0 and read_rows(tmp_path / "r.csv")[0]["scheme"] == "mine-perfect"

    def test_multiantenna_retrains(self, tmp_path, capsys):
        code, _, _ = run(capsys, "eval", "--exp", "multiantenna", "--m", 4, "--k", 2, "--n", 2,
                         "--schemes", "mmse,ipnet", "--train-count", 200, "--epochs", 1, "--grid", "0,10",
                         "--trials", 30, "--out", tmp_path / "ma.csv")
        assert code == 0
        assert len(read_rows(tmp_path / "ma.csv")) == 4
        assert (tmp_path / "ma_ipnet.ipck").exists()

    @pytest.mark.parametrize("argv", [
        ["--exp", "fig5"],
        ["--exp", "sumrate-snr", "--schemes", "ipnet"],
        ["--exp", "sumrate-snr", "--schemes", "ipnet", "--checkpoints", "missing.ipck"],
        ["--exp", "generalization", "--schemes", "mmse"],
        ["--exp", "sumrate-snr", "--asserts", "mmse"],
        ["--exp", "sumrate-snr", "--trials", "0"],
    ])
    def test_invalid(self, argv, tmp_path, capsys):
        assert run(capsys, "eval", *argv, "--out-dir", tmp_path)[0] == 2

    def test_dimension_mismatch(self, trained, tmp_path, capsys):
        code, _, err = run(capsys, "eval", "--exp", "sumrate-snr", "--schemes", "ipnet",
                           "--checkpoints", trained / "p_ipnet.ipck", "--out-dir", tmp_path)
        assert code == 2 and "expects" in err


class TestInspect:
    def test_checkpoint(self, trained, capsys):
        code, out, _ = run(capsys, "inspect", trained / "p_blackbox.ipck")
        info = json.loads(out)
        assert code == 0 and info["kind"] == "checkpoint" and info["variant"] == "blackbox"
        assert info["parameters"]["trainable"] == info["parameters"]["total"] - info["parameters"]["non_trainable"]
        assert info["metadata"]["epochs"] == 1

    def test_dataset(self, trained, capsys):
        info = json.loads(run(capsys, "inspect", trained / "e.ipds")[1])
        assert info["kind"] == "dataset" and info["pnr_db"] == 20.0 and info["count"] == 200

    def test_corrupt(self, tmp_path, capsys):
        (tmp_path / "x.ipck").write_bytes(b"garbage" * 10)
        assert run(capsys, "inspect", tmp_path / "x.ipck")[0] == 2
