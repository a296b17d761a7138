import numpy as np
import pytest

from hekf_kit import cli, datagen, harness, vehicle
from conftest import SMALL


@pytest.fixture(scope="module")
def staged(tmp_path_factory):
    """generate, train and tune once with a small configuration."""
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "small.txt"
    harness.ProtocolConfig(**SMALL).write(str(cfg))
    data, bank, noise = root / "data", root / "bank.json", root / "noise.txt"
    assert cli.main(["generate", "--config", str(cfg), "--out", str(data)]) == 0
    assert cli.main(["train", "--config", str(cfg), "--data", str(data), "--out", str(bank)]) == 0
    assert cli.main(["tune", "--config", str(cfg), "--data", str(data), "--bank", str(bank),
                     "--out", str(noise)]) == 0
    return dict(root=root, cfg=str(cfg), data=data, bank=str(bank), noise=str(noise))


def test_generate_writes_every_split(staged):
    for split in harness.SPLITS:
        assert harness.read_datasets(str(staged["data"]), split)
    assert (staged["data"] / "config.txt").exists()
    assert (staged["data"] / "truth_params.txt").exists()


def test_config_is_echoed(tmp_path, capsys):
    assert cli.main(["generate", "--seed", "11", "--config", _tiny(tmp_path), "--out", str(tmp_path / "d")]) == 0
    out = capsys.readouterr().out
    assert "seed = 11" in out


def _tiny(tmp_path):
    path = tmp_path / "tiny.txt"
    harness.ProtocolConfig(**{**SMALL, "train_count": 2, "train_duration": 5.0,
                              "eval_duration": 5.0}).write(str(path))
    return str(path)


@pytest.mark.parametrize("method", ["ekf", "ann", "hekf"])
def test_run_writes_one_row_per_sample(staged, method, tmp_path):
    ds_path = sorted((staged["data"] / "eval").glob("*.csv"))[0]
    out = tmp_path / f"{method}.csv"
    args = ["run", "--config", staged["cfg"], "--method", method, "--data", str(ds_path), "--out", str(out),
            "--bank", staged["bank"], "--noise", staged["noise"]]
    assert cli.main(args) == 0
    lines = [ln for ln in out.read_text().splitlines() if not ln.startswith("#")]
    assert lines[0].startswith("time,")
    rows = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]])
    assert len(rows) == len(datagen.ManeuverDataset.read(str(ds_path)))
    # columns a method does not produce are absent or NaN; its estimates are always finite
    prefix = "soft." if method == "ann" else "mean."
    cols = [i for i, name in enumerate(lines[0].split(",")) if name.startswith(prefix)]
    assert cols and np.all(np.isfinite(rows[:, cols]))


def test_staged_evaluate_is_byte_identical(staged, tmp_path):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        args = ["evaluate", "--config", staged["cfg"], "--all", "--out", str(out), "--data", str(staged["data"]),
                "--bank", staged["bank"], "--noise", staged["noise"]]
        assert cli.main(args) == 0
        outs.append(out)
    for f in ("report.csv", "report.txt", "confidence.csv"):
        assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes()


def test_evaluate_single_maneuver(staged, tmp_path):
    args = ["evaluate", "--config", staged["cfg"], "--maneuver", datagen.OOD_LOAD, "--out", str(tmp_path),
            "--data", str(staged["data"]), "--bank", staged["bank"], "--noise", staged["noise"]]
    assert cli.main(args) == 0
    assert datagen.OOD_LOAD in (tmp_path / "report.csv").read_text()


def test_identify_tiny_run(staged, tmp_path):
    out, hist = tmp_path / "ident.txt", tmp_path / "hist.csv"
    args = ["identify", "--config", staged["cfg"], "--data", str(staged["data"]), "--out", str(out),
            "--history", str(hist), "--swarm", "4", "--iterations", "2", "--max-maneuvers", "1",
            "--duration", "2"]
    assert cli.main(args) == 0
    identified = vehicle.load_params(str(out))
    assert identified.m1 > 0
    assert "final NMSE" in out.read_text()
    assert len(hist.read_text().strip().splitlines()) >= 2


def test_unknown_method_is_a_usage_error(capsys):
    assert cli.main(["run", "--method", "kalman", "--data", "x.csv", "--out", "y.csv"]) == 2
    assert capsys.readouterr().err.startswith("error:")


def test_missing_file_reports_one_error_line(tmp_path, capsys):
    status = cli.main(["run", "--method", "ekf", "--data", str(tmp_path / "nope.csv"), "--out", str(tmp_path / "o")])
    err = capsys.readouterr().err.strip().splitlines()
    assert status == 1
    assert len(err) == 1 and err[0].startswith("error:")


def test_ann_without_bank_fails(staged, tmp_path, capsys):
    ds_path = sorted((staged["data"] / "eval").glob("*.csv"))[0]
    status = cli.main(["run", "--method", "ann", "--data", str(ds_path), "--out", str(tmp_path / "o.csv")])
    assert status == 1
    assert "--bank" in capsys.readouterr().err
