import numpy as np
import pytest

from wbdit.cli import EXIT_CODES, CliError, RunConfig, closed_form_block_params, main, parse_config_text
from wbdit.data import load_csv
from wbdit.metrics import MetricReport
from wbdit.model import load_checkpoint

SMALL = [
    "--patch-size", "2", "--hidden-dim", "8", "--depth", "1", "--heads", "2",
    "--subspace-dim", "4", "--T", "20", "--batch-size", "16",
]


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture
def dataset(tmp_path):
    out = tmp_path / "gen"
    assert run("gen-data", "--out", out, "--seed", 7, "--cells", 40, "--genes", 6) == 0
    return out / "data.csv"


@pytest.fixture
def trained(tmp_path, dataset):
    out = tmp_path / "train"
    assert run("train", "--out", out, "--data", dataset, "--epochs", 2, "--checkpoint-every", 1, *SMALL) == 0
    return out


def test_gen_data_is_byte_identical_and_echoes_spec(tmp_path):
    for name in ("a", "b"):
        assert run("gen-data", "--out", tmp_path / name, "--seed", 7) == 0
    a = (tmp_path / "a" / "data.csv").read_bytes()
    assert a == (tmp_path / "b" / "data.csv").read_bytes()
    first = a.decode().splitlines()[0]
    assert first.startswith("# wbdit gen-data spec=") and '"seed": 7' in first
    m = load_csv(tmp_path / "a" / "data.csv")
    assert (m.cells, m.genes) == (500, 8)


def test_gen_data_zero_cells_is_config_error(tmp_path, capsys):
    assert run("gen-data", "--out", tmp_path, "--cells", 0) == EXIT_CODES["config"]
    err = capsys.readouterr().err.strip()
    assert err.startswith("error: config:") and len(err.splitlines()) == 1


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# comment\ngenes = 3\ncells = 5  # trailing\nseed = 1\n")
    assert run("gen-data", "--config", cfg, "--out", tmp_path / "o", "--cells", 4) == 0
    m = load_csv(tmp_path / "o" / "data.csv")
    assert (m.cells, m.genes) == (4, 3)
    echo = (tmp_path / "o" / "config.txt").read_text()
    assert "cells = 4" in echo and "genes = 3" in echo and "seed = 1" in echo


def test_unknown_config_key_rejected(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("genes = 3\nlearnig_rate = 1\n")
    assert run("gen-data", "--config", cfg, "--out", tmp_path) == EXIT_CODES["config"]
    with pytest.raises(CliError):
        parse_config_text("nonsense\n")


def test_bad_flag_value(tmp_path):
    assert run("gen-data", "--out", tmp_path, "--cells", "many") == EXIT_CODES["config"]


def test_missing_config_file(tmp_path):
    assert run("gen-data", "--config", tmp_path / "nope.cfg") == EXIT_CODES["io"]


def test_train_writes_log_and_checkpoints(trained):
    rows = (trained / "train_log.csv").read_text().splitlines()
    assert rows[0] == "epoch,wall_seconds,loss"
    assert [r.split(",")[0] for r in rows[1:]] == ["1", "2"]
    assert all(float(r.split(",")[1]) >= 0 for r in rows[1:])
    assert sorted(p.name for p in (trained / "checkpoints").iterdir()) == ["epoch_000001.wbdt", "epoch_000002.wbdt"]
    ckpt = load_checkpoint(trained / "checkpoint.wbdt")
    assert ckpt.epoch == 2 and ckpt.step == 6
    assert ckpt.metadata["transform_record"][0]["step"] == "log1p"


def test_train_zero_epochs_writes_initial_checkpoint(tmp_path, dataset):
    assert run("train", "--out", tmp_path, "--data", dataset, "--epochs", 0, *SMALL) == 0
    ckpt = load_checkpoint(tmp_path / "checkpoint.wbdt")
    assert ckpt.step == 0 and ckpt.epoch == 0
    assert np.all(ckpt.params["final.W"] == 0)
    assert (tmp_path / "train_log.csv").read_text() == "epoch,wall_seconds,loss\n"


def test_train_is_reproducible(tmp_path, dataset, trained):
    out = tmp_path / "again"
    assert run("train", "--out", out, "--data", dataset, "--epochs", 2, "--checkpoint-every", 1, *SMALL) == 0
    assert (out / "checkpoint.wbdt").read_bytes() == (trained / "checkpoint.wbdt").read_bytes()


def test_resume_continues_step_counter(tmp_path, dataset, trained):
    out = tmp_path / "resumed"
    one = tmp_path / "one"
    assert run("train", "--out", one, "--data", dataset, "--epochs", 1, *SMALL) == 0
    assert run("train", "--out", out, "--data", dataset, "--epochs", 1, "--batch-size", 16,
               "--resume", one / "checkpoint.wbdt") == 0
    ckpt = load_checkpoint(out / "checkpoint.wbdt")
    assert ckpt.step == 6 and ckpt.epoch == 2
    assert (out / "checkpoint.wbdt").read_bytes() == (trained / "checkpoint.wbdt").read_bytes()


def test_train_missing_and_malformed_data(tmp_path):
    assert run("train", "--out", tmp_path, "--data", tmp_path / "none.csv") == EXIT_CODES["io"]
    bad = tmp_path / "bad.csv"
    bad.write_text("a,b\n1,2\n3\n")
    assert run("train", "--out", tmp_path, "--data", bad) == EXIT_CODES["data"]
    assert run("train", "--out", tmp_path) == EXIT_CODES["config"]


@pytest.mark.filterwarnings("ignore:overflow")
def test_train_divergence_exit_code(tmp_path, dataset):
    code = run("train", "--out", tmp_path, "--data", dataset, "--epochs", 3, "--learning-rate", 1e300, *SMALL)
    assert code == EXIT_CODES["diverged"]


def test_sample_ddim_byte_identical(tmp_path, trained):
    ck = trained / "checkpoint.wbdt"
    for name in ("a", "b"):
        args = ("sample", "--out", tmp_path / name, "--checkpoint", ck, "--sampler", "ddim", "--steps", 5, "--count", 7)
        assert run(*args) == 0
    a = (tmp_path / "a" / "samples.csv").read_bytes()
    assert a == (tmp_path / "b" / "samples.csv").read_bytes()
    text = a.decode()
    assert text.startswith("# wbdit sample ") and '"sampler": "ddim"' in text
    m = load_csv(tmp_path / "a" / "samples.csv")
    assert (m.cells, m.genes) == (7, 6) and m.gene_names[0] == "gene1"


def test_sample_ddpm_and_errors(tmp_path, trained):
    ck = trained / "checkpoint.wbdt"
    assert run("sample", "--out", tmp_path / "p", "--checkpoint", ck, "--count", 3) == 0
    assert load_csv(tmp_path / "p" / "samples.csv").cells == 3
    assert run("sample", "--out", tmp_path, "--checkpoint", ck, "--count", 0) == EXIT_CODES["config"]
    assert run("sample", "--out", tmp_path, "--checkpoint", ck, "--sampler", "euler") == EXIT_CODES["config"]
    assert run("sample", "--out", tmp_path, "--checkpoint", tmp_path / "x.wbdt") == EXIT_CODES["io"]
    junk = tmp_path / "junk.wbdt"
    junk.write_bytes(b"hello world, not a checkpoint")
    assert run("sample", "--out", tmp_path, "--checkpoint", junk) == EXIT_CODES["checkpoint"]


def test_eval_real_vs_real(tmp_path, dataset):
    assert run("eval", "--out", tmp_path, "--real", dataset, "--gen", dataset, "--bins", 20, "--seed", 3) == 0
    rep = MetricReport.parse((tmp_path / "report.txt").read_text())
    assert float(rep["kl"]) == 0.0 and float(rep["wasserstein"]) == 0.0
    assert float(rep["mmd"]) < 0.05
    assert rep["bins"] == "20" and rep["seed"] == "3" and float(rep["bandwidth"]) > 0
    scatter = (tmp_path / "scatter.csv").read_text().splitlines()
    assert scatter[0] == "x,y,label" and len(scatter) == 81
    assert {line.rsplit(",", 1)[1] for line in scatter[1:]} == {"real", "generated"}


def test_eval_missing_file_and_mismatch(tmp_path, dataset, capsys):
    assert run("eval", "--out", tmp_path, "--real", dataset, "--gen", tmp_path / "nope.csv") == EXIT_CODES["io"]
    assert "nope.csv" in capsys.readouterr().err
    other = tmp_path / "g"
    run("gen-data", "--out", other, "--genes", 3, "--cells", 5)
    assert run("eval", "--out", tmp_path, "--real", dataset, "--gen", other / "data.csv") == EXIT_CODES["data"]


def test_bench_small(tmp_path, dataset):
    args = ["bench", "--out", tmp_path, "--data", dataset, "--bench-epochs", 2, "--bench-sample-count", 2,
            "--steps", 4, "--threads", 1, "--patch-size", 2, "--hidden-dim", 16, "--depth", 1, "--heads", 2,
            "--subspace-dim", 8, "--T", 20, "--batch-size", 16]
    assert run(*args) == 0
    rep = MetricReport.parse((tmp_path / "bench_report.txt").read_text())
    assert rep["threads"] == "1"
    for kind in ("whitebox", "baseline"):
        assert int(rep[f"{kind}.params_per_block"]) == int(rep[f"{kind}.params_per_block_closed_form"])
        assert int(rep[f"{kind}.checkpoint_bytes"]) == (tmp_path / f"bench_{kind}.wbdt").stat().st_size
    assert int(rep["whitebox.params_per_block"]) == closed_form_block_params("whitebox", 16, 2, 8) == 2 * 16 * 8 + 256
    assert int(rep["baseline.params_per_block"]) == 12 * 16 * 16
    assert float(rep["ratio.params_per_block"]) == pytest.approx((2 * 16 * 8 + 256) / (12 * 256))


def test_thread_env_override(tmp_path, dataset, monkeypatch):
    monkeypatch.setenv("WBDIT_THREADS", "lots")
    assert run("bench", "--out", tmp_path, "--data", dataset) == EXIT_CODES["config"]


def test_run_config_round_trip():
    cfg = RunConfig()
    echoed = parse_config_text(cfg.to_text())
    assert RunConfig(**echoed) == cfg
