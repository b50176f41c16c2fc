"""Command-line workflows end to end, in process."""

import numpy as np
import numpy.testing as npt
import pytest
from PIL import Image

from longiflow import tensor as T
from longiflow.cli import EVAL_HEADER, main
from longiflow.datasets import read_dataset, read_tensor
from longiflow.selftest import CheckRow


@pytest.fixture(autouse=True)
def clean_precision(monkeypatch):
    monkeypatch.delenv("LONGIFLOW_PRECISION", raising=False)
    monkeypatch.delenv("LONGIFLOW_THREADS", raising=False)
    yield
    T.set_precision("f32")


def run(*argv):
    return main([str(a) for a in argv])


def make_tiny_data(root, missing=True):
    args = ["make-data", "--dataset", "rotating-bar", "--out", root,
            "--split", "8,2,2", "--seq-len", "3", "--size", "6",
            "--seed", "4"]
    if missing:
        args += ["--p-missing-obs", "0.3", "--p-missing-pix", "0.3"]
    assert run(*args) == 0


def write_config(path, data_dir, out_dir, extra=""):
    path.write_text(f"""
[data]
path = {data_dir}

[model]
latent_dim = 2
enc_hidden = 16
dec_hidden = 16

[flows]
made_layers = 1
made_hidden = 8

[train]
epochs = 2
warmup_epochs = 1
batch_size = 4
lr = 0.005
lr_schedule =
seed = 1

[out]
dir = {out_dir}
{extra}""")


def test_make_data_is_reproducible_and_snapshotted(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    make_tiny_data(a)
    make_tiny_data(b)
    for name in ("train/data.lft", "train/obs_mask.lft",
                 "train/pixel_mask.lft", "manifest.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    snap = (a / "config.resolved").read_text()
    assert snap.startswith("# longiflow ")
    assert "p_missing_obs = 0.3" in snap
    _, manifest = read_dataset(a)
    assert manifest.p_missing_obs == 0.3
    assert manifest.splits == {"train": 8, "val": 2, "test": 2}


def test_make_data_missingness_frequency(tmp_path):
    out = tmp_path / "d"
    assert run("make-data", "--dataset", "rotating-bar", "--out", out,
               "--split", "40,1,1", "--seq-len", "6", "--size", "4",
               "--p-missing-obs", "0.4") == 0
    splits, _ = read_dataset(out)
    freq = splits["train"].obs_mask.mean()
    conditional = 0.6 / (1.0 - 0.4 ** 6)
    assert abs(freq - conditional) < 0.1


def test_full_pipeline(tmp_path, capsys):
    data = tmp_path / "data"
    make_tiny_data(data)
    cfgp = tmp_path / "exp.cfg"
    run_dir = tmp_path / "run"
    write_config(cfgp, data, run_dir)

    assert run("train", cfgp) == 0
    for name in ("best.lfc", "final.lfc", "metrics.csv", "config.resolved"):
        assert (run_dir / name).exists()
    assert (run_dir / "config.resolved").read_text().startswith("# longiflow ")
    metrics = (run_dir / "metrics.csv").read_text().splitlines()
    assert metrics[0] == "epoch,split,loss,recon,logq,logprior,lr"
    assert any(",val," in line for line in metrics[1:])

    # evaluation: pinned header, per-rep rows, aggregate, byte-stable rerun
    ev = tmp_path / "ev"
    assert run("eval-nll", "--ckpt", run_dir / "best.lfc", "--data", data,
               "--split", "test", "--importance-samples", "3",
               "--out", ev) == 0
    lines = (ev / "nll.csv").read_text().splitlines()
    assert lines[0] == EVAL_HEADER == "seq_id,metric,value,S,policy"
    assert sum(1 for l in lines if l.startswith("0,nll_rep")) == 5
    assert any(l.startswith("all,nll_mean,") for l in lines)
    assert any(l.startswith("all,nll_std,") for l in lines)
    assert all(l.endswith(",3,fixed-j") for l in lines[1:])
    first = (ev / "nll.csv").read_bytes()
    assert run("eval-nll", "--ckpt", run_dir / "best.lfc", "--data", data,
               "--split", "test", "--importance-samples", "3",
               "--out", ev) == 0
    assert (ev / "nll.csv").read_bytes() == first

    # imputation: both policies, tensors, preview image
    im = tmp_path / "im"
    assert run("impute", "--ckpt", run_dir / "best.lfc", "--data", data,
               "--split", "test", "--samples-per-index", "2",
               "--out", im) == 0
    completed = read_tensor(im / "completed.lft")
    assert completed.shape == (2, 3, 1, 6, 6)
    assert read_tensor(im / "naive_completed.lft").shape == completed.shape
    rows = (im / "impute.csv").read_text().splitlines()
    assert rows[0] == EVAL_HEADER
    assert any(",mse_missing," in r for r in rows)
    policies = {r.split(",")[-1] for r in rows[1:]}
    assert policies == {"best-j", "naive"}
    assert (im / "imputed.png").exists()

    # generation: unconditional grid, conditional run, chain-length guard
    ge = tmp_path / "ge"
    assert run("generate", "--ckpt", run_dir / "final.lfc", "--n", "2",
               "-T", "2", "--out", ge) == 0
    samples = read_tensor(ge / "samples.lft")
    assert samples.shape == (2, 3, 1, 6, 6)
    with Image.open(ge / "grid.png") as img:
        assert img.size == (3 * 6, 2 * 6)

    from longiflow.datasets import write_tensor
    splits, _ = read_dataset(data)
    frame = splits["test"].data[0, 0]
    write_tensor(tmp_path / "frame0.lft", frame)
    gc = tmp_path / "gc"
    assert run("generate", "--ckpt", run_dir / "final.lfc", "--n", "2",
               "-T", "2", "--condition-on", tmp_path / "frame0.lft",
               "--index", "1", "--out", gc) == 0
    assert read_tensor(gc / "samples.lft").shape == (2, 3, 1, 6, 6)

    assert run("generate", "--ckpt", run_dir / "final.lfc",
               "-T", "9", "--out", tmp_path / "bad") == 1


def test_usage_errors_exit_one(tmp_path, capsys):
    assert run("no-such-command") == 1
    assert run("eval-nll") == 1
    assert run("make-data", "--dataset", "rotating-bar",
               "--split", "1,2") == 1
    cfgp = tmp_path / "c.cfg"
    cfgp.write_text("[data]\npath = x\n")
    assert run("train", cfgp, "--set", "latent_dim:4") == 1


def test_runtime_errors_exit_two(tmp_path, capsys):
    assert run("eval-nll", "--ckpt", tmp_path / "missing.lfc",
               "--data", tmp_path) == 2
    cfgp = tmp_path / "c.cfg"
    cfgp.write_text(f"[data]\npath = {tmp_path / 'nowhere'}\n")
    assert run("train", cfgp) == 2
    err = capsys.readouterr().err
    assert "error" in err


def test_selftest_exit_codes(tmp_path, monkeypatch, capsys):
    assert run("selftest", "--only", "flow-roundtrip") == 0
    assert "pass" in capsys.readouterr().out
    assert run("selftest", "--only", "flux-capacitor") == 1

    import longiflow.cli as cli_mod
    monkeypatch.setattr(cli_mod, "run_battery",
                        lambda names=None: [CheckRow("rigged", False, "bad")])
    assert run("selftest") == 3


def test_precision_env_validation(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("LONGIFLOW_PRECISION", "f16")
    assert run("selftest", "--only", "flow-roundtrip") == 1
    monkeypatch.setenv("LONGIFLOW_PRECISION", "f64")
    assert run("selftest", "--only", "flow-roundtrip") == 0


def test_sweep_runs_each_combination(tmp_path, capsys):
    data = tmp_path / "data"
    make_tiny_data(data, missing=False)
    cfgp = tmp_path / "sweep.cfg"
    runs = tmp_path / "runs"
    write_config(cfgp, data, runs)
    text = cfgp.read_text().replace("latent_dim = 2", "latent_dim = 2|3")
    text = text.replace("epochs = 2", "epochs = 1")
    cfgp.write_text(text)
    assert run("sweep", cfgp) == 0
    for label in ("latent_dim=2", "latent_dim=3"):
        d = runs / label
        assert (d / "final.lfc").exists()
        assert f"latent_dim = {label[-1]}" in (d / "config.resolved").read_text()
