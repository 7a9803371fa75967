import csv
import json
import shutil
import subprocess
import sys
import textwrap

import pytest

from atlas_lab.cli import EXIT_CONFIG, EXIT_HASH, EXIT_LOCKED, EXIT_MISSING, EXIT_OK, main

TINY = """
seed = 3

[data]
n_lat = 17
n_lon = 32
lmax = 8
nu = 0.005
channel_names = ["a", "b"]
n_steps = 300
train_fraction = 0.7

[nets.predictive]
state_embed = 8
history_embed = 8
depth = 1
num_heads = 2
freq_dim = 8

[nets.decoder]
hires_embed = 8
residual_embed = 8
depth = 1
num_heads = 2
freq_dim = 8

[method.crps]
lmax = 2

[training]
steps = 20
warmup_steps = 5
cycles = 1
batch_size = 4

[decoder_training]
steps = 20
warmup_steps = 5
batch_size = 4

[evaluation]
members = 4
init_times = 3
leads = [1, 3]
spectra_lmax = 8
"""


def write_cfg(path, text=TINY, **extra):
    path.write_text(textwrap.dedent(text) + "".join(extra.values()))
    return str(path)


def cli(cfg, out, *args):
    return main([args[0], "--config", cfg, "--out", str(out), *args[1:]])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_cfg(root / "tiny.toml")
    out = root / "run"
    for cmd in (["gen-data"], ["train-decoder"], ["train"], ["evaluate"], ["evaluate", "--model", "oracle"],
                ["compare"], ["forecast"], ["spectra"]):
        assert cli(cfg, out, *cmd) == EXIT_OK, cmd
    return root, cfg, out


def test_config_errors(tmp_path):
    out = tmp_path / "o"
    assert cli(write_cfg(tmp_path / "a.toml", TINY.replace("seed = 3", "")), out, "gen-data") == EXIT_CONFIG
    assert cli(write_cfg(tmp_path / "b.toml", TINY, x="\n[latent]\nfudge = 1\n"), out, "gen-data") == EXIT_CONFIG
    assert cli(write_cfg(tmp_path / "c.toml", TINY.replace("lmax = 2", "lmax = 9")), out, "train") == EXIT_CONFIG
    bad_path = TINY.replace("n_steps = 300", 'path = "nowhere.atls"')
    assert cli(write_cfg(tmp_path / "d.toml", bad_path), out, "gen-data") == EXIT_CONFIG
    assert cli(str(tmp_path / "missing.toml"), out, "gen-data") == EXIT_CONFIG
    assert main(["train", "--config", write_cfg(tmp_path / "e.toml"), "--out", str(out), "--method", "edm"]) \
        == EXIT_MISSING


def test_missing_artifact_names_stage(tmp_path, caplog):
    cfg = write_cfg(tmp_path / "t.toml")
    assert cli(cfg, tmp_path / "empty", "train") == EXIT_MISSING
    assert "missing stage 'data'" in caplog.text


def test_outputs_carry_hash_and_manifest(pipeline):
    _, _, out = pipeline
    for p in out.glob("*.csv"):
        with open(p, newline="") as f:
            rows = list(csv.DictReader(f))
        assert rows and len({r["config_hash"] for r in rows}) == 1, p.name
    man = json.loads((out / "manifest-evaluate-crps.json").read_text())
    assert set(man["upstream"]) == {"data", "decoder", "train-crps"}
    assert {"python", "numpy", "torch"} <= set(man["versions"]) and man["seed"] == 3
    with open(out / "scorecard-crps-vs-oracle.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    assert {r["metric"] for r in rows} == {"crps", "ermse"} and len(rows) == 8


def test_evaluate_rerun_is_byte_identical(pipeline):
    _, cfg, out = pipeline
    before = {p.name: p.read_bytes() for p in out.glob("metrics-crps*")}
    assert cli(cfg, out, "evaluate") == EXIT_OK
    assert {p.name: p.read_bytes() for p in out.glob("metrics-crps*")} == before


def test_hash_mismatch_and_override(pipeline, tmp_path):
    root, _, out = pipeline
    copy = tmp_path / "run"
    shutil.copytree(out, copy)
    cfg = write_cfg(tmp_path / "m.toml", TINY.replace("[decoder_training]\nsteps = 20", "[decoder_training]\nsteps = 21"))
    assert cli(cfg, copy, "train") == EXIT_HASH
    assert main(["train", "--config", cfg, "--out", str(copy), "--override-hash-check"]) == EXIT_OK


def test_compare_refuses_mismatched_reports(pipeline, tmp_path):
    _, cfg, out = pipeline
    copy = tmp_path / "run"
    shutil.copytree(out, copy)
    meta = json.loads((copy / "metrics-oracle.json").read_text())
    meta["grid"] = [9, 16]
    (copy / "metrics-oracle.json").write_text(json.dumps(meta))
    assert cli(cfg, copy, "compare") == EXIT_CONFIG
    assert cli(cfg, copy, "compare", "--b", "edm") == EXIT_MISSING


def test_locked_output_directory(pipeline, tmp_path):
    _, cfg, _ = pipeline
    out = tmp_path / "locked"
    out.mkdir()
    holder = subprocess.Popen(
        [sys.executable, "-c", "import sys, time; from filelock import FileLock; l = FileLock(sys.argv[1]); "
                               "l.acquire(); print('held', flush=True); time.sleep(60)", str(out / ".lock")],
        stdout=subprocess.PIPE, text=True)
    try:
        assert holder.stdout.readline().strip() == "held"
        assert cli(cfg, out, "gen-data") == EXIT_LOCKED
    finally:
        holder.kill()
        holder.wait()
    assert cli(cfg, out, "gen-data") == EXIT_OK
