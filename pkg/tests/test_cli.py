import csv
import subprocess
import sys

import numpy as np
import pytest

from dualdiff.cli import main, read_run_config
from dualdiff.data import generate_synthetic, load_tsv, save_tsv
from dualdiff.schedule import GAMMA_MAX, GAMMA_MIN

SMALL_INI = """\
[train]
epochs = {epochs}
batch_size = 8
learning_rate = 1e-3
seed = 3

[diffusion]
M_past = 4
M_fut = 8

[model]
d_ctx = 8
d_traj = 8
d_model = 16
d_ff = 32
n_heads = 2
n_blocks = 1
d_gamma = 8
"""


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    assert main(["-q", "synth", "--kind", "mix", "--n", "24", "--noise-std", "0.02",
                 "--seed", "1", "--out", str(d / "train.tsv")]) == 0
    (d / "run.ini").write_text(SMALL_INI.format(epochs=2))
    assert main(["-q", "train", "--config", str(d / "run.ini"), "--data", str(d / "train.tsv"),
                 "--out", str(d / "out")]) == 0
    return d


def test_synth_round_trip_and_determinism(tmp_path):
    a, b = tmp_path / "a.tsv", tmp_path / "b.tsv"
    for p in (a, b):
        assert main(["-q", "synth", "--kind", "turning", "--n", "5", "--seed", "4",
                     "--out", str(p)]) == 0
    assert a.read_bytes() == b.read_bytes()
    ref = generate_synthetic(5, "turning", 0.0, seed=4)
    back = load_tsv(a)
    assert len(back) == 5
    assert all(np.array_equal(x.track, y.track) for x, y in zip(ref, back))


def test_synth_bad_kind_is_usage_error(tmp_path, capsys):
    with pytest.raises(SystemExit) as info:
        main(["synth", "--kind", "bogus", "--out", str(tmp_path / "x.tsv")])
    assert info.value.code == 2


def test_train_missing_data_exits_2(tmp_path, capsys):
    code = main(["train", "--data", str(tmp_path / "nope.tsv"), "--out", str(tmp_path / "o")])
    assert code == 2
    assert "nope.tsv" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def test_bad_config_lists_every_problem(tmp_path, capsys):
    (tmp_path / "bad.ini").write_text("[train]\nepochs = many\nwarmup = 3\n[extra]\na = 1\n")
    overrides, run, problems = read_run_config(tmp_path / "bad.ini")
    assert len(problems) == 3
    assert main(["train", "--config", str(tmp_path / "bad.ini")]) == 2
    err = capsys.readouterr().err
    assert "epochs" in err and "warmup" in err and "[extra]" in err and "no data path" in err


def test_train_outputs_and_resume(trained, tmp_path):
    out = trained / "out"
    loss = rows(out / "loss.csv")
    assert loss[0] == ["epoch", "l1", "l2", "total"]
    assert [r[0] for r in loss[1:]] == ["1", "2"]
    # continue to epoch 3 from the saved checkpoint
    (tmp_path / "more.ini").write_text(SMALL_INI.format(epochs=3))
    assert main(["-q", "train", "--config", str(tmp_path / "more.ini"),
                 "--data", str(trained / "train.tsv"), "--out", str(tmp_path / "o2"),
                 "--resume", str(out / "checkpoint.ddc")]) == 0
    resumed = rows(tmp_path / "o2" / "loss.csv")
    assert [r[0] for r in resumed[1:]] == ["1", "2", "3"]
    assert resumed[1:3] == loss[1:]


def test_train_is_byte_reproducible(trained, tmp_path):
    assert main(["-q", "train", "--config", str(trained / "run.ini"),
                 "--data", str(trained / "train.tsv"), "--out", str(tmp_path / "again")]) == 0
    for name in ("loss.csv", "checkpoint.ddc"):
        assert (tmp_path / "again" / name).read_bytes() == (trained / "out" / name).read_bytes()


def test_sample_csv(trained, tmp_path):
    ckpt = str(trained / "out" / "checkpoint.ddc")
    win = tmp_path / "w.tsv"
    save_tsv(win, generate_synthetic(2, "constant-velocity", seed=9))
    outs = []
    for name in ("s1.csv", "s2.csv"):
        assert main(["-q", "sample", "--checkpoint", ckpt, "--input-window", str(win),
                     "--k", "1", "--seed", "5", "--out", str(tmp_path / name)]) == 0
        outs.append((tmp_path / name).read_bytes())
    assert outs[0] == outs[1]
    table = rows(tmp_path / "s1.csv")
    assert table[0] == ["scene_id", "agent_id", "kind", "candidate", "t", "x", "y", "u_x", "u_y"]
    body = table[1:]
    assert len(body) == 2 * (6 + 12)
    hist = [r for r in body if r[2] == "history"]
    fut = [r for r in body if r[2] == "future"]
    assert all(float(r[7]) > 0 and float(r[8]) > 0 for r in hist)
    assert sorted({int(r[4]) for r in hist}) == list(range(-7, -1))
    assert sorted({int(r[4]) for r in fut}) == list(range(1, 13))
    assert all(r[7] == "" for r in fut)


def test_sample_from_bare_observations(trained, tmp_path):
    win = tmp_path / "obs.tsv"
    win.write_text("0\t1\t0.0\t0.0\n10\t1\t0.5\t0.0\n0\t2\t3.0\t3.0\n10\t2\t3.0\t3.4\n")
    assert main(["-q", "sample", "--checkpoint", str(trained / "out" / "checkpoint.ddc"),
                 "--input-window", str(win), "--k", "3", "--seed", "1",
                 "--out", str(tmp_path / "s.csv")]) == 0
    assert len(rows(tmp_path / "s.csv")) == 1 + 2 * (6 + 3 * 12)


def test_eval_report(trained, tmp_path, capsys):
    capsys.readouterr()
    assert main(["-q", "eval", "--checkpoint", str(trained / "out" / "checkpoint.ddc"),
                 "--data", str(trained / "train.tsv"), "--k", "2", "--seed", "0",
                 "--out", str(tmp_path / "r.csv")]) == 0
    printed = capsys.readouterr().out.splitlines()
    table = rows(tmp_path / "r.csv")
    assert table[0] == ["scene", "n_windows", "min_ade", "min_fde", "k"]
    assert printed == [",".join(r) for r in table]
    assert table[-1][0] == "ALL" and table[-1][1] == "24" and table[-1][4] == "2"
    assert float(table[-1][2]) >= 0


def test_missing_checkpoint_is_usage_error(tmp_path):
    assert main(["-q", "eval", "--checkpoint", str(tmp_path / "x"), "--data", "y"]) == 2


def test_corrupt_checkpoint_is_runtime_error(trained, tmp_path):
    bad = tmp_path / "bad.ddc"
    bad.write_bytes((trained / "out" / "checkpoint.ddc").read_bytes()[:500])
    assert main(["-q", "schedule-dump", "--checkpoint", str(bad), "--u-values", "0.1",
                 "--out", str(tmp_path / "d")]) == 1


def test_schedule_dump(trained, tmp_path):
    out = tmp_path / "dump"
    assert main(["-q", "schedule-dump", "--checkpoint", str(trained / "out" / "checkpoint.ddc"),
                 "--u-values", "0.001,0.1,10", "--out", str(out)]) == 0
    curves = []
    for i in range(3):
        wide = rows(out / f"schedule_u{i:02d}.csv")
        assert len(wide[0]) == 1 + 3 * 12
        assert len(wide) == 1 + 8 + 1
        vals = np.array(wide[1:], dtype=float)
        gam = vals[:, 1::3]
        assert np.all(np.abs(gam[0] - GAMMA_MIN) <= 1e-12)
        assert np.all(np.abs(gam[-1] - GAMMA_MAX) <= 1e-12)
        np.testing.assert_allclose(vals[:, 2::3] + vals[:, 3::3], 1.0, atol=1e-12)
        curves.append(gam)
        long = rows(out / f"schedule_u{i:02d}_long.csv")
        assert long[0] == ["step", "timestep", "gamma", "alpha2", "sigma2", "snr"]
        assert len(long) == 1 + 9 * 12
    assert not np.allclose(curves[0], curves[2])


def test_schedule_dump_rejects_bad_u(trained, tmp_path):
    assert main(["-q", "schedule-dump", "--checkpoint", str(trained / "out" / "checkpoint.ddc"),
                 "--u-values", "0.1,-2", "--out", str(tmp_path / "d")]) == 2


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "dualdiff", "synth", "--n", "2", "--seed", "0",
                           "--out", str(tmp_path / "m.tsv")], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert len(load_tsv(tmp_path / "m.tsv")) == 2
