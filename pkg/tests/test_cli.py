import json
import subprocess
import sys

import numpy as np
import pytest

from ncfreg.cli import main
from ncfreg.volume import Volume, VectorField, load_field, load_volume, save_field, save_volume

FAST = {"iterations": 3, "hidden_width": 16, "sm_channels": 4, "ssim_window": 5, "log_every": 0}


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    lines = [ln for ln in out.splitlines() if ln.strip()]
    payload = json.loads(lines[-1]) if code == 0 else None
    if code == 0:
        assert len(lines) == 1, "machine output must be a single JSON line"
    return code, payload, err


@pytest.fixture
def synth_dir(tmp_path, capsys):
    code, _, _ = run(capsys, "synth", "--size", "16", "--seed", "2", "--max-disp", "2", "--out-dir", str(tmp_path / "case"))
    assert code == 0
    return tmp_path / "case"


@pytest.fixture
def fast_config(tmp_path):
    p = tmp_path / "fast.json"
    p.write_text(json.dumps(FAST))
    return p


class TestSynth:
    def test_outputs(self, tmp_path, capsys):
        code, out, _ = run(capsys, "synth", "--size", "16", "16", "18", "--seed", "1", "--max-disp", "2",
                           "--out-dir", str(tmp_path / "c"))
        assert code == 0
        assert out["gt_folding"] == 0
        assert 0 < out["pre_dice"] <= 1
        assert load_volume(tmp_path / "c" / "fixed.mha").shape == (16, 16, 18)

    def test_zero_displacement_checksums_match(self, tmp_path, capsys):
        _, out, _ = run(capsys, "synth", "--size", "16", "--seed", "1", "--max-disp", "0", "--out-dir", str(tmp_path))
        assert out["checksums"]["fixed"] == out["checksums"]["moving"]

    def test_same_seed_same_directory(self, tmp_path, capsys):
        for d in ("a", "b"):
            run(capsys, "synth", "--size", "16", "--seed", "5", "--max-disp", "2", "--out-dir", str(tmp_path / d))
        for f in sorted((tmp_path / "a").iterdir()):
            assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes(), f.name

    def test_infeasible_is_exit_2(self, tmp_path, capsys):
        code, _, err = run(capsys, "synth", "--size", "16", "--seed", "1", "--max-disp", "50", "--out-dir", str(tmp_path))
        assert code == 2 and "fold-free" in err

    def test_bad_size(self, tmp_path, capsys):
        code, _, err = run(capsys, "synth", "--size", "16", "16", "--seed", "1", "--max-disp", "2", "--out-dir", str(tmp_path))
        assert code == 2 and "--size" in err


class TestRegister:
    def test_writes_outputs(self, tmp_path, capsys, synth_dir, fast_config):
        field, warped = tmp_path / "out" / "field.mha", tmp_path / "out" / "warped.mha"
        code, out, _ = run(capsys, "register", "--fixed", str(synth_dir / "fixed.mha"), "--moving",
                           str(synth_dir / "moving.mha"), "--out-field", str(field), "--out-warped", str(warped),
                           "--config", str(fast_config))
        assert code == 0
        assert set(out) >= {"initial", "final", "wall_time", "n_params", "mean_offset_voxels", "loss_log"}
        assert load_field(field).unit == "voxel_displacement"
        assert load_volume(warped).shape == (16, 16, 16)
        log = (tmp_path / "out" / "field_loss.csv").read_text().splitlines()
        assert log[0] == "step,lr,total,photometric,ssim,occupancy" and len(log) == 4

    def test_self_registration_small_offset(self, tmp_path, capsys, synth_dir, fast_config):
        f = str(synth_dir / "fixed.mha")
        code, out, _ = run(capsys, "register", "--fixed", f, "--moving", f, "--out-field", str(tmp_path / "f.mha"),
                           "--out-warped", str(tmp_path / "w.mha"), "--config", str(fast_config))
        assert code == 0 and out["mean_offset_voxels"] < 0.1

    def test_missing_moving_names_flag(self, capsys):
        with pytest.raises(SystemExit) as info:
            main(["register", "--fixed", "a.mha", "--out-field", "f.mha", "--out-warped", "w.mha"])
        assert info.value.code == 2
        assert "--moving" in capsys.readouterr().err

    def test_unknown_flag_rejected(self, capsys):
        with pytest.raises(SystemExit) as info:
            main(["warp", "--field", "f", "--in", "i", "--out", "o", "--bogus"])
        assert info.value.code == 2

    def test_unknown_config_key_warns(self, tmp_path, capsys, synth_dir):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({**FAST, "lr": 0.1}))
        f = str(synth_dir / "fixed.mha")
        with pytest.warns(UserWarning, match="lr"):
            code, _, _ = run(capsys, "register", "--fixed", f, "--moving", f, "--out-field", str(tmp_path / "f.mha"),
                             "--out-warped", str(tmp_path / "w.mha"), "--config", str(cfg))
        assert code == 0

    def test_unreadable_input_is_exit_2(self, tmp_path, capsys):
        code, _, err = run(capsys, "register", "--fixed", str(tmp_path / "nope.mha"), "--moving", "x.mha",
                           "--out-field", "f.mha", "--out-warped", "w.mha")
        assert code == 2 and "cannot read" in err

    def test_shape_mismatch_is_exit_2(self, tmp_path, capsys):
        save_volume(Volume(np.zeros((8, 8, 8))), tmp_path / "a.mha")
        save_volume(Volume(np.zeros((8, 8, 9))), tmp_path / "b.mha")
        code, _, err = run(capsys, "register", "--fixed", str(tmp_path / "a.mha"), "--moving", str(tmp_path / "b.mha"),
                           "--out-field", str(tmp_path / "f.mha"), "--out-warped", str(tmp_path / "w.mha"))
        assert code == 2 and "differ" in err

    def test_non_finite_is_exit_3(self, tmp_path, capsys, fast_config):
        f = np.full((8, 8, 8), 0.5, dtype=np.float32)
        f[0] = 0
        m = f.copy()
        m[2, 2, 2] = np.nan
        save_volume(Volume(f), tmp_path / "f.mha")
        # bypass Volume validation: write a NaN payload directly
        save_volume(Volume(f), tmp_path / "m.mha")
        raw = (tmp_path / "m.mha").read_bytes()
        payload = m.reshape(-1, order="F").astype("<f4").tobytes()
        (tmp_path / "m.mha").write_bytes(raw[: len(raw) - len(payload)] + payload)
        code, _, err = run(capsys, "register", "--fixed", str(tmp_path / "f.mha"), "--moving", str(tmp_path / "m.mha"),
                           "--out-field", str(tmp_path / "o.mha"), "--out-warped", str(tmp_path / "w.mha"),
                           "--config", str(fast_config))
        assert code == 3 and "step 0" in err

    def test_threads_env(self, monkeypatch, capsys, tmp_path):
        monkeypatch.setenv("NCF_THREADS", "many")
        code, _, err = run(capsys, "synth", "--size", "16", "--seed", "1", "--max-disp", "1", "--out-dir", str(tmp_path))
        assert code == 2 and "NCF_THREADS" in err


class TestWarpEval:
    def test_zero_field_is_bitwise_identity(self, tmp_path, capsys, rng):
        img = Volume(rng.normal(size=(6, 5, 4)).astype(np.float32))
        save_volume(img, tmp_path / "in.mha")
        save_field(VectorField(np.zeros((3, 6, 5, 4), np.float32), "voxel_displacement"), tmp_path / "zero.mha")
        code, _, _ = run(capsys, "warp", "--field", str(tmp_path / "zero.mha"), "--in", str(tmp_path / "in.mha"),
                         "--out", str(tmp_path / "out.mha"))
        assert code == 0
        assert load_volume(tmp_path / "out.mha").data.tobytes() == img.data.tobytes()

    def test_nearest_mask_values(self, tmp_path, capsys, synth_dir):
        code, _, _ = run(capsys, "warp", "--field", str(synth_dir / "gt_field.mha"), "--in",
                         str(synth_dir / "moving_mask.mha"), "--out", str(tmp_path / "m.mha"), "--interp", "nearest")
        assert code == 0
        assert set(np.unique(load_volume(tmp_path / "m.mha").data)) <= {0.0, 1.0}

    def test_shape_mismatch_is_exit_2(self, tmp_path, capsys, synth_dir):
        save_volume(Volume(np.zeros((8, 8, 8))), tmp_path / "small.mha")
        code, _, err = run(capsys, "warp", "--field", str(synth_dir / "gt_field.mha"), "--in", str(tmp_path / "small.mha"),
                           "--out", str(tmp_path / "o.mha"))
        assert code == 2 and "does not match" in err

    def test_eval_identical_masks(self, capsys, synth_dir):
        m = str(synth_dir / "fixed_mask.mha")
        gt = str(synth_dir / "gt_field.mha")
        code, out, _ = run(capsys, "eval", "--fixed-mask", m, "--warped-mask", m, "--pred-field", gt, "--gt-field", gt)
        assert code == 0
        assert out["dice"] == 1.0
        assert out["endpoint"] == {"mean": 0.0, "max": 0.0}
        assert out["folding"] == 0
        assert "tre" not in out

    def test_eval_omits_missing(self, capsys, synth_dir):
        m = str(synth_dir / "fixed_mask.mha")
        code, out, _ = run(capsys, "eval", "--fixed-mask", m, "--warped-mask", m)
        assert code == 0 and set(out) == {"dice"}

    def test_eval_gt_needs_pred(self, capsys, synth_dir):
        m = str(synth_dir / "fixed_mask.mha")
        code, _, err = run(capsys, "eval", "--fixed-mask", m, "--warped-mask", m, "--gt-field", str(synth_dir / "gt_field.mha"))
        assert code == 2 and "--pred-field" in err


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "ncfreg", "synth", "--size", "16", "--seed", "0", "--max-disp", "1",
                           "--out-dir", str(tmp_path)], capture_output=True, text=True, check=False)
    assert proc.returncode == 0, proc.stderr
    assert json.loads(proc.stdout)["gt_folding"] == 0
