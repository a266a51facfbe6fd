import numpy as np
import pytest

from strobecap.cli import EXIT_FAILURE, EXIT_OK, EXIT_USAGE, main
from strobecap.io import file_sha256, load_json, read_tensor, save_json, write_tensor
from strobecap.scene import FrameStack

SMALL_SIM = {"width": 24, "height": 24, "n_gaussians": 6, "n_cameras": 2, "n_strobes": 3}


def run(*argv):
    try:
        return main([str(a) for a in argv])
    except SystemExit as e:
        return e.code


def check_manifest(out):
    man = load_json(out / "manifest.json")
    for name, entry in man["artifacts"].items():
        assert entry["sha256"] == file_sha256(out / name), name
    return man


@pytest.fixture(scope="module")
def simulated(tmp_path_factory):
    root = tmp_path_factory.mktemp("sim")
    save_json(SMALL_SIM, root / "sim.json")
    out = root / "out"
    assert run("--out", out, "simulate", "--config", root / "sim.json") == EXIT_OK
    return out


class TestUsage:
    def test_unknown_command(self):
        assert run("frobnicate") == EXIT_USAGE

    def test_missing_required(self, tmp_path):
        assert run("--out", tmp_path, "design-strobe") == EXIT_USAGE

    def test_missing_input_file(self, tmp_path):
        code = run("--out", tmp_path, "decode", "--scene", tmp_path / "nope.json", "--rig",
                   tmp_path / "nope.json", "--schedule", tmp_path / "nope.json")
        assert code == EXIT_FAILURE

    def test_bad_gain(self, tmp_path):
        assert run("--out", tmp_path, "render-novel", "--scene", "a", "--schedule", "b",
                   "--gain", "bright") == EXIT_USAGE


class TestStrobe:
    def test_design(self, tmp_path):
        dest = tmp_path / "sched.json"
        assert run("--out", tmp_path, "design-strobe", "--n", 10, "--out", dest) == EXIT_OK
        doc = load_json(dest)
        assert len(doc["intensities"]) == 10 and "pwm" in doc
        man = check_manifest(tmp_path)
        assert man["command"] == "design-strobe"

    def test_quantize_census(self, tmp_path, capsys):
        assert run("--out", tmp_path, "quantize-pwm", "--n", 6) == EXIT_OK
        assert "175" in capsys.readouterr().out
        assert (tmp_path / "pwm.json").exists()

    def test_quantize_unique_fails(self, tmp_path):
        save_json({"intensities": [[0.4, 0.4, 0.4], [0.8, 0.8, 0.8]], "exposure": 1 / 60},
                  tmp_path / "s.json")
        code = run("--out", tmp_path, "quantize-pwm", "--schedule", tmp_path / "s.json", "--unique")
        assert code == EXIT_FAILURE


class TestPipeline:
    def test_simulate_outputs(self, simulated):
        man = check_manifest(simulated)
        assert man["held_out"] == [2]  # the novel camera is appended last
        stack = read_tensor(simulated / "encoded_cam0.strb")
        assert stack.frames.shape == (1, 24, 24, 3)
        assert read_tensor(simulated / "interframes_cam2.strb").frames.shape == (3, 24, 24, 1)

    def test_simulate_deterministic(self, simulated, tmp_path):
        save_json(SMALL_SIM, tmp_path / "sim.json")
        assert run("--out", tmp_path / "o", "simulate", "--config", tmp_path / "sim.json") == EXIT_OK
        for name in ("encoded_cam0.strb", "truth.json", "rig.json"):
            assert (tmp_path / "o" / name).read_bytes() == (simulated / name).read_bytes()

    def test_reconstruct_decode_render(self, simulated, tmp_path):
        rec = tmp_path / "rec"
        assert run("--out", rec, "reconstruct", "--input", simulated, "--iterations", 10) == EXIT_OK
        man = check_manifest(rec)
        assert "held_out_mae" in man
        lines = (rec / "loss.csv").read_text().splitlines()
        assert sum(1 for l in lines[1:] if not l.startswith("mae:")) == 11
        assert sum(1 for l in lines if l.startswith("mae:cam2:")) == 3
        dec = tmp_path / "dec"
        assert run("--out", dec, "decode", "--scene", rec / "scene.json", "--rig", simulated / "rig.json",
                   "--schedule", simulated / "schedule.json", "--cameras", 2) == EXIT_OK
        assert read_tensor(dec / "decoded_cam2.strb").frames.shape == (3, 24, 24, 1)
        nov = tmp_path / "nov"
        assert run("--out", nov, "render-novel", "--scene", simulated / "truth.json", "--schedule",
                   simulated / "schedule.json", "--width", 32, "--height", 16) == EXIT_OK
        assert read_tensor(nov / "novel.strb").frames.shape == (3, 16, 32, 1)
        assert (nov / "novel.png").exists()

    def test_calibrate(self, simulated, tmp_path):
        rng = np.random.default_rng(0)
        M = np.eye(3) + rng.uniform(-0.1, 0.1, (3, 3))
        ref = rng.uniform(10, 200, (8, 3))
        tiles = {"reference": "0", "tiles": {
            "0": {f"t{i}": ref[i].tolist() for i in range(8)},
            "1": {f"t{i}": (M @ ref[i]).tolist() for i in range(8)}}}
        save_json(tiles, tmp_path / "tiles.json")
        P = np.array([[120.0, 10, 2], [8, 110, 12], [1, 9, 130]])
        leds = []
        for k in range(3):
            p = tmp_path / f"led{k}.strb"
            write_tensor(FrameStack(np.broadcast_to(P[k], (1, 4, 4, 3)).copy()), p)
            leds.append(p)
        out = tmp_path / "cal"
        code = run("--out", out, "calibrate-colors", "--rig", simulated / "rig.json", "--tiles",
                   tmp_path / "tiles.json", "--led", *leds, "--schedule", simulated / "schedule.json")
        assert code == EXIT_OK
        rig = load_json(out / "rig.json")
        np.testing.assert_allclose(rig["cameras"][1]["color_transform"], np.linalg.inv(M), atol=1e-6)
        np.testing.assert_allclose(load_json(out / "primaries.json")["primaries"], P, rtol=1e-6)
        check_manifest(out)


class TestEvaluate:
    def spec(self, path):
        save_json({"parameter": "n_strobes", "values": [2, 3], "repetitions": 1,
                   "sim": SMALL_SIM, "recon": {"iterations": 10, "init_count": 8}}, path)
        return path

    def test_deterministic_csv(self, tmp_path):
        spec = self.spec(tmp_path / "spec.json")
        for d in ("a", "b"):
            code = run("--deterministic", "--out", tmp_path / d, "evaluate", "--spec", spec)
            assert code in (0, 3)
        for name in ("panel_n_strobes.csv", "panel_n_strobes_cells.csv"):
            a = (tmp_path / "a" / name).read_bytes()
            assert a == (tmp_path / "b" / name).read_bytes()
            assert b"\r" not in a
        assert (tmp_path / "a" / "panel_n_strobes.png").stat().st_size > 0
        assert (tmp_path / "a" / "trends.txt").exists()
        man = check_manifest(tmp_path / "a")
        assert man["deterministic"] is True
