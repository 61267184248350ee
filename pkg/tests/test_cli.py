"""Command-line contract: exit codes, artifacts, layering, determinism."""

import json
import os

import numpy as np
import pytest

from eqocc import cli, data_io, model, recon

TINY = {
    "model": {"enc_layers": 1, "dec_layers": 1, "heads": 2, "mult": 8,
              "k": 4, "dec_out_scalars": 4, "radial_hidden": 4},
    "train": {"iterations": 4, "batch": 2, "queries_per_item": 12,
              "input_points": 20},
    "data": {"count": 2},
    "run": {"checkpoint_every": 2, "log_every": 2, "grad_chunks": 1},
}


def write_tiny_config(path):
    with open(path, "w") as f:
        json.dump(TINY, f)
    return str(path)


def run_train(tmp_path, out_name="run", seed=0, extra=()):
    cfg = write_tiny_config(tmp_path / "tiny.json")
    out = tmp_path / out_name
    code = cli.main(["train", "--config", cfg, "--out", str(out),
                     "--seed", str(seed), *extra])
    return code, out


class TestSeedStream:
    def test_same_name_same_stream(self):
        a = cli.seed_stream(7, "dataset").integers(1 << 30, size=4)
        b = cli.seed_stream(7, "dataset").integers(1 << 30, size=4)
        np.testing.assert_array_equal(a, b)

    def test_names_are_independent(self):
        a = cli.seed_stream(7, "dataset").integers(1 << 30, size=4)
        b = cli.seed_stream(7, "surface").integers(1 << 30, size=4)
        assert not np.array_equal(a, b)

    def test_seeds_are_independent(self):
        a = cli.seed_stream(7, "dataset").integers(1 << 30, size=4)
        b = cli.seed_stream(8, "dataset").integers(1 << 30, size=4)
        assert not np.array_equal(a, b)


class TestConfigLayering:
    def test_merge_overrides_section_keys(self):
        doc = cli.merge_config(cli.DESK_PROFILE, {"train": {"iterations": 7}})
        assert doc["train"]["iterations"] == 7
        assert doc["train"]["batch"] == cli.DESK_PROFILE["train"]["batch"]

    def test_merge_rejects_unknown_section(self):
        with pytest.raises(ValueError, match="unknown config section"):
            cli.merge_config(cli.DESK_PROFILE, {"extra": {}})

    def test_shipped_configs_match_profiles(self):
        root = os.path.join(os.path.dirname(__file__), "..", "configs")
        with open(os.path.join(root, "desk.json")) as f:
            assert json.load(f) == cli.DESK_PROFILE
        with open(os.path.join(root, "paper.json")) as f:
            assert json.load(f) == cli.PAPER_PROFILE

    def test_profiles_build_valid_configs(self):
        from eqocc import training

        for doc in (cli.DESK_PROFILE, cli.PAPER_PROFILE):
            model.ModelConfig.from_dict(doc["model"])
            training.TrainConfig.from_dict(doc["train"])


class TestTrain:
    def test_smoke_writes_artifacts(self, tmp_path):
        code, out = run_train(tmp_path)
        assert code == 0
        for name in ("manifest.json", "config.json", "checkpoint.bin",
                     "loss.csv"):
            assert (out / name).exists(), name
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["command"] == "train"
        assert manifest["seed"] == 0
        assert manifest["git_describe"]
        lines = (out / "loss.csv").read_text().strip().split("\n")
        assert len(lines) == 1 + TINY["train"]["iterations"]

    def test_missing_config_exits_2(self, tmp_path, capsys):
        code = cli.main(["train", "--config", str(tmp_path / "nope.json"),
                         "--out", str(tmp_path / "o")])
        assert code == 2
        assert "config error" in capsys.readouterr().err

    def test_invalid_config_exits_2(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"model": {"heads": 3, "mult": 8}}))
        code = cli.main(["train", "--config", str(bad),
                         "--out", str(tmp_path / "o")])
        assert code == 2
        assert "config error" in capsys.readouterr().err

    def test_same_seed_identical_loss_csv(self, tmp_path):
        _, out_a = run_train(tmp_path, "a", seed=3)
        _, out_b = run_train(tmp_path, "b", seed=3)
        assert (out_a / "loss.csv").read_text() == (out_b / "loss.csv").read_text()

    def test_seed_changes_the_run(self, tmp_path):
        _, out_a = run_train(tmp_path, "a", seed=3)
        _, out_b = run_train(tmp_path, "b", seed=4)
        assert (out_a / "loss.csv").read_text() != (out_b / "loss.csv").read_text()


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli_recon")
    code, out = run_train(tmp)
    assert code == 0
    rng = np.random.default_rng(0)
    cloud = data_io.sphere(0.4).sample_surface(rng, 60)
    data_io.save_xyz(tmp / "cloud.xyz", cloud)
    return tmp, out


class TestReconstruct:
    def test_writes_mesh_and_manifest(self, trained, tmp_path):
        tmp, run = trained
        out = tmp_path / "rec"
        code = cli.main(["reconstruct", "--checkpoint",
                         str(run / "checkpoint.bin"), "--input",
                         str(tmp / "cloud.xyz"), "--res", "12",
                         "--out", str(out)])
        assert code == 0
        assert (out / "manifest.json").exists()
        mesh = recon.load_obj(out / "mesh.obj")
        assert mesh.vertices.shape[1] == 3

    def test_res_2_still_exits_0(self, trained, tmp_path):
        tmp, run = trained
        code = cli.main(["reconstruct", "--checkpoint",
                         str(run / "checkpoint.bin"), "--input",
                         str(tmp / "cloud.xyz"), "--res", "2",
                         "--out", str(tmp_path / "rec")])
        assert code == 0

    def test_mismatched_config_exits_2(self, trained, tmp_path, capsys):
        tmp, run = trained
        other = dict(TINY["model"], mult=16)
        cfg = tmp_path / "other.json"
        cfg.write_text(json.dumps({"model": other}))
        code = cli.main(["reconstruct", "--checkpoint",
                         str(run / "checkpoint.bin"), "--config", str(cfg),
                         "--input", str(tmp / "cloud.xyz"),
                         "--out", str(tmp_path / "rec")])
        assert code == 2
        assert "config error" in capsys.readouterr().err


def analytic_mesh(oracle, res=48, iso=0.5):
    lo, hi = data_io.padded_bbox(*oracle.bbox(), pad=0.1)
    lattice = recon.grid_lattice(lo, hi, (res,) * 3)
    values = oracle.contains(lattice).astype(np.float32)
    grid = recon.OccupancyGrid(lo, hi, (res,) * 3, values)
    return recon.marching_cubes(grid, iso=iso)


@pytest.fixture(scope="module")
def sphere_case(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli_eval")
    oracle = data_io.sphere(0.4)
    scene = data_io.Scene([oracle])
    data_io.save_manifest(tmp / "gt.json", scene)
    recon.save_obj(tmp / "pred.obj", analytic_mesh(oracle))
    return tmp


class TestEval:
    def test_good_mesh_scores_high(self, sphere_case, tmp_path, capsys):
        out = tmp_path / "ev"
        code = cli.main(["eval", "--pred", str(sphere_case / "pred.obj"),
                         "--gt", str(sphere_case / "gt.json"),
                         "--samples", "5000", "--out", str(out)])
        assert code == 0
        metrics = json.loads((out / "metrics.json").read_text())
        assert metrics["iou"] > 90.0
        assert metrics["fscore_2pct"] > 90.0
        assert metrics["chamfer_l1"] < 0.02
        assert metrics["warnings"] == []
        printed = json.loads(capsys.readouterr().out)
        assert printed == metrics

    def test_empty_mesh_flags_warning(self, sphere_case, tmp_path):
        empty = tmp_path / "empty.obj"
        recon.save_obj(empty, recon.Mesh(np.zeros((0, 3)),
                                         np.zeros((0, 3), dtype=int)))
        out = tmp_path / "ev"
        code = cli.main(["eval", "--pred", str(empty),
                         "--gt", str(sphere_case / "gt.json"),
                         "--samples", "500", "--out", str(out)])
        assert code == 0
        metrics = json.loads((out / "metrics.json").read_text())
        assert metrics["fscore_1pct"] == 0.0
        assert metrics["fscore_2pct"] == 0.0
        assert metrics["iou"] is not None
        assert "empty_prediction_mesh" in metrics["warnings"]

    def test_eval_deterministic_per_seed(self, sphere_case, tmp_path):
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            cli.main(["eval", "--pred", str(sphere_case / "pred.obj"),
                      "--gt", str(sphere_case / "gt.json"),
                      "--samples", "500", "--seed", "5", "--out", str(out)])
            outs.append((out / "metrics.json").read_text())
        assert outs[0] == outs[1]


class TestVerifyCommand:
    def test_so3_suite_passes(self, tmp_path, capsys):
        out = tmp_path / "v"
        code = cli.main(["verify", "--suite", "so3", "--out", str(out)])
        assert code == 0
        report = json.loads((out / "report.json").read_text())
        assert report["ok"]
        assert {c["name"] for c in report["checks"]} == {
            "wigner_homomorphism", "cg_intertwiner", "harmonic_rotation",
            "kernel_rotation",
        }

    def test_unknown_suite_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            cli.main(["verify", "--suite", "nope"])
        assert exc.value.code == 2

    def test_impossible_tol_exits_3(self, capsys):
        code = cli.main(["verify", "--suite", "so3", "--tol", "0"])
        assert code == 3
        assert json.loads(capsys.readouterr().out)["ok"] is False


class TestThreads:
    def test_bad_thread_count_exits_2(self, capsys):
        code = cli.main(["--threads", "0", "verify", "--suite", "so3"])
        assert code == 2

    def test_env_fallback(self, monkeypatch):
        monkeypatch.setenv("EQOC_THREADS", "1")
        cli.cap_threads(None)  # no error; limit applied

    def test_thread_cap_accepted(self, capsys):
        code = cli.main(["--threads", "1", "verify", "--suite", "so3"])
        assert code == 0
