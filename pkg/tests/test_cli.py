import hashlib
import json

import numpy as np
import pytest
from PIL import Image

from worknerf.cli import main
from worknerf.renderer import read_occupancy
from worknerf.training import TrainConfig

GEN_CFG = {"scenes": 3, "objects": 2, "seed": 5,
           "image_width": 48, "image_height": 32}
TRAIN_CFG = {"epochs": 2, "learning_rate": 5e-4, "rays_per_step": 64,
             "n_samples_per_ray": 6, "source_view_setting": "three_poses",
             "n_train_scenes": 2, "seed": 1, "voxel_spacing": 0.06,
             "checkpoint_every": 0}


def write_cfg(path, cfg):
    path.write_text(json.dumps(cfg), encoding="utf-8")
    return str(path)


@pytest.fixture(scope="module")
def cli_workspace(tmp_path_factory):
    """Dataset + trained checkpoint shared by the command tests."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    gen_cfg = write_cfg(root / "gen.json", GEN_CFG)
    assert main(["gen-data", "--out", str(data), "--config", gen_cfg]) == 0
    train_cfg = write_cfg(root / "train.json", TRAIN_CFG)
    ckpt = root / "model.ckpt"
    assert main(["train", "--data", str(data), "--config", train_cfg,
                 "--out", str(ckpt)]) == 0
    return root, data, ckpt


def tree_hash(directory):
    h = hashlib.sha256()
    for path in sorted(directory.rglob("*")):
        if path.is_file():
            h.update(path.relative_to(directory).as_posix().encode())
            h.update(path.read_bytes())
    return h.hexdigest()


class TestGenData:
    def test_counts_and_split(self, cli_workspace):
        _, data, _ = cli_workspace
        manifest = json.loads((data / "manifest.json").read_text())
        assert len(manifest["scene_ids"]) == 3
        assert len(manifest["train_scenes"]) == 2
        assert len(manifest["eval_scenes"]) == 1

    def test_rerun_same_seed_is_byte_identical(self, tmp_path):
        cfg = write_cfg(tmp_path / "gen.json", GEN_CFG)
        assert main(["gen-data", "--out", str(tmp_path / "a"), "--config", cfg]) == 0
        assert main(["gen-data", "--out", str(tmp_path / "b"), "--config", cfg]) == 0
        assert tree_hash(tmp_path / "a") == tree_hash(tmp_path / "b")

    def test_nonempty_out_refused(self, tmp_path):
        out = tmp_path / "occupied"
        out.mkdir()
        (out / "junk").write_text("x")
        cfg = write_cfg(tmp_path / "gen.json", GEN_CFG)
        assert main(["gen-data", "--out", str(out), "--config", cfg]) == 1

    def test_unknown_config_key_refused(self, tmp_path):
        cfg = write_cfg(tmp_path / "gen.json", {**GEN_CFG, "scnes": 3})
        assert main(["gen-data", "--out", str(tmp_path / "x"), "--config", cfg]) == 1


class TestUsageErrors:
    def test_missing_required_flag_is_usage_error(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["train", "--data", "somewhere"])
        assert exc.value.code == 2

    def test_version_is_machine_readable(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["--version"])
        assert exc.value.code == 0
        out = capsys.readouterr().out.strip()
        name, version = out.split()
        assert name == "worknerf"
        assert version.count(".") == 2


class TestTrainCommand:
    def test_checkpoint_and_log_written(self, cli_workspace):
        root, _, ckpt = cli_workspace
        assert ckpt.exists()
        log_lines = (root / "model.ckpt.log.jsonl").read_text().splitlines()
        assert len(log_lines) == TRAIN_CFG["epochs"]
        rec = json.loads(log_lines[0])
        assert set(rec) == {"epoch", "mse", "beta", "total", "wall_ms"}

    def test_default_config_carries_protocol_values(self):
        cfg = TrainConfig()
        assert cfg.epochs == 400 and cfg.learning_rate == 5e-4

    def test_bad_config_key_fails(self, cli_workspace, tmp_path):
        _, data, _ = cli_workspace
        cfg = write_cfg(tmp_path / "bad.json", {**TRAIN_CFG, "epoch": 1})
        assert main(["train", "--data", str(data), "--config", cfg,
                     "--out", str(tmp_path / "m.ckpt")]) == 1


class TestRenderCommand:
    def test_writes_three_images(self, cli_workspace, tmp_path):
        _, data, ckpt = cli_workspace
        scene = json.loads((data / "manifest.json").read_text())["scene_ids"][0]
        out = tmp_path / "render"
        assert main(["render", "--ckpt", str(ckpt), "--data", str(data),
                     "--scene", scene, "--camera", "head_depth_p07",
                     "--out", str(out)]) == 0
        rgb = np.asarray(Image.open(out / "rgb.png"))
        depth = np.asarray(Image.open(out / "depth.png"))
        opacity = np.asarray(Image.open(out / "opacity.png"))
        assert rgb.shape == (32, 48, 3) and rgb.dtype == np.uint8
        assert depth.shape == (32, 48) and depth.dtype in (np.uint16, np.int32)
        assert opacity.shape == (32, 48) and opacity.dtype == np.uint8

    def test_repeat_is_bitwise_identical(self, cli_workspace, tmp_path):
        _, data, ckpt = cli_workspace
        scene = json.loads((data / "manifest.json").read_text())["scene_ids"][0]
        for sub in ("r1", "r2"):
            assert main(["render", "--ckpt", str(ckpt), "--data", str(data),
                         "--scene", scene, "--camera", "static_0",
                         "--out", str(tmp_path / sub)]) == 0
        assert tree_hash(tmp_path / "r1") == tree_hash(tmp_path / "r2")

    def test_unknown_camera_lists_valid_ids(self, cli_workspace, tmp_path, capsys):
        _, data, ckpt = cli_workspace
        scene = json.loads((data / "manifest.json").read_text())["scene_ids"][0]
        assert main(["render", "--ckpt", str(ckpt), "--data", str(data),
                     "--scene", scene, "--camera", "nope",
                     "--out", str(tmp_path / "x")]) == 1
        err = capsys.readouterr().err
        assert "head_depth_p07" in err and "static_0" in err

    def test_unknown_scene_fails(self, cli_workspace, tmp_path):
        _, data, ckpt = cli_workspace
        assert main(["render", "--ckpt", str(ckpt), "--data", str(data),
                     "--scene", "missing", "--camera", "static_0",
                     "--out", str(tmp_path / "x")]) == 1


class TestEvaluateCommand:
    def test_report_and_csv(self, cli_workspace, tmp_path):
        _, data, ckpt = cli_workspace
        report = tmp_path / "report.json"
        csv = tmp_path / "report.csv"
        assert main(["evaluate", "--ckpt", str(ckpt), "--data", str(data),
                     "--setting", "three_poses", "--report", str(report),
                     "--csv", str(csv)]) == 0
        rep = json.loads(report.read_text())
        assert rep["source_view_setting"] == "three_poses"
        assert rep["split"] == "eval"
        assert len(rep["scenes"]) == 1
        assert {"mae_depth", "psnr", "valid_pixel_fraction",
                "config_hash", "seed"} <= set(rep)
        assert csv.read_text().startswith("source_cameras,head_pose,n_train")

    def test_train_split_requires_flag(self, cli_workspace, tmp_path):
        _, data, ckpt = cli_workspace
        args = ["evaluate", "--ckpt", str(ckpt), "--data", str(data),
                "--setting", "single", "--report", str(tmp_path / "r.json"),
                "--split", "train"]
        assert main(args) == 1
        assert main(args + ["--allow-train-eval"]) == 0


class TestExportOccupancy:
    def test_header_and_payload(self, cli_workspace, tmp_path):
        _, data, ckpt = cli_workspace
        scene = json.loads((data / "manifest.json").read_text())["scene_ids"][0]
        out = tmp_path / "scene.occv"
        assert main(["export-occupancy", "--ckpt", str(ckpt), "--data", str(data),
                     "--scene", scene, "--setting", "three_poses",
                     "--out", str(out)]) == 0
        grid, alpha = read_occupancy(out)
        assert grid.dims == (16, 16, 8)
        assert out.stat().st_size == 5 + 12 + 12 + 4 + 16 * 16 * 8 * 4
        assert np.all(alpha >= 0) and np.all(alpha < 1)

    def test_repeat_is_bitwise_identical(self, cli_workspace, tmp_path):
        _, data, ckpt = cli_workspace
        scene = json.loads((data / "manifest.json").read_text())["scene_ids"][0]
        for name in ("a.occv", "b.occv"):
            assert main(["export-occupancy", "--ckpt", str(ckpt), "--data", str(data),
                         "--scene", scene, "--setting", "single",
                         "--out", str(tmp_path / name)]) == 0
        assert (tmp_path / "a.occv").read_bytes() == (tmp_path / "b.occv").read_bytes()


class TestConfigRoundtrip:
    def test_parse_serialize_parse_identity(self):
        cfg = TrainConfig.from_dict(TRAIN_CFG)
        blob = json.dumps(cfg.to_dict(), sort_keys=True)
        again = TrainConfig.from_dict(json.loads(blob))
        assert again == cfg
        assert json.dumps(again.to_dict(), sort_keys=True) == blob
