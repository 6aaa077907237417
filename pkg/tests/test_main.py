import json

import numpy as np
import pytest

from dmif import storage, synthdata, trainer
from dmif.dmifmodel import DmifNet
from dmif.errors import ConfigError, SamplingError
from dmif.main import apply_override, echo_path, load_config, main, resolve_threads
from dmif.meshing import read_obj
from dmif.models import DataConfig, ModelConfig, TrainConfig


@pytest.fixture
def gray_image(tmp_path):
    path = tmp_path / "gray.png"
    storage.write_image(path, np.full((3, 16, 16), 0.4))
    return path


@pytest.fixture
def checkpoint(tmp_path):
    config = ModelConfig(image_size=16, encoder_widths=(2, 2, 2, 2), feature_dim=4, decoder_hidden=4,
                         decoder_blocks=1, gate_hidden=4)
    return trainer.save_checkpoint(tmp_path / "model.dmif", DmifNet(config, seed=0), final=True)


@pytest.fixture
def data_config(tmp_path):
    path = tmp_path / "data.json"
    path.write_text(json.dumps({"counts": {"sphere": 2, "box": 1, "torus": 0, "capsule": 1, "union": 1},
                                "image_size": 16, "points_per_shape": 32}))
    return path


class TestArguments:
    def test_missing_subcommand(self):
        assert main([]) == 2

    def test_unknown_subcommand(self):
        assert main(["explode", "--out", "x"]) == 2

    def test_missing_out(self):
        assert main(["train"]) == 2

    def test_bad_variant(self, tmp_path):
        assert main(["ablate", "--variant", "b7", "--out", str(tmp_path)]) == 2


class TestConfig:
    def test_override_nested_json(self):
        data = {"model": {"feature_dim": 128}}
        apply_override(data, "model.feature_dim=16")
        apply_override(data, "model.fusion=mean")
        apply_override(data, "model.tap_stages=[1,2]")
        assert data == {"model": {"feature_dim": 16, "fusion": "mean", "tap_stages": [1, 2]}}

    def test_override_needs_equals(self):
        with pytest.raises(ConfigError, match="key=value"):
            apply_override({}, "model.feature_dim")

    def test_file_then_overrides_then_seed(self, data_config):
        config = load_config(DataConfig, str(data_config), ["image_size=32"], seed=9)
        assert config.image_size == 32
        assert config.seed == 9
        assert config.points_per_shape == 32

    def test_defaults_do_not_override_explicit_values(self):
        config = load_config(TrainConfig, None, ["model.precision=float64"], defaults={"model.precision": "float32"})
        assert config.model.precision.value == "float64"
        config = load_config(TrainConfig, None, [], defaults={"model.precision": "float64"})
        assert config.model.precision.value == "float64"

    def test_invalid_value(self):
        with pytest.raises(ConfigError, match="Invalid TrainConfig"):
            load_config(TrainConfig, None, ["batch_size=1"])

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            load_config(DataConfig, None, ["colour=red"])

    def test_threads_from_environment(self, monkeypatch):
        monkeypatch.setenv("DMIF_THREADS", "3")
        assert resolve_threads(None) == 3
        assert resolve_threads(2) == 2
        monkeypatch.setenv("DMIF_THREADS", "many")
        with pytest.raises(ConfigError, match="DMIF_THREADS"):
            resolve_threads(None)


class TestDogPreview:
    def test_constant_image_is_mid_gray(self, gray_image, tmp_path):
        out = tmp_path / "dog.png"
        assert main(["dog-preview", "--image", str(gray_image), "--out", str(out)]) == 0
        assert np.all(storage.read_image(out) == 128 / 255)
        echoed = json.loads((tmp_path / "dog.config.json").read_text())
        assert echoed["pair_index"] == 0
        assert echoed["run"]["subcommand"] == "dog-preview"

    def test_refuses_to_clobber(self, gray_image, tmp_path, capsys):
        out = tmp_path / "dog.png"
        assert main(["dog-preview", "--image", str(gray_image), "--out", str(out)]) == 0
        assert main(["dog-preview", "--image", str(gray_image), "--out", str(out)]) == 1
        error = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert error["error"] == "FileExistsError"
        assert error["command"] == "dog-preview"
        assert main(["dog-preview", "--image", str(gray_image), "--out", str(out), "--force"]) == 0

    def test_bad_pair_index(self, gray_image, tmp_path):
        out = tmp_path / "dog.png"
        assert main(["dog-preview", "--image", str(gray_image), "--out", str(out), "--pair-index", "3"]) == 1


class TestReconstruct:
    def test_writes_obj(self, checkpoint, gray_image, tmp_path):
        out = tmp_path / "mesh.obj"
        code = main(["reconstruct", "--checkpoint", str(checkpoint), "--image", str(gray_image),
                     "--out", str(out), "--resolution", "8"])
        assert code == 0
        mesh = read_obj(out)
        assert mesh.vertices.shape[1] == 3
        echoed = json.loads(echo_path(out).read_text())
        assert echo_path(out).name == "mesh.config.json"
        assert echoed["resolution"] == 8
        assert echoed["checkpoint"] == str(checkpoint)

    def test_image_size_mismatch(self, checkpoint, tmp_path):
        image = tmp_path / "big.png"
        storage.write_image(image, np.zeros((3, 32, 32)))
        code = main(["reconstruct", "--checkpoint", str(checkpoint), "--image", str(image),
                     "--out", str(tmp_path / "mesh.obj"), "--resolution", "8"])
        assert code == 1

    def test_missing_checkpoint(self, gray_image, tmp_path):
        code = main(["reconstruct", "--checkpoint", str(tmp_path / "none.dmif"), "--image", str(gray_image),
                     "--out", str(tmp_path / "mesh.obj")])
        assert code == 1


class TestBuildDataAndEval:
    def test_build_then_oracle_eval(self, data_config, tmp_path):
        data = tmp_path / "data"
        assert main(["build-data", "--config", str(data_config), "--out", str(data), "--seed", "4"]) == 0
        assert len(storage.read_manifest(data / storage.MANIFEST_NAME)) == 5
        echoed = json.loads((data / "config.json").read_text())
        assert echoed["data"]["seed"] == 4

        report = tmp_path / "report.json"
        table = tmp_path / "report.csv"
        code = main(["eval", "--oracle", "--data", str(data), "--split", "train", "--out", str(report),
                     "--csv", str(table), "--set", "resolution=16", "--set", "gt_resolution=16",
                     "--set", "iou_points=500", "--set", "surface_points=200"])
        assert code == 0
        payload = json.loads(report.read_text())
        assert payload["split"] == "train"
        assert payload["samples"]
        assert table.read_text().splitlines()[0].startswith("group,")
        assert json.loads((tmp_path / "report.config.json").read_text())["eval"]["resolution"] == 16

    def test_eval_needs_checkpoint(self, tmp_path):
        assert main(["eval", "--out", str(tmp_path / "report.json")]) == 1

    def test_sampling_failure_is_reported(self, data_config, tmp_path, monkeypatch, capsys):
        def give_up(spec, n, rng=None, **kwargs):
            raise SamplingError(f"Could not project {n} points onto the {spec.kind.value} surface")

        monkeypatch.setattr(synthdata, "surface_points", give_up)
        assert main(["build-data", "--config", str(data_config), "--out", str(tmp_path / "data")]) == 1
        error = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert error["error"] == "SamplingError"


class TestAblate:
    def test_seeds(self, data_config, tmp_path):
        data = tmp_path / "data"
        assert main(["build-data", "--config", str(data_config), "--out", str(data)]) == 0
        train_config = tmp_path / "train.json"
        train_config.write_text(json.dumps({
            "batch_size": 2, "points_per_step": 8, "epochs": 1, "max_steps": 1, "validation_points": 8,
            "model": {"image_size": 16, "encoder_widths": [2, 2, 2, 2], "feature_dim": 4, "decoder_hidden": 4,
                      "decoder_blocks": 1, "gate_hidden": 4},
        }))
        out = tmp_path / "ablation"
        code = main(["ablate", "--config", str(train_config), "--data", str(data), "--out", str(out),
                     "--variant", "b0", "--seeds", "0", "5"])
        assert code == 0
        assert trainer.load_checkpoint(out / "b0" / "seed_5" / trainer.FINAL_CHECKPOINT).header["seed"] == 5
        assert json.loads((out / "config.json").read_text())["seeds"] == [0, 5]
