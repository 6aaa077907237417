import json

import numpy as np
import pytest

from dmif import metrics, storage, trainer
from dmif import numerics as nx
from dmif.dmifmodel import BranchOutputs, DmifNet
from dmif.errors import ConfigError
from dmif.models import (
    AblationVariant, DataConfig, EvalConfig, FusionMode, MainTerm, ModelConfig, PrimitiveKind, Split, TrainConfig,
)
from dmif.numerics import Tensor
from dmif.synthdata import build_dataset


def tiny_model_config(**overrides):
    values = dict(image_size=16, encoder_widths=(2, 2, 2, 2), feature_dim=4, decoder_hidden=4,
                  decoder_blocks=1, gate_hidden=4)
    values.update(overrides)
    return ModelConfig(**values)


def tiny_train_config(**overrides):
    values = dict(batch_size=2, points_per_step=16, epochs=1, max_steps=3, checkpoint_every=2,
                  validation_points=16, prefetch=1, model=tiny_model_config())
    values.update(overrides)
    return TrainConfig(**values)


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    config = DataConfig(counts={kind: 2 for kind in PrimitiveKind}, image_size=16, points_per_shape=64, seed=5)
    build_dataset(config, root)
    return root


@pytest.fixture
def batch(rng):
    return trainer.Batch(
        images=rng.random((2, 3, 16, 16)),
        dog_images=None,
        points=rng.uniform(-0.5, 0.5, size=(2, 5, 3)),
        labels=(rng.random((2, 5)) < 0.5).astype(np.uint8),
        shape_ids=["a", "b"],
    )


def constant_outputs(probs: np.ndarray) -> BranchOutputs:
    """Four-branch outputs whose branches and mixture all equal `probs` [B,K]"""
    stacked = np.repeat(probs[:, None, :], 4, axis=1)
    return BranchOutputs(
        branch_ids=(0, 1, 2, 3),
        logits=Tensor(np.zeros_like(stacked)),
        probs=Tensor(stacked),
        z=Tensor(np.zeros((probs.shape[0], 4))),
        alpha=Tensor(np.full((probs.shape[0], 4), 0.25)),
        mixed=Tensor(probs.copy()),
    )


class TestLoss:
    def test_uninformed_prediction(self, rng):
        labels = (rng.random((3, 7)) < 0.5).astype(np.uint8)
        terms = trainer.loss(constant_outputs(np.full((3, 7), 0.5)), labels)
        assert terms.total.item() == pytest.approx(4 * np.log(2))
        assert set(terms.as_floats()) == {"loss", "main", "side-1", "side-2", "side-3"}

    def test_perfect_prediction(self, rng):
        labels = (rng.random((2, 9)) < 0.5).astype(np.uint8)
        terms = trainer.loss(constant_outputs(labels.astype(np.float64)), labels)
        assert terms.total.item() == pytest.approx(0.0, abs=1e-5)

    def test_weights(self, rng):
        labels = (rng.random((2, 4)) < 0.5).astype(np.uint8)
        terms = trainer.loss(constant_outputs(np.full((2, 4), 0.5)), labels, main_weight=2.0, side_weight=0.0)
        assert terms.total.item() == pytest.approx(2 * np.log(2))

    def test_raw_main_term_ignores_mixture(self, rng):
        labels = np.ones((1, 3), dtype=np.uint8)
        outputs = constant_outputs(np.full((1, 3), 0.5))
        outputs.mixed = Tensor(np.full((1, 3), 0.9))
        raw = trainer.loss(outputs, labels, main_term=MainTerm.RAW)
        mixed = trainer.loss(outputs, labels, main_term=MainTerm.MIXED)
        assert raw.main.item() == pytest.approx(np.log(2))
        assert mixed.main.item() == pytest.approx(-np.log(0.9))

    def test_labels_must_be_binary(self):
        with pytest.raises(ValueError, match="0 or 1"):
            trainer.loss(constant_outputs(np.full((1, 2), 0.5)), np.array([[0, 2]]))


class TestSharedPath:
    def test_total_is_sum_of_terms(self, batch):
        model = DmifNet(tiny_model_config(), seed=1)
        report = trainer.shared_path_gradients(model, batch, tiny_train_config())
        assert report.total
        assert report.max_residual <= 1e-10

    def test_zero_side_weight_leaves_main_gradient(self, batch):
        model = DmifNet(tiny_model_config(), seed=1)
        report = trainer.shared_path_gradients(model, batch, tiny_train_config(side_weight=0.0))
        for name, grad in report.total.items():
            np.testing.assert_allclose(grad, report.per_term["main"][name], atol=1e-12)
            assert report.term_norm("side-1", name) == 0.0

    def test_tapped_stage_receives_side_gradient(self, batch):
        model = DmifNet(tiny_model_config(), seed=1)
        report = trainer.shared_path_gradients(model, batch, tiny_train_config())
        # branch 1 taps stage 2
        assert report.term_norm("side-1", "encoder.stages.1.conv1.weight") > 0
        # branch 3 has its own encoder
        assert report.term_norm("side-3", "encoder.stages.1.conv1.weight") == 0.0


class TestVariants:
    def test_mapping(self):
        base = tiny_model_config()
        assert trainer.variant_config("b0", base).branches == (0,)
        assert trainer.variant_config("b0", base).fusion == FusionMode.FIXED
        assert trainer.variant_config("b0_b1_b2", base).fusion == FusionMode.MEAN
        assert trainer.variant_config("b0_b1_b2_pmm", base).branches == (0, 1, 2)
        assert trainer.variant_config(AblationVariant.FULL, base).branches == (0, 1, 2, 3)

    def test_unknown_variant(self):
        with pytest.raises(ConfigError, match="Unknown ablation variant"):
            trainer.resolve_variant("b9")

    def test_ablate_b0(self, dataset_dir, tmp_path):
        result = trainer.ablate(dataset_dir, tiny_train_config(max_steps=1), "b0", tmp_path)
        assert result.checkpoint == tmp_path / "b0" / trainer.FINAL_CHECKPOINT
        checkpoint = trainer.load_checkpoint(result.checkpoint)
        assert checkpoint.model.branch_ids == (0,)
        assert checkpoint.header["variant"] == "b0"


class TestBatchLoader:
    def test_batch_shapes(self, dataset_dir):
        dataset = storage.ShapeDataset(dataset_dir, Split.TRAIN)
        model = DmifNet(tiny_model_config(), seed=0)
        batches = list(trainer.BatchLoader(dataset, 2, 16, seed=0, model=model).epoch(0))
        assert len(batches) == len(dataset) // 2
        assert batches[0].points.shape == (2, 16, 3)
        assert batches[0].dog_images.shape == (2, 4, 16, 16)

    def test_prefetch_matches_inline(self, dataset_dir):
        dataset = storage.ShapeDataset(dataset_dir, Split.TRAIN)
        inline = list(trainer.BatchLoader(dataset, 2, 8, seed=3).epoch(1))
        prefetched = list(trainer.BatchLoader(dataset, 2, 8, seed=3, prefetch=2).epoch(1))
        for a, b in zip(inline, prefetched):
            assert a.shape_ids == b.shape_ids
            assert np.array_equal(a.points, b.points)

    def test_too_few_samples(self, dataset_dir):
        dataset = storage.ShapeDataset(dataset_dir, Split.TEST)
        with pytest.raises(ConfigError, match="fewer than batch size"):
            trainer.BatchLoader(dataset, len(dataset) + 1, 8, seed=0)

    def test_too_many_points(self, dataset_dir):
        dataset = storage.ShapeDataset(dataset_dir, Split.TRAIN)
        with pytest.raises(ConfigError, match="stored points"):
            trainer.BatchLoader(dataset, 2, 65, seed=0)


class TestTrain:
    def test_outputs(self, dataset_dir, tmp_path):
        result = trainer.train(dataset_dir, tiny_train_config(), tmp_path)
        assert result.steps == 3
        assert (tmp_path / "checkpoint_000002.dmif").exists()
        records = [json.loads(line) for line in (tmp_path / trainer.TRAIN_LOG).read_text().splitlines()]
        assert [r["step"] for r in records] == [1, 2, 3]
        assert all(np.isfinite(r["loss"]) for r in records)

    def test_deterministic(self, dataset_dir, tmp_path):
        a = trainer.train(dataset_dir, tiny_train_config(), tmp_path / "a", prefetch=0)
        b = trainer.train(dataset_dir, tiny_train_config(), tmp_path / "b", prefetch=2)
        assert a.losses == b.losses
        _, state_a = storage.read_checkpoint(a.checkpoint)
        _, state_b = storage.read_checkpoint(b.checkpoint)
        assert all(np.array_equal(state_a[k], state_b[k]) for k in state_a)

    def test_checkpoint_reload(self, dataset_dir, tmp_path):
        result = trainer.train(dataset_dir, tiny_train_config(), tmp_path)
        checkpoint = trainer.load_checkpoint(result.checkpoint)
        assert checkpoint.header["final"] is True
        assert checkpoint.adam.step == 3
        assert not checkpoint.model.training
        first = trainer.validation_loss(checkpoint.model, dataset_dir, tiny_train_config())
        second = trainer.validation_loss(trainer.load_model(result.checkpoint), dataset_dir, tiny_train_config())
        assert np.isfinite(first)
        assert first == second

    def test_refuses_to_overwrite(self, dataset_dir, tmp_path):
        trainer.train(dataset_dir, tiny_train_config(max_steps=1), tmp_path)
        with pytest.raises(FileExistsError):
            trainer.train(dataset_dir, tiny_train_config(max_steps=1), tmp_path)

    def test_refuses_stale_log(self, dataset_dir, tmp_path):
        (tmp_path / trainer.TRAIN_LOG).write_text("{}\n")
        with pytest.raises(FileExistsError, match="train_log"):
            trainer.train(dataset_dir, tiny_train_config(max_steps=1), tmp_path)
        assert (tmp_path / trainer.TRAIN_LOG).read_text() == "{}\n"

    def test_refuses_stale_checkpoint(self, dataset_dir, tmp_path):
        stale = tmp_path / "checkpoint_000002.dmif"
        stale.write_bytes(b"left by an interrupted run")
        with pytest.raises(FileExistsError, match="checkpoint_000002"):
            trainer.train(dataset_dir, tiny_train_config(), tmp_path)
        trainer.train(dataset_dir, tiny_train_config(), tmp_path, force=True)
        assert trainer.load_checkpoint(stale).header["step"] == 2

    def test_step_ignores_point_order(self, batch, rng):
        config = tiny_train_config()

        def one_step(points, labels):
            model = DmifNet(tiny_model_config(), seed=2)
            optimizer = nx.Adam(model.parameter_set(), config.learning_rate)
            optimizer.zero_grad()
            nx.backward(trainer.loss_for(model(batch.images, None, points), labels, config).total)
            optimizer.step()
            return model.state_dict()

        order = rng.permutation(batch.points.shape[1])
        before = one_step(batch.points, batch.labels)
        after = one_step(batch.points[:, order], batch.labels[:, order])
        for name, value in before.items():
            np.testing.assert_allclose(after[name], value, atol=1e-10, err_msg=name)

    @pytest.mark.slow
    def test_overfits_small_set(self, tmp_path_factory, tmp_path):
        root = tmp_path_factory.mktemp("overfit")
        counts = {PrimitiveKind.SPHERE: 3, PrimitiveKind.BOX: 3, PrimitiveKind.TORUS: 2,
                  PrimitiveKind.CAPSULE: 2, PrimitiveKind.UNION: 2}
        build_dataset(DataConfig(counts=counts, image_size=16, points_per_shape=256, seed=6, train_fraction=0.84), root)
        dataset = storage.ShapeDataset(root, Split.TRAIN)
        assert len(dataset) == 10
        config = tiny_train_config(max_steps=200, epochs=40, points_per_step=128, checkpoint_every=10_000,
                                   model=tiny_model_config(encoder_widths=(8, 8, 16, 16), feature_dim=32,
                                                           decoder_hidden=32, decoder_blocks=2, gate_hidden=16))
        result = trainer.train(dataset, config, tmp_path)
        assert result.steps == 200
        assert np.mean(result.losses[-10:]) < 0.5 * np.mean(result.losses[:10])


class TestFullVariant:
    def test_matches_plain_training(self, dataset_dir, tmp_path):
        plain = trainer.train(dataset_dir, tiny_train_config(), tmp_path / "plain")
        full = trainer.ablate(dataset_dir, tiny_train_config(), "full", tmp_path / "ablation")
        assert full.losses == plain.losses
        _, a = storage.read_checkpoint(plain.checkpoint)
        _, b = storage.read_checkpoint(full.checkpoint)
        assert a.keys() == b.keys()
        assert all(np.array_equal(a[k], b[k]) for k in a)


class TestAblationStudy:
    def test_trains_and_scores_every_seed(self, dataset_dir, tmp_path):
        eval_config = EvalConfig(resolution=8, iou_points=200, surface_points=50, gt_resolution=64)
        study = trainer.ablation_study(dataset_dir, tiny_train_config(max_steps=1), ["b0", "full"], [0, 1],
                                       tmp_path, eval_config)
        assert set(study.runs) == {"b0", "full"}
        assert trainer.load_checkpoint(tmp_path / "full" / "seed_1" / trainer.FINAL_CHECKPOINT).header["seed"] == 1
        assert (tmp_path / "b0" / "seed_0" / trainer.REPORT_NAME).exists()
        assert [s.seeds for s in study.summary.variants] == [[0, 1], [0, 1]]
        b0_mean = np.mean([study.reports["b0"][seed].overall.iou for seed in (0, 1)])
        assert study.summary.variants[0].iou == pytest.approx(b0_mean)
        lines = (tmp_path / trainer.ABLATION_TABLE).read_text().splitlines()
        assert lines[0] == "variant,seed,iou,normal_consistency,chamfer_l1"
        assert len(lines) == 1 + 4 + 2
        saved = json.loads((tmp_path / trainer.ABLATION_SUMMARY).read_text())
        assert saved["slack"] == 0.005
        assert saved["violations"] == study.summary.violations

    def test_without_evaluation(self, dataset_dir, tmp_path):
        study = trainer.ablation_study(dataset_dir, tiny_train_config(max_steps=1), ["b0"], [3], tmp_path)
        assert study.summary is None
        assert study.runs["b0"][3].steps == 1
        assert not (tmp_path / trainer.ABLATION_TABLE).exists()

    def test_needs_a_seed(self, dataset_dir, tmp_path):
        with pytest.raises(ConfigError, match="at least one seed"):
            trainer.ablation_study(dataset_dir, tiny_train_config(), ["b0"], [], tmp_path)


@pytest.fixture(scope="module")
def desk_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    build_dataset(DataConfig(), root, threads=4)
    return root


class TestDeskScale:
    @pytest.mark.slow
    def test_full_model_reaches_quality_gate(self, desk_dataset, tmp_path):
        result = trainer.train(desk_dataset, TrainConfig(), tmp_path)
        report = metrics.evaluate(trainer.load_model(result.checkpoint), desk_dataset, EvalConfig(),
                                  split=Split.TEST, threads=4)
        assert report.overall.iou >= 0.85
        assert report.overall.normal_consistency >= 0.90

    @pytest.mark.slow
    def test_ablation_ordering_over_three_seeds(self, desk_dataset, tmp_path):
        study = trainer.ablation_study(desk_dataset, TrainConfig(), list(AblationVariant), [0, 1, 2], tmp_path,
                                       EvalConfig(), threads=4)
        assert study.summary.ordering_holds, study.summary.violations
