import numpy as np
import pytest

from stereoqa import network, training
from stereoqa.datakit import StereoSample
from stereoqa.errors import ContractError
from stereoqa.imagepipe import GrayImage
from stereoqa.network import build_network, forward
from stereoqa.imagepipe import PatchPair
from stereoqa.training import (SplitManifest, TrainConfig, make_splits,
                               multitask_loss, predict_image, train)


def _refs(n):
    return [StereoSample(id=f"s{i}-{v}", ref_id=f"ref{i}", left_path="l",
                         right_path="r", dmos=float(v), distortion="blur",
                         symmetry="symmetric")
            for i in range(n) for v in (10, 20)]


class TestMakeSplits:
    def test_20_refs_give_12_4_4(self):
        manifests = make_splits(_refs(20), runs=10, seed=1)
        assert len(manifests) == 10
        for m in manifests:
            assert len(m.train_refs) == 12
            assert len(m.val_refs) == 4
            assert len(m.test_refs) == 4

    def test_disjoint_and_complete(self):
        for m in make_splits(_refs(11), runs=5, seed=2):
            union = set(m.train_refs) | set(m.val_refs) | set(m.test_refs)
            assert union == {f"ref{i}" for i in range(11)}
            assert len(m.train_refs) + len(m.val_refs) + len(m.test_refs) == 11

    def test_samples_follow_reference(self):
        samples = _refs(10)
        for m in make_splits(samples, runs=3, seed=3):
            for s in samples:
                roles = {m.role_of(s.ref_id)
                         for s2 in samples if s2.ref_id == s.ref_id}
                assert len(roles) == 1

    def test_deterministic(self):
        a = make_splits(_refs(10), runs=4, seed=7)
        b = make_splits(_refs(10), runs=4, seed=7)
        assert [(m.train_refs, m.val_refs, m.test_refs) for m in a] == \
            [(m.train_refs, m.val_refs, m.test_refs) for m in b]

    def test_runs_differ(self):
        manifests = make_splits(_refs(10), runs=10, seed=0)
        assert len({m.train_refs for m in manifests}) > 1

    def test_too_few_refs_rejected(self):
        with pytest.raises(ContractError):
            make_splits(_refs(4), runs=2, seed=0)

    def test_overlapping_manifest_rejected(self):
        with pytest.raises(ContractError):
            SplitManifest(run_index=1, train_refs=("a", "b"), val_refs=("b",),
                          test_refs=("c",), seed=0)


class TestMultitaskLoss:
    def _out(self, q, aux):
        from stereoqa.network import ForwardOutput
        from stereoqa.tensorcore import Tensor
        return ForwardOutput(q_hat=Tensor(np.array([q]), "double"),
                             nss_hat=Tensor(aux, "double"),
                             fused=Tensor(np.zeros(2048), "double"))

    def test_perfect_prediction_is_zero(self):
        label = np.linspace(-1, 1, 108)
        out = self._out(42.0, label)
        loss, breakdown = multitask_loss(out, 42.0, label, 25.0)
        assert loss.item() == 0.0
        assert breakdown == {"quality": 0.0, "auxiliary": 0.0}

    def test_hand_arithmetic(self):
        label = np.zeros(108)
        aux = np.full(108, 0.2)
        out = self._out(50.1, aux)
        loss, breakdown = multitask_loss(out, 50.0, label, 25.0)
        assert loss.item() == pytest.approx(25.0 * 0.1 + 0.2, abs=1e-9)
        assert breakdown["quality"] == pytest.approx(2.5, abs=1e-9)
        assert breakdown["auxiliary"] == pytest.approx(0.2, abs=1e-9)

    def test_lambda_zero_leaves_aux_only(self):
        label = np.zeros(108)
        out = self._out(99.0, np.full(108, 0.5))
        loss, _ = multitask_loss(out, 0.0, label, 0.0)
        assert loss.item() == pytest.approx(0.5, abs=1e-9)

    def test_disabled_auxiliary_drops_term(self):
        label = np.full(108, 3.0)
        out = self._out(51.0, np.zeros(108))
        loss, breakdown = multitask_loss(out, 50.0, label, 25.0,
                                         auxiliary_enabled=False)
        assert loss.item() == pytest.approx(25.0, abs=1e-6)
        assert breakdown["auxiliary"] == 0.0


class TestPredictImage:
    def test_constant_network_gives_constant(self):
        params = build_network(5)
        for t in params.tensors.values():
            t.data[...] = 0.0
        params.tensors["fc32.b"].data[0] = 0.37
        rng = np.random.default_rng(0)
        img = GrayImage(rng.random((64, 96)))
        assert predict_image(params, img, img) == pytest.approx(0.37, abs=1e-6)

    def test_single_patch_image(self):
        params = build_network(6)
        rng = np.random.default_rng(1)
        left = GrayImage(rng.random((32, 32)))
        right = GrayImage(rng.random((32, 32)))
        pred = predict_image(params, left, right)
        pairs = __import__("stereoqa.imagepipe", fromlist=["patch_pairs"]) \
            .patch_pairs(left, right, "x", 0.0)
        assert len(pairs) == 1
        assert pred == pytest.approx(forward(params, pairs[0]).q_hat.item(),
                                     abs=1e-6)

    def test_mean_of_four_patches_matches_manual_loop(self):
        params = build_network(7)
        rng = np.random.default_rng(2)
        left = GrayImage(rng.random((64, 64)))
        right = GrayImage(rng.random((64, 64)))
        from stereoqa.imagepipe import patch_pairs
        pairs = patch_pairs(left, right, "x", 0.0)
        assert len(pairs) == 4
        manual = np.mean([forward(params, p).q_hat.item() for p in pairs])
        assert predict_image(params, left, right) == pytest.approx(manual, abs=1e-5)

    def test_too_small_rejected(self):
        params = build_network(8)
        img = GrayImage(np.zeros((16, 16)))
        with pytest.raises(ContractError):
            predict_image(params, img, img)


def _tiny_manifest():
    return SplitManifest(run_index=1,
                         train_refs=("c000", "c001"),
                         val_refs=("c002",),
                         test_refs=("c003",), seed=0)


class TestTrain:
    def test_loss_decreases_early(self, tiny_dataset):
        config = TrainConfig(epochs=6, seed=0)
        params, rows = train(config, _tiny_manifest(), tiny_dataset)
        losses = [r["train_loss"] for r in rows]
        assert losses[-1] < losses[0]
        assert all(np.isfinite(v) for v in losses)

    def test_log_columns_complete(self, tiny_dataset):
        config = TrainConfig(epochs=2, seed=0)
        _, rows = train(config, _tiny_manifest(), tiny_dataset)
        for row in rows:
            assert set(row) == set(training.LOG_COLUMNS)
            assert row["val_plcc"] is None or -1.0 <= row["val_plcc"] <= 1.0

    def test_deterministic_given_seed(self, tiny_dataset):
        config = TrainConfig(epochs=2, seed=3)
        p1, _ = train(config, _tiny_manifest(), tiny_dataset)
        p2, _ = train(config, _tiny_manifest(), tiny_dataset)
        for name in p1.tensors:
            assert np.array_equal(p1.tensors[name].data, p2.tensors[name].data)

    def test_ablation_freezes_fc21(self, tiny_dataset):
        config = TrainConfig(epochs=2, seed=4, auxiliary_enabled=False)
        net_seed = int(np.random.SeedSequence((4, 1)).generate_state(1)[0])
        fresh = build_network(net_seed)
        params, rows = train(config, _tiny_manifest(), tiny_dataset)
        assert np.array_equal(params.tensors["fc21.w"].data,
                              fresh.tensors["fc21.w"].data)
        assert np.array_equal(params.tensors["fc11.w"].data,
                              fresh.tensors["fc11.w"].data)
        assert not np.array_equal(params.tensors["fc12.w"].data,
                                  fresh.tensors["fc12.w"].data)
        assert all(r["auxiliary_term"] == 0.0 for r in rows)
        assert all(np.isfinite(r["train_loss"]) for r in rows)

    def test_standardizer_fitted_on_train_split_only(self, tiny_dataset):
        config = TrainConfig(epochs=1, seed=5)
        manifest = _tiny_manifest()
        params, _ = train(config, manifest, tiny_dataset)
        train_feats = np.stack([d.features for d in tiny_dataset
                                if manifest.role_of(d.sample.ref_id) == "train"])
        assert np.allclose(params.standardizer.mean, train_feats.mean(axis=0))

    def test_empty_train_split_rejected(self, tiny_dataset):
        manifest = SplitManifest(run_index=1, train_refs=("zz",),
                                 val_refs=("c000",), test_refs=("c001",), seed=0)
        config = TrainConfig(epochs=1, seed=0)
        with pytest.raises(ContractError):
            train(config, manifest, tiny_dataset)

    def test_training_log_file(self, tiny_dataset, tmp_path):
        config = TrainConfig(epochs=2, seed=6)
        _, rows = train(config, _tiny_manifest(), tiny_dataset)
        path = tmp_path / "log.csv"
        training.write_training_log(path, rows)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == ",".join(training.LOG_COLUMNS)
        assert len(lines) == 3


class TestEvaluateRun:
    def test_report_on_test_split(self, tiny_dataset):
        from stereoqa import evalmetrics
        config = TrainConfig(epochs=1, seed=7)
        manifest = _tiny_manifest()
        params, _ = train(config, manifest, tiny_dataset)
        report = evalmetrics.evaluate_run(params, manifest, tiny_dataset)
        groups = {r.group for r in report.rows}
        assert "ALL" in groups
        all_row = report.row("ALL")
        assert all_row.n == sum(
            1 for d in tiny_dataset if manifest.role_of(d.sample.ref_id) == "test")
