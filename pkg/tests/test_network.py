import numpy as np
import pytest

from stereoqa import network, tensorcore as tc
from stereoqa.errors import CheckpointError, ContractError, FormatError
from stereoqa.imagepipe import PatchPair
from stereoqa.network import (build_network, forward, forward_batch,
                              load_checkpoint, save_checkpoint)
from stereoqa.nss import FeatureStandardizer
from stereoqa.tensorcore import GradTape, Tensor


def _pair(rng, dmos=40.0):
    return PatchPair(left=rng.standard_normal((1, 32, 32)),
                     right=rng.standard_normal((1, 32, 32)),
                     source_id="t", dmos=dmos,
                     nss_label=rng.standard_normal(108))


class TestBuildNetwork:
    def test_same_seed_bit_identical(self):
        p1 = build_network(7)
        p2 = build_network(7)
        for name in p1.tensors:
            assert np.array_equal(p1.tensors[name].data, p2.tensors[name].data)

    def test_different_seed_differs(self):
        p1 = build_network(7)
        p2 = build_network(8)
        assert not np.array_equal(p1.tensors["a.conv1.w"].data,
                                  p2.tensors["a.conv1.w"].data)

    def test_biases_zero(self):
        params = build_network(3)
        for name, t in params.tensors.items():
            if name.endswith(".b"):
                assert np.all(t.data == 0.0)

    def test_parameter_count_against_hand_table(self):
        # layer-by-layer recount, independent of parameter_manifest
        def conv(co, ci):
            return co * ci * 9 + co

        def fc(o, i):
            return o * i + o

        stream = (conv(32, 1) + conv(32, 32) + conv(64, 32) + conv(64, 64)
                  + conv(128, 64) + fc(512, 2048) + fc(512, 512))
        c_net = conv(64, 64) + conv(128, 64) + fc(512, 2048) + fc(512, 512)
        d_net = fc(512, 8192) + fc(512, 512)
        heads = (fc(1024, 2048) + fc(108, 1024) + fc(1024, 2048)
                 + fc(1024, 2048) + fc(1, 1024))
        assert network.parameter_count() == 2 * stream + c_net + d_net + heads

    def test_manifest_shapes(self):
        shapes = dict(network.parameter_manifest())
        assert shapes["a.conv1.w"] == (32, 1, 3, 3)
        assert shapes["d.fc1.w"] == (512, 8192)
        assert shapes["fc21.w"] == (108, 1024)
        assert shapes["fc32.w"] == (1, 1024)


class TestForward:
    def test_output_shapes(self):
        rng = np.random.default_rng(0)
        out = forward(build_network(1), _pair(rng))
        assert out.q_hat.shape == (1,)
        assert out.nss_hat.shape == (108,)
        assert out.fused.shape == (2048,)

    def test_swapping_views_changes_output(self):
        rng = np.random.default_rng(1)
        params = build_network(2)
        pair = _pair(rng)
        swapped = PatchPair(left=pair.right, right=pair.left,
                            source_id="t", dmos=0.0, nss_label=pair.nss_label)
        q1 = forward(params, pair).q_hat.item()
        q2 = forward(params, swapped).q_hat.item()
        assert q1 != q2

    def test_zero_network_outputs_zero(self):
        params = build_network(3)
        for t in params.tensors.values():
            t.data[...] = 0.0
        rng = np.random.default_rng(2)
        out = forward(params, _pair(rng))
        assert out.q_hat.item() == 0.0
        assert np.all(out.nss_hat.data == 0.0)

    def test_wrong_patch_shape_rejected(self):
        params = build_network(4)
        bad = PatchPair(left=np.zeros((1, 31, 31)), right=np.zeros((1, 31, 31)),
                        source_id="t", dmos=0.0, nss_label=None)
        with pytest.raises(ContractError):
            forward(params, bad)

    def test_pure_function_of_inputs(self):
        rng = np.random.default_rng(5)
        params = build_network(5)
        pair = _pair(rng)
        o1 = forward(params, pair)
        o2 = forward(params, pair)
        assert np.array_equal(o1.q_hat.data, o2.q_hat.data)
        assert np.array_equal(o1.nss_hat.data, o2.nss_hat.data)


class TestForwardBatch:
    def test_matches_per_patch_forward(self):
        rng = np.random.default_rng(6)
        params = build_network(6, precision="double")
        lefts = rng.standard_normal((5, 1, 32, 32))
        rights = rng.standard_normal((5, 1, 32, 32))
        batch = forward_batch(params, lefts, rights)
        for i in range(5):
            single = forward(params, PatchPair(lefts[i], rights[i], "x", 0.0, None))
            assert np.max(np.abs(batch.q_hat.data[i] - single.q_hat.data)) < 1e-12
            assert np.max(np.abs(batch.nss_hat.data[i] - single.nss_hat.data)) < 1e-12

    def test_batched_gradients_match_per_patch_sum(self):
        rng = np.random.default_rng(7)
        params = build_network(7, precision="double")
        nb = 3
        lefts = rng.standard_normal((nb, 1, 32, 32))
        rights = rng.standard_normal((nb, 1, 32, 32))
        dmos = rng.uniform(0, 100, nb)
        labels = rng.standard_normal((nb, 108))

        with GradTape() as tape:
            total = None
            for i in range(nb):
                out = forward(params, PatchPair(lefts[i], rights[i], "x",
                                                dmos[i], labels[i]))
                q = tc.l1_loss(out.q_hat, Tensor(np.array([dmos[i]]), "double"))
                a = tc.l1_loss(out.nss_hat, Tensor(labels[i], "double"))
                loss = tc.add(tc.scale(q, 25.0), a)
                total = loss if total is None else tc.add(total, loss)
            ref_loss = tc.scale(total, 1.0 / nb)
        tape.backward(ref_loss)
        ref = {n: np.ascontiguousarray(t.grad) for n, t in params.tensors.items()}

        with GradTape() as tape:
            out = forward_batch(params, lefts, rights)
            q = tc.l1_loss(tc.reshape(out.q_hat, (nb,)), Tensor(dmos, "double"))
            a = tc.l1_loss(out.nss_hat, Tensor(labels, "double"))
            loss = tc.add(tc.scale(q, 25.0), a)
        tape.backward(loss)

        assert abs(loss.item() - ref_loss.item()) < 1e-12
        for n, t in params.tensors.items():
            assert np.max(np.abs(np.asarray(t.grad) - ref[n])) < 1e-10, n

    def test_bad_batch_shape_rejected(self):
        params = build_network(8)
        with pytest.raises(ContractError):
            forward_batch(params, np.zeros((2, 1, 32, 32)), np.zeros((3, 1, 32, 32)))


class TestDetachAux:
    def test_detach_blocks_fc11_gradient(self):
        rng = np.random.default_rng(9)
        params = build_network(9, precision="double")
        pair = _pair(rng)
        with GradTape() as tape:
            out = forward(params, pair, detach_aux=True)
            loss = tc.l1_loss(out.q_hat, Tensor(np.array([50.0]), "double"))
        tape.backward(loss)
        assert params.tensors["fc11.w"].grad is None
        assert params.tensors["fc21.w"].grad is None
        assert params.tensors["fc12.w"].grad is not None

    def test_detach_keeps_outputs_equal(self):
        rng = np.random.default_rng(10)
        params = build_network(10)
        pair = _pair(rng)
        o1 = forward(params, pair, detach_aux=False)
        o2 = forward(params, pair, detach_aux=True)
        assert np.array_equal(o1.q_hat.data, o2.q_hat.data)
        assert np.array_equal(o1.nss_hat.data, o2.nss_hat.data)


class TestCheckpoint:
    def _params(self):
        rng = np.random.default_rng(11)
        stz = FeatureStandardizer(rng.normal(size=108), 1.0 + rng.random(108))
        return build_network(11, standardizer=stz)

    def test_save_load_save_identical_bytes(self, tmp_path):
        params = self._params()
        p1 = tmp_path / "a.ckpt"
        p2 = tmp_path / "b.ckpt"
        save_checkpoint(params, p1)
        save_checkpoint(load_checkpoint(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_forward_identical_after_roundtrip(self, tmp_path):
        params = self._params()
        path = tmp_path / "c.ckpt"
        save_checkpoint(params, path)
        loaded = load_checkpoint(path)
        rng = np.random.default_rng(12)
        pair = _pair(rng)
        assert forward(params, pair).q_hat.item() == \
            forward(loaded, pair).q_hat.item()

    def test_standardizer_roundtrip(self, tmp_path):
        params = self._params()
        path = tmp_path / "d.ckpt"
        save_checkpoint(params, path)
        loaded = load_checkpoint(path)
        assert np.array_equal(loaded.standardizer.mean, params.standardizer.mean)
        assert np.array_equal(loaded.standardizer.std, params.standardizer.std)
        assert loaded.seed == params.seed

    def test_edited_architecture_hash_rejected(self, tmp_path):
        params = self._params()
        path = tmp_path / "e.ckpt"
        save_checkpoint(params, path)
        blob = path.read_bytes()
        hash_pos = blob.find(b"arch: ") + len(b"arch: ")
        corrupted = blob[:hash_pos] + b"deadbeef" + blob[hash_pos + 8:]
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(corrupted)
        with pytest.raises(CheckpointError):
            load_checkpoint(bad)

    def test_truncated_body_rejected(self, tmp_path):
        params = self._params()
        path = tmp_path / "f.ckpt"
        save_checkpoint(params, path)
        blob = path.read_bytes()
        bad = tmp_path / "trunc.ckpt"
        bad.write_bytes(blob[:-100])
        with pytest.raises(FormatError):
            load_checkpoint(bad)

    def test_missing_marker_rejected(self, tmp_path):
        bad = tmp_path / "junk.ckpt"
        bad.write_bytes(b"not a checkpoint")
        with pytest.raises(FormatError):
            load_checkpoint(bad)
