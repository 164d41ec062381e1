import numpy as np
import pytest

from helpers import network_loss_fn, tiny_config, well_conditioned_point
from spkembed.errors import ConfigError, FormatError, ShortSequenceError
from spkembed.layers import grad_check
from spkembed.model import (
    NetworkConfig,
    build_network,
    extract_embedding,
    forward_batch,
    forward_logits,
    load_checkpoint,
    save_checkpoint,
)
from spkembed.pooling import PoolingConfig


@pytest.fixture(scope="module")
def default_statistics_model():
    cfg = NetworkConfig(input_dim=20, num_speakers=8, pooling=PoolingConfig("statistics"))
    return build_network(cfg)


class TestBuildNetwork:
    def test_default_statistics_head_input_is_3000(self, default_statistics_model):
        # 1500-dim frame features, doubled by the mean+stddev concatenation.
        assert default_statistics_model.affine("utt0").weight.shape == (512, 3000)

    def test_average_head_input_is_1500(self):
        cfg = NetworkConfig(input_dim=20, num_speakers=8, pooling=PoolingConfig("average"))
        assert build_network(cfg).affine("utt0").weight.shape == (512, 1500)

    def test_same_seed_identical_parameters(self):
        cfg = tiny_config("attentive_statistics", seed=5)
        a = build_network(cfg)
        b = build_network(cfg)
        assert a.param_names() == b.param_names()
        for name in a.param_names():
            np.testing.assert_array_equal(a.params[name], b.params[name])

    def test_invalid_configs(self):
        with pytest.raises(ConfigError):
            NetworkConfig(input_dim=0, num_speakers=4)
        with pytest.raises(ConfigError):
            NetworkConfig(input_dim=3, num_speakers=1)
        with pytest.raises(ConfigError):
            NetworkConfig(input_dim=3, num_speakers=4, tdnn_layers=(((2, 0), 8),))
        with pytest.raises(ConfigError):
            NetworkConfig(input_dim=3, num_speakers=4, utterance_layers=())

    def test_attention_params_only_for_attentive_kinds(self):
        plain = build_network(tiny_config("statistics"))
        attentive = build_network(tiny_config("attentive_average"))
        assert "att.W" not in plain.params
        assert attentive.params["att.W"].shape == (5, 10)


class TestForwardLogits:
    def test_shape_and_finiteness(self):
        cfg = tiny_config("attentive_statistics", seed=1)
        net = build_network(cfg)
        rng = np.random.default_rng(0)
        logits, _ = forward_logits(net, rng.normal(size=(30, cfg.input_dim)))
        assert logits.shape == (cfg.num_speakers,)
        assert np.all(np.isfinite(logits))

    def test_minimum_length_pools_one_frame(self):
        cfg = tiny_config("statistics", seed=2)
        net = build_network(cfg)
        assert cfg.context_frames == 14
        _, tape = forward_logits(net, np.random.default_rng(1).normal(size=(15, cfg.input_dim)))
        assert tape["pool"][0].frames.shape[0] == 1

    def test_too_short_sequence(self):
        cfg = tiny_config("average", seed=3)
        net = build_network(cfg)
        with pytest.raises(ShortSequenceError):
            forward_logits(net, np.zeros((14, cfg.input_dim)))

    def test_same_seed_same_logits(self):
        cfg = tiny_config("attentive_average", seed=4)
        seq = np.random.default_rng(2).normal(size=(25, cfg.input_dim))
        logits_a, _ = forward_logits(build_network(cfg), seq)
        logits_b, _ = forward_logits(build_network(cfg), seq)
        np.testing.assert_array_equal(logits_a, logits_b)


class TestExtractEmbedding:
    def test_default_config_dim_512(self, default_statistics_model):
        seq = np.random.default_rng(3).normal(size=(40, 20))
        embedding = extract_embedding(default_statistics_model, seq)
        assert embedding.shape == (512,)

    def test_deterministic(self):
        cfg = tiny_config("attentive_statistics", seed=6)
        net = build_network(cfg)
        seq = np.random.default_rng(4).normal(size=(30, cfg.input_dim))
        np.testing.assert_array_equal(extract_embedding(net, seq), extract_embedding(net, seq))

    def test_is_preactivation_of_first_utterance_affine(self):
        # Reconstruct the forward by hand for a one-layer trunk and check the
        # embedding is the affine output before ReLU and batch norm.
        from spkembed.layers import affine_forward, batchnorm_forward, relu_forward
        from spkembed.pooling import pool_forward

        cfg = NetworkConfig(
            input_dim=4,
            num_speakers=2,
            tdnn_layers=(((0,), 5),),
            pooling=PoolingConfig("average"),
            utterance_layers=(3,),
            seed=7,
        )
        net = build_network(cfg)
        seq = np.random.default_rng(5).normal(size=(6, 4))

        a, _ = affine_forward(seq, net.affine("tdnn0"))
        r, _ = relu_forward(a)
        b, _, _ = batchnorm_forward(r, net.bn_state("tdnn0"), "infer")
        stats, _ = pool_forward(b, cfg.pooling)
        expected, _ = affine_forward(stats.concatenated[None, :], net.affine("utt0"))

        np.testing.assert_allclose(extract_embedding(net, seq), expected[0], rtol=1e-12)

    def test_frame_permutation_changes_embedding(self):
        # Documented non-property: the TDNN sees frame order.
        cfg = tiny_config("statistics", seed=8)
        net = build_network(cfg)
        rng = np.random.default_rng(6)
        seq = rng.normal(size=(30, cfg.input_dim))
        permuted = seq[rng.permutation(30)]
        assert not np.allclose(extract_embedding(net, seq), extract_embedding(net, permuted))


class TestGradientsThroughNetwork:
    @pytest.mark.parametrize("kind", ["average", "statistics", "attentive_average",
                                      "attentive_statistics"])
    def test_infer_mode_end_to_end(self, kind):
        model, labels, point = well_conditioned_point(kind, seed=11)
        fn = network_loss_fn(model, labels, "infer")
        err = grad_check(fn, point, step=1e-6, num_directions=4,
                         rng=np.random.default_rng(12))
        assert err < 1e-4

    def test_train_mode_end_to_end(self):
        # Training gradients couple utterances through batch statistics.
        model, labels, point = well_conditioned_point("attentive_statistics", seed=13,
                                                      mode="train")
        fn = network_loss_fn(model, labels, "train")
        err = grad_check(fn, point, step=1e-6, num_directions=4,
                         rng=np.random.default_rng(14))
        assert err < 1e-4


class TestStatisticsEquivalence:
    def test_zero_v_matches_statistics_pooling_logits(self):
        att_cfg = tiny_config("attentive_statistics", seed=20)
        plain_cfg = tiny_config("statistics", seed=21)
        att_net = build_network(att_cfg)
        plain_net = build_network(plain_cfg)
        for name in plain_net.param_names():
            att_net.params[name][...] = plain_net.params[name]
        att_net.params["att.v"][...] = 0.0
        seq = np.random.default_rng(7).normal(size=(25, att_cfg.input_dim))
        logits_att, _ = forward_logits(att_net, seq)
        logits_plain, _ = forward_logits(plain_net, seq)
        np.testing.assert_array_equal(logits_att, logits_plain)


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path):
        cfg = tiny_config("attentive_statistics", seed=30)
        net = build_network(cfg)
        # make running stats non-trivial before saving
        rng = np.random.default_rng(8)
        for running in net.bn_running.values():
            running["mean"] = rng.normal(size=running["mean"].shape)
            running["var"] = np.exp(rng.normal(size=running["var"].shape))
        path = tmp_path / "model.aspx"
        save_checkpoint(net, path)
        loaded = load_checkpoint(path)
        assert loaded.config == net.config
        for name in net.param_names():
            np.testing.assert_array_equal(loaded.params[name], net.params[name])
        for name in net.bn_running:
            np.testing.assert_array_equal(
                loaded.bn_running[name]["mean"], net.bn_running[name]["mean"]
            )
            np.testing.assert_array_equal(
                loaded.bn_running[name]["var"], net.bn_running[name]["var"]
            )
        seq = rng.normal(size=(20, cfg.input_dim))
        a, _ = forward_logits(net, seq)
        b, _ = forward_logits(loaded, seq)
        np.testing.assert_array_equal(a, b)

    def test_corrupted_magic(self, tmp_path):
        cfg = tiny_config("average", seed=31)
        path = tmp_path / "model.aspx"
        save_checkpoint(build_network(cfg), path)
        data = bytearray(path.read_bytes())
        data[:4] = b"XXXX"
        path.write_bytes(bytes(data))
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_future_version_rejected(self, tmp_path):
        cfg = tiny_config("average", seed=32)
        path = tmp_path / "model.aspx"
        save_checkpoint(build_network(cfg), path)
        data = bytearray(path.read_bytes())
        data[4] += 1  # bump the little-endian version field
        path.write_bytes(bytes(data))
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_truncated_file(self, tmp_path):
        cfg = tiny_config("average", seed=33)
        path = tmp_path / "model.aspx"
        save_checkpoint(build_network(cfg), path)
        path.write_bytes(path.read_bytes()[:-9])
        with pytest.raises(FormatError):
            load_checkpoint(path)


class TestBatchedForward:
    def test_batch_matches_singles_in_infer_mode(self):
        cfg = tiny_config("attentive_statistics", seed=40)
        net = build_network(cfg)
        rng = np.random.default_rng(9)
        seqs = [rng.normal(size=(int(rng.integers(18, 30)), cfg.input_dim)) for _ in range(3)]
        batched, _ = forward_batch(net, seqs, "infer")
        for i, seq in enumerate(seqs):
            single, _ = forward_logits(net, seq)
            np.testing.assert_allclose(batched[i], single, atol=1e-12)
