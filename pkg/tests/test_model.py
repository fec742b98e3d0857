import numpy as np
import pytest
from scipy import stats

from neuralstat import tensor as T
from neuralstat._binio import FormatError
from neuralstat.model import ModelConfig, NeuralStatistician, SPATIAL_PRESET, SYNTHETIC_PRESET
from neuralstat.tensor import ShapeError, Tensor

from _oracle import np_kl, np_mlp, params_np

TINY = ModelConfig(n_features=2, c_dim=2, z_dim=2, n_stochastic_layers=2, hidden_width=8, hidden_depth=2)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(n_stochastic_layers=0)
    with pytest.raises(ValueError):
        ModelConfig(sample_dropout_rate=1.0)
    with pytest.raises(ValueError):
        ModelConfig(activation="tanh")
    with pytest.raises(ValueError):
        ModelConfig.from_dict({"c_dim": 3, "colour": "red"})
    assert ModelConfig.from_dict(TINY.to_dict()) == TINY


def test_presets():
    assert (SYNTHETIC_PRESET.c_dim, SYNTHETIC_PRESET.z_dim, SYNTHETIC_PRESET.n_stochastic_layers) == (3, 32, 1)
    assert (SYNTHETIC_PRESET.hidden_width, SYNTHETIC_PRESET.hidden_depth, SYNTHETIC_PRESET.activation) == (128, 3, "relu")
    assert (SPATIAL_PRESET.c_dim, SPATIAL_PRESET.z_dim, SPATIAL_PRESET.n_stochastic_layers) == (64, 2, 3)
    assert (SPATIAL_PRESET.hidden_width, SPATIAL_PRESET.n_features) == (256, 2)


def test_decoder_input_dims_follow_skip_connections():
    cfg = ModelConfig(n_features=3, c_dim=4, z_dim=5, n_stochastic_layers=3, hidden_width=6, hidden_depth=1)
    m = NeuralStatistician(cfg, 0)
    assert m.observation_decoder.layers[0].in_dims == [5, 5, 5, 4]
    assert m.latent_decoders[2].layers[0].in_dims == [4]
    assert m.latent_decoders[0].layers[0].in_dims == [5, 4]
    assert m.inference_nets[2].layers[0].in_dims == [3, 4]
    assert m.inference_nets[1].layers[0].in_dims == [5, 3, 4]
    assert m.post_pool.head.bias.shape == (8,)


def test_init_he_normal_zero_bias():
    m = NeuralStatistician(SYNTHETIC_PRESET, 0)
    w = m.instance_encoder.layers[1].weights[0].data
    assert w.std() == pytest.approx(np.sqrt(2 / 128), rel=0.05)
    assert not m.instance_encoder.layers[1].bias.data.any()


def test_encode_context_matches_manual_pipeline():
    cfg = ModelConfig(n_features=2, c_dim=3, z_dim=2, hidden_width=16, hidden_depth=3)
    m = NeuralStatistician(cfg, 1)
    x = np.random.default_rng(0).normal(size=(1, 5, 2))
    q = m.encode_context(x)
    P = params_np(m)
    h = x[0]
    for i in range(3):
        h = np.maximum(h @ P[f"stat.encoder.{i}.W0"] + P[f"stat.encoder.{i}.b"], 0)
    out = np_mlp(P, "stat.post_pool", [h.mean(0)], 3)
    np.testing.assert_allclose(q.mean.data[0], out[:3], rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(q.log_var.data[0], np.clip(out[3:], -10, 10), rtol=1e-12, atol=1e-14)


def test_encode_context_repeated_point():
    m = NeuralStatistician(TINY, 2)
    x = np.array([[0.3, -1.2]])
    one = m.encode_context(x[None])
    many = m.encode_context(np.repeat(x, 7, axis=0)[None])
    np.testing.assert_allclose(one.mean.data, many.mean.data, rtol=1e-14)
    np.testing.assert_allclose(one.log_var.data, many.log_var.data, rtol=1e-14)


def test_encode_context_rejects_empty_and_bad_shape():
    m = NeuralStatistician(TINY, 0)
    with pytest.raises(ValueError):
        m.encode_context(np.zeros((2, 0, 2)))
    with pytest.raises(ShapeError):
        m.encode_context(np.zeros((2, 3, 5)))


@pytest.mark.parametrize("pooling", ["mean", "sum", "max"])
def test_permutation_invariance(pooling):
    cfg = ModelConfig(n_features=2, c_dim=3, z_dim=2, n_stochastic_layers=2, hidden_width=16, hidden_depth=2,
                      pooling=pooling, append_count_feature=True, max_set_size=10)
    m = NeuralStatistician(cfg, 3)
    rng = np.random.default_rng(4)
    x = rng.normal(size=(3, 6, 2))
    noise = m.draw_noise(3, 6, rng)
    base_q = m.encode_context(x)
    base = m.elbo(x, noise=noise).values()
    for _ in range(20):
        perms = np.array([rng.permutation(6) for _ in range(3)])
        xp = x[np.arange(3)[:, None], perms]
        q = m.encode_context(xp)
        assert np.max(np.abs(q.mean.data - base_q.mean.data)) < 1e-9
        assert np.max(np.abs(q.log_var.data - base_q.log_var.data)) < 1e-9
        got = m.elbo(xp, noise=noise.permuted(perms)).values()
        for k in base:
            assert abs(got[k] - base[k]) < 1e-9


def test_sample_dropout_mask_keeps_one_and_matches_subset():
    cfg = ModelConfig(n_features=1, c_dim=2, z_dim=2, hidden_width=8, hidden_depth=2, sample_dropout_rate=0.9,
                      append_count_feature=True, max_set_size=8)
    m = NeuralStatistician(cfg, 0)
    rng = np.random.default_rng(5)
    noise = m.draw_noise(200, 8, rng, training=True)
    assert noise.keep.sum(axis=1).min() >= 1
    assert 0.05 < 1 - noise.keep.mean() < 0.95
    x = rng.normal(size=(1, 8, 1))
    keep = np.zeros((1, 8), bool)
    keep[0, [1, 4, 6]] = True
    masked = m.encode_context(x, keep=keep)
    # the count feature makes a 3-point subset differ from the masked 8-point set only through its size
    direct = m.context_from_pooled(m.pool(m.encode_instances(x[:, [1, 4, 6]])))
    np.testing.assert_allclose(masked.mean.data, direct.mean.data, rtol=1e-12)
    v = m.pool(m.encode_instances(x), keep)
    assert v.data[0, -1] == pytest.approx(3 / 8)


def test_dropout_inactive_outside_training():
    cfg = ModelConfig(n_features=1, c_dim=2, z_dim=2, hidden_width=8, hidden_depth=2, sample_dropout_rate=0.5)
    m = NeuralStatistician(cfg, 0)
    assert m.draw_noise(4, 5, np.random.default_rng(0)).keep is None


def test_infer_latents_zero_noise_is_mean_path():
    m = NeuralStatistician(TINY, 6)
    rng = np.random.default_rng(7)
    x, c = rng.normal(size=(2, 4, 2)), rng.normal(size=(2, 2))
    zero = [np.zeros((2, 4, 2))] * 2
    path = m.infer_latents(x, c, zero)
    for z, p in zip(path.samples, path.params):
        np.testing.assert_array_equal(z.data, p.mean.data)
    again = m.infer_latents(x, c, zero)
    np.testing.assert_array_equal(again.samples[0].data, path.samples[0].data)


def test_infer_latents_single_layer():
    cfg = ModelConfig(n_features=2, c_dim=2, z_dim=3, hidden_width=8, hidden_depth=2)
    m = NeuralStatistician(cfg, 0)
    rng = np.random.default_rng(8)
    x, c, eps = rng.normal(size=(1, 5, 2)), rng.normal(size=(1, 2)), rng.normal(size=(1, 5, 3))
    path = m.infer_latents(x, c, [eps])
    assert len(path.samples) == 1
    p = path.params[0]
    np.testing.assert_allclose(path.samples[0].data, p.mean.data + np.exp(0.5 * p.log_var.data) * eps)


def test_infer_latents_top_noise_changes_lower_layer():
    cfg = ModelConfig(n_features=2, c_dim=2, z_dim=2, n_stochastic_layers=3, hidden_width=8, hidden_depth=2)
    m = NeuralStatistician(cfg, 9)
    rng = np.random.default_rng(10)
    x, c = rng.normal(size=(1, 3, 2)), rng.normal(size=(1, 2))
    eps = [rng.normal(size=(1, 3, 2)) for _ in range(3)]
    a = m.infer_latents(x, c, eps)
    eps2 = [eps[0], eps[1], eps[2] + 0.5]
    b = m.infer_latents(x, c, eps2)
    assert np.abs(a.params[1].mean.data - b.params[1].mean.data).max() > 1e-6
    np.testing.assert_array_equal(a.params[2].mean.data, b.params[2].mean.data)


def test_infer_latents_dim_checks():
    m = NeuralStatistician(TINY, 0)
    with pytest.raises(ShapeError):
        m.infer_latents(np.zeros((2, 3, 2)), np.zeros((2, 5)), [np.zeros((2, 3, 2))] * 2)
    with pytest.raises(ShapeError):
        m.infer_latents(np.zeros((2, 3, 2)), np.zeros((2, 2)), [np.zeros((2, 3, 2))])


def test_decode_latent_params_contract():
    m = NeuralStatistician(TINY, 11)
    c = np.random.default_rng(12).normal(size=(2, 2))
    top = m.decode_latent_params(None, c, 2)
    assert top.shape == (2, 2)
    with pytest.raises(ValueError):
        m.decode_latent_params(np.zeros((2, 3, 2)), c, 2)
    with pytest.raises(ValueError):
        m.decode_latent_params(None, c, 1)
    with pytest.raises(ValueError):
        m.decode_latent_params(None, c, 3)
    z = np.random.default_rng(13).normal(size=(2, 3, 2))
    a = m.decode_latent_params(Tensor(z), Tensor(c), 1)
    b = m.decode_latent_params(Tensor(z), Tensor(c), 1)
    np.testing.assert_array_equal(a.mean.data, b.mean.data)


def test_decode_latent_params_differentiable_in_c():
    m = NeuralStatistician(ModelConfig(n_features=1, c_dim=3, z_dim=2, hidden_width=8, hidden_depth=2,
                                       activation="elu"), 14)
    f = lambda c: T.tsum(T.square(m.decode_latent_params(None, c, 1).mean))
    assert T.grad_check(f, np.random.default_rng(15).normal(size=(2, 3))) < 1e-5


def test_decode_observation_bernoulli_range():
    cfg = ModelConfig(n_features=4, c_dim=2, z_dim=2, hidden_width=8, hidden_depth=2, likelihood="bernoulli")
    m = NeuralStatistician(cfg, 16)
    rng = np.random.default_rng(17)
    p = m.decode_observation([Tensor(rng.normal(scale=5, size=(2, 3, 2)))], Tensor(rng.normal(size=(2, 2)))).data
    assert p.shape == (2, 3, 4)
    assert np.all((p > 0) & (p < 1))


def test_decode_observation_gradient_reaches_every_latent_and_c():
    cfg = ModelConfig(n_features=2, c_dim=2, z_dim=2, n_stochastic_layers=3, hidden_width=8, hidden_depth=2)
    m = NeuralStatistician(cfg, 18)
    rng = np.random.default_rng(19)
    zs = [Tensor(rng.normal(size=(2, 4, 2)), requires_grad=True) for _ in range(3)]
    c = Tensor(rng.normal(size=(2, 2)), requires_grad=True)
    out = m.decode_observation(zs, c)
    T.backward(T.tsum(out.mean) + T.tsum(out.log_var))
    for t in zs + [c]:
        assert t.grad is not None and np.abs(t.grad).sum() > 0
    with pytest.raises(ShapeError):
        m.decode_observation(zs[:2], c)


def test_elbo_terms_nonnegative_and_consistent():
    m = NeuralStatistician(TINY, 20)
    rng = np.random.default_rng(21)
    for _ in range(5):
        terms = m.elbo(rng.normal(size=(3, 4, 2)), rng=rng)
        v = terms.values()
        assert v["c_d"] >= 0 and v["l_d"] >= 0
        assert v["total"] == pytest.approx(v["r_d"] - v["c_d"] - v["l_d"], abs=1e-10)
        assert np.all(terms.per_set["c_d"] >= 0) and np.all(terms.per_set["l_d"] >= 0)


def test_elbo_needs_noise_or_rng():
    with pytest.raises(ValueError):
        NeuralStatistician(TINY, 0).elbo(np.zeros((1, 2, 2)))


def _freeze_at_priors(m: NeuralStatistician) -> None:
    """Zero the statistic head and copy each latent decoder into its inference net (x weights zeroed)."""
    head = m.post_pool.head
    for w in head.weights:
        w.data[...] = 0.0
    head.bias.data[...] = 0.0
    for inf, dec in zip(m.inference_nets, m.latent_decoders):
        first_inf, first_dec = inf.layers[0], dec.layers[0]
        # inference inputs: [z_next?, x, c]; decoder inputs: [z_next?, c]
        x_slot = len(first_inf.weights) - 2
        for j, w in enumerate(first_inf.weights):
            if j == x_slot:
                w.data[...] = 0.0
            else:
                w.data[...] = first_dec.weights[j if j < x_slot else j - 1].data
        first_inf.bias.data[...] = first_dec.bias.data
        for a, b in list(zip(inf.layers[1:], dec.layers[1:])) + [(inf.head, dec.head)]:
            a.weights[0].data[...] = b.weights[0].data
            a.bias.data[...] = b.bias.data


def test_context_divergence_zero_at_prior():
    m = NeuralStatistician(TINY, 22)
    for w in m.post_pool.head.weights:
        w.data[...] = 0.0
    terms = m.elbo(np.random.default_rng(23).normal(size=(2, 3, 2)), rng=np.random.default_rng(0))
    assert terms.c_d.item() == 0.0


def test_latent_divergence_zero_when_inference_matches_decoder():
    m = NeuralStatistician(TINY, 24)
    _freeze_at_priors(m)
    terms = m.elbo(np.random.default_rng(25).normal(size=(2, 3, 2)), rng=np.random.default_rng(1))
    assert abs(terms.l_d.item()) < 1e-12
    assert abs(terms.c_d.item()) < 1e-12
    assert terms.total.item() == pytest.approx(terms.r_d.item(), abs=1e-12)


def test_elbo_single_point_matches_independent_bound():
    cfg = ModelConfig(n_features=2, c_dim=3, z_dim=2, hidden_width=8, hidden_depth=2)
    m = NeuralStatistician(cfg, 26)
    rng = np.random.default_rng(27)
    x = rng.normal(size=(1, 1, 2))
    noise = m.draw_noise(1, 1, rng)
    got = m.elbo(x, noise=noise).total.item()

    P = params_np(m)
    sd = lambda lv: np.exp(0.5 * lv)
    h = x[0]
    for i in range(2):
        h = np.maximum(h @ P[f"stat.encoder.{i}.W0"] + P[f"stat.encoder.{i}.b"], 0)
    qc = np_mlp(P, "stat.post_pool", [h.mean(0)], 2)
    qc_m, qc_lv = qc[:3], qc[3:]
    c = qc_m + sd(qc_lv) * noise.context[0]
    qz = np_mlp(P, "inference.1", [x[0, 0], c], 2)
    qz_m, qz_lv = qz[:2], qz[2:]
    z = qz_m + sd(qz_lv) * noise.latents[0][0, 0]
    pz = np_mlp(P, "latent_decoder.1", [c], 2)
    px = np_mlp(P, "obs_decoder", [z, c], 2)

    expected = (stats.norm.logpdf(x[0, 0], px[:2], sd(px[2:])).sum()
                - np_kl(qz_m, qz_lv, pz[:2], pz[2:]) - np_kl(qc_m, qc_lv, 0, 0))
    assert got == pytest.approx(expected, rel=1e-12)


def test_end_to_end_gradient_tiny_config():
    m = NeuralStatistician(TINY, 28)
    rng = np.random.default_rng(29)
    x = rng.normal(size=(2, 3, 2))
    noise = m.draw_noise(2, 3, rng)
    assert T.grad_check_params(lambda: -m.elbo(x, noise=noise).total, m.parameters()) < 1e-4


def test_end_to_end_gradient_with_extensions():
    cfg = ModelConfig(n_features=2, c_dim=2, z_dim=2, n_stochastic_layers=2, hidden_width=6, hidden_depth=1,
                      activation="elu", append_count_feature=True, max_set_size=5, shared_obs_variance=True,
                      shared_encoder=True, sample_dropout_rate=0.3)
    m = NeuralStatistician(cfg, 30)
    rng = np.random.default_rng(31)
    x = rng.normal(size=(2, 4, 2))
    noise = m.draw_noise(2, 4, rng, training=True)
    assert T.grad_check_params(lambda: -m.elbo(x, noise=noise).total, m.parameters()) < 1e-4


def test_bernoulli_elbo_gradient():
    cfg = ModelConfig(n_features=3, c_dim=2, z_dim=2, hidden_width=6, hidden_depth=1, likelihood="bernoulli",
                      activation="elu")
    m = NeuralStatistician(cfg, 32)
    rng = np.random.default_rng(33)
    x = (rng.random((2, 3, 3)) < 0.5).astype(float)
    noise = m.draw_noise(2, 3, rng)
    assert T.grad_check_params(lambda: -m.elbo(x, noise=noise).total, m.parameters()) < 1e-4


# -- checkpoints ------------------------------------------------------------------------------
def test_checkpoint_round_trip(tmp_path):
    cfg = ModelConfig(n_features=2, c_dim=3, z_dim=2, n_stochastic_layers=2, hidden_width=8, hidden_depth=2,
                      shared_obs_variance=True)
    m = NeuralStatistician(cfg, 34)
    path = tmp_path / "m.nstm"
    m.save(path)
    back = NeuralStatistician.load(path)
    assert back.config == cfg
    a, b = m.named_parameters(), back.named_parameters()
    assert list(a) == list(b)
    for k in a:
        assert np.array_equal(a[k].data, b[k].data)
    assert back.state_bytes() == path.read_bytes()


def test_checkpoint_size_matches_layout():
    m = NeuralStatistician(TINY, 0)
    buf = m.state_bytes()
    cfg_len = int.from_bytes(buf[8:12], "little")
    expected = 4 + 4 + 4 + cfg_len + 4
    for name, p in m.named_parameters().items():
        expected += 4 + len(name.encode()) + 4 + 4 * p.data.ndim + 8 * p.data.size
    assert len(buf) == expected


@pytest.mark.parametrize("mutate,match", [
    (lambda b: b"XXXX" + b[4:], "magic"),
    (lambda b: b[:4] + (7).to_bytes(4, "little") + b[8:], "version"),
    (lambda b: b[:10], "truncated"),
    (lambda b: b[:-3], "truncated"),
    (lambda b: b + b"\x00", "trailing"),
    (lambda b: b[:12] + b"!" + b[13:], "config"),
])
def test_checkpoint_corruption_is_structured(mutate, match):
    buf = NeuralStatistician(TINY, 0).state_bytes()
    with pytest.raises(FormatError, match=match):
        NeuralStatistician.from_bytes(mutate(buf))


def test_checkpoint_shape_mismatch():
    buf = bytearray(NeuralStatistician(TINY, 0).state_bytes())
    other = NeuralStatistician(ModelConfig(**{**TINY.to_dict(), "hidden_width": 9}), 0).state_bytes()
    cfg_len = int.from_bytes(buf[8:12], "little")
    # splice the wider model's parameters behind this model's config
    o_cfg = int.from_bytes(other[8:12], "little")
    spliced = bytes(buf[:12 + cfg_len]) + other[12 + o_cfg:]
    with pytest.raises(FormatError, match="shape"):
        NeuralStatistician.from_bytes(spliced)


def test_head_init_scale():
    full = NeuralStatistician(ModelConfig(**{**TINY.to_dict(), "head_init_scale": 1.0}), 5)
    small = NeuralStatistician(TINY, 5)
    np.testing.assert_allclose(small.post_pool.head.weights[0].data, 0.01 * full.post_pool.head.weights[0].data)
    np.testing.assert_array_equal(small.post_pool.layers[0].weights[0].data, full.post_pool.layers[0].weights[0].data)
