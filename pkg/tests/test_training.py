import numpy as np
import pytest

from neuralstat import data as D
from neuralstat.model import ModelConfig, NeuralStatistician
from neuralstat.tensor import ShapeError
from neuralstat.training import TrainConfig, TrainLog, block_means, evaluate, fit, keyed_noise

SMALL = ModelConfig(n_features=1, c_dim=3, z_dim=4, hidden_width=32, hidden_depth=2, max_set_size=20)


def params_bytes(model):
    return b"".join(p.data.tobytes() for p in model.parameters())


def test_config_defaults_and_validation():
    cfg = TrainConfig()
    assert (cfg.batch_size, cfg.epochs, cfg.lr, cfg.mc_samples) == (16, 50, 1e-3, 1)
    for bad in ({"batch_size": 0}, {"epochs": 0}, {"mc_samples": 0}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"learning_rate": 0.1})


def test_loss_decreases_on_tiny_corpus():
    corpus = D.gen_synthetic_1d(200, 20, seed=0)
    log = fit(NeuralStatistician(SMALL, 0), corpus, TrainConfig(epochs=5, seed=0))
    loss = log.column("loss")
    assert len(loss) == 5
    assert loss[4] < loss[0]


def test_same_seed_reproduces_log_and_checkpoint(tmp_path):
    corpus = D.gen_synthetic_1d(40, 10, seed=1)
    runs = []
    for name in ("a", "b"):
        cfg = TrainConfig(epochs=3, batch_size=7, seed=5, checkpoint_every=2, checkpoint_dir=str(tmp_path / name),
                          log_path=str(tmp_path / name / "log.csv"))
        (tmp_path / name).mkdir()
        log = fit(NeuralStatistician(SMALL, 5), corpus, cfg)
        runs.append(log)
    assert runs[0].to_csv(include_seconds=False) == runs[1].to_csv(include_seconds=False)
    for f in ("epoch_0002.nstm", "final.nstm"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert not (tmp_path / "a" / "epoch_0001.nstm").exists()
    back = TrainLog.load(tmp_path / "a" / "log.csv")
    assert back.to_csv(include_seconds=False) == runs[0].to_csv(include_seconds=False)


def test_different_seed_changes_run():
    corpus = D.gen_synthetic_1d(20, 10, seed=1)
    a = fit(NeuralStatistician(SMALL, 0), corpus, TrainConfig(epochs=1, seed=0))
    b = fit(NeuralStatistician(SMALL, 0), corpus, TrainConfig(epochs=1, seed=1))
    assert a.to_csv(False) != b.to_csv(False)


def test_zero_learning_rate_is_a_null_update():
    corpus = D.gen_synthetic_1d(30, 10, seed=2)
    model = NeuralStatistician(SMALL, 2)
    before = params_bytes(model)
    ev_before = evaluate(model, corpus, seed=3).values()
    fit(model, corpus, TrainConfig(epochs=2, lr=0.0, seed=2))
    assert params_bytes(model) == before
    assert evaluate(model, corpus, seed=3).values() == ev_before


def test_partial_batch_is_used():
    corpus = D.gen_synthetic_1d(17, 5, seed=3)
    model = NeuralStatistician(SMALL, 3)
    fit(model, corpus, TrainConfig(epochs=1, batch_size=16, seed=3))
    # two batches per epoch -> two Adam steps
    assert {p.step_count for p in model.parameters()} == {2}


def test_every_parameter_is_updated():
    corpus = D.gen_synthetic_1d(16, 5, seed=4)
    model = NeuralStatistician(SMALL, 4)
    before = {k: v.data.copy() for k, v in model.named_parameters().items()}
    fit(model, corpus, TrainConfig(epochs=1, seed=4))
    for k, v in model.named_parameters().items():
        assert not np.array_equal(v.data, before[k]), k
        assert v.grad is None


def test_log_csv_layout(tmp_path):
    corpus = D.gen_synthetic_1d(10, 5, seed=5)
    fit(NeuralStatistician(SMALL, 5), corpus, TrainConfig(epochs=2, seed=5, log_path=str(tmp_path / "l.csv")))
    lines = (tmp_path / "l.csv").read_text().splitlines()
    assert lines[0] == "epoch,loss,r_d,c_d,l_d,seconds"
    assert [int(l.split(",")[0]) for l in lines[1:]] == [1, 2]
    row = [float(v) for v in lines[1].split(",")]
    assert row[1] == pytest.approx(-(row[2] - row[3] - row[4]), rel=1e-12)


def test_epoch_loss_matches_terms():
    corpus = D.gen_synthetic_1d(20, 5, seed=6)
    log = fit(NeuralStatistician(SMALL, 6), corpus, TrainConfig(epochs=1, seed=6))
    r = log.records[0]
    assert r.loss == pytest.approx(-(r.r_d - r.c_d - r.l_d), rel=1e-12)
    assert r.c_d >= 0 and r.l_d >= 0


def test_shape_mismatch_reports_batch():
    corpus = D.DatasetBatch(np.zeros((4, 3, 2)))
    with pytest.raises(ShapeError, match="features"):
        fit(NeuralStatistician(SMALL, 0), corpus, TrainConfig(epochs=1))
    with pytest.raises(ValueError):
        fit(NeuralStatistician(SMALL, 0), D.DatasetBatch(np.zeros((0, 3, 1))), TrainConfig(epochs=1))


def test_shape_error_inside_loop_names_epoch_and_batch():
    corpus = D.gen_synthetic_1d(4, 3, seed=0)
    model = NeuralStatistician(SMALL, 0)
    model.config = ModelConfig(**{**SMALL.to_dict(), "c_dim": 4})
    with pytest.raises(ShapeError, match="epoch 1, batch 0"):
        fit(model, corpus, TrainConfig(epochs=1))


def test_mc_samples_average():
    corpus = D.gen_synthetic_1d(8, 5, seed=7)
    log = fit(NeuralStatistician(SMALL, 7), corpus, TrainConfig(epochs=1, mc_samples=3, seed=7))
    assert np.isfinite(log.records[0].loss)


def test_sample_dropout_training_runs():
    cfg = ModelConfig(**{**SMALL.to_dict(), "sample_dropout_rate": 0.5, "append_count_feature": True})
    log = fit(NeuralStatistician(cfg, 8), D.gen_synthetic_1d(16, 10, seed=8), TrainConfig(epochs=2, seed=8))
    assert np.all(np.isfinite(log.column("loss")))


# -- evaluate ------------------------------------------------------------------------------------
def test_evaluate_single_set_equals_elbo():
    corpus = D.gen_synthetic_1d(1, 10, seed=9)
    model = NeuralStatistician(SMALL, 9)
    got = evaluate(model, corpus, seed=4).values()
    direct = model.elbo(corpus.values, noise=keyed_noise(model, corpus.values, 4)).values()
    assert got == direct


def test_evaluate_order_invariant_and_hand_averaged():
    corpus = D.gen_synthetic_1d(23, 10, seed=10)
    model = NeuralStatistician(SMALL, 10)
    ev = evaluate(model, corpus, seed=1, batch_size=5)
    perm = np.random.default_rng(0).permutation(23)
    shuffled = evaluate(model, corpus.subset(perm), seed=1, batch_size=7)
    assert shuffled.total.item() == pytest.approx(ev.total.item(), rel=1e-12)
    np.testing.assert_allclose(shuffled.per_set["total"], ev.per_set["total"][perm], rtol=1e-12)
    singles = [evaluate(model, corpus.subset([i]), seed=1).values() for i in range(23)]
    for k in ("r_d", "c_d", "l_d", "total"):
        assert ev.values()[k] == pytest.approx(np.mean([s[k] for s in singles]), rel=1e-12)


def test_evaluate_is_pure():
    corpus = D.gen_synthetic_1d(5, 10, seed=11)
    model = NeuralStatistician(SMALL, 11)
    before = params_bytes(model)
    a = evaluate(model, corpus).values()
    b = evaluate(model, corpus).values()
    assert a == b and params_bytes(model) == before
    assert all(p.grad is None for p in model.parameters())


def test_block_means():
    np.testing.assert_array_equal(block_means(np.arange(12), 5), [2.0, 7.0])
    assert block_means([1.0, 2.0], 5).size == 0
