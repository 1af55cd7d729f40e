"""Recurrent risk head: cells, BPTT gradients, training, evaluation."""

import numpy as np
import pytest

from actspec.datagen import default_trace_config, gen_trace_corpus
from actspec.errors import ConfigError, ContractError
from actspec.monitor import run_trace, truncate_series
from actspec.recurrent import (
    TrainConfig,
    auroc,
    eval_early_detection,
    head_backward,
    head_forward,
    head_param_count,
    head_train,
    init_head,
    score_series,
)
from actspec.rng import make_rng, normal
from conftest import series_from_matrix


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def reference_single_step(params, x):
    """Independent one-step cell evaluation, written from the equations."""
    h = params.hidden_dim
    hp = np.zeros(h)
    if params.cell == "rnn":
        out = np.tanh(params.w_in @ x + params.w_rec @ hp + params.b)
    elif params.cell == "gru":
        z = sigmoid(params.w_in[:h] @ x + params.w_rec[:h] @ hp + params.b[:h])
        r = sigmoid(
            params.w_in[h : 2 * h] @ x
            + params.w_rec[h : 2 * h] @ hp
            + params.b[h : 2 * h]
        )
        n = np.tanh(
            params.w_in[2 * h :] @ x
            + params.w_rec[2 * h :] @ (r * hp)
            + params.b[2 * h :]
        )
        out = (1.0 - z) * hp + z * n
    else:
        i = sigmoid(params.w_in[:h] @ x + params.w_rec[:h] @ hp + params.b[:h])
        f = sigmoid(
            params.w_in[h : 2 * h] @ x
            + params.w_rec[h : 2 * h] @ hp
            + params.b[h : 2 * h]
        )
        g = np.tanh(
            params.w_in[2 * h : 3 * h] @ x
            + params.w_rec[2 * h : 3 * h] @ hp
            + params.b[2 * h : 3 * h]
        )
        o = sigmoid(
            params.w_in[3 * h :] @ x + params.w_rec[3 * h :] @ hp + params.b[3 * h :]
        )
        c = f * np.zeros(h) + i * g
        out = o * np.tanh(c)
    return sigmoid(params.w_out @ out + params.b_out[0])


def finite_difference_check(params, batch, labels, loss_mode, h=1e-5):
    _, grads = head_backward(params, batch, labels, loss_mode)
    worst = 0.0
    for leaf, grad in zip(params.leaves(), grads):
        it = np.nditer(leaf, flags=["multi_index"])
        for _ in it:
            ix = it.multi_index
            orig = leaf[ix]
            leaf[ix] = orig + h
            up, _ = head_backward(params, batch, labels, loss_mode)
            leaf[ix] = orig - h
            down, _ = head_backward(params, batch, labels, loss_mode)
            leaf[ix] = orig
            fd = (up - down) / (2.0 * h)
            denom = max(abs(fd), abs(grad[ix]), 1e-8)
            worst = max(worst, abs(fd - grad[ix]) / denom)
    return worst


def random_batch(seed, n_series=2, steps=3, width=10):
    rng = make_rng(seed)
    batch = [
        series_from_matrix(normal(rng, (steps, width)), trace_id=f"s{i}")
        for i in range(n_series)
    ]
    labels = np.array([1.0, 0.0][:n_series])
    return batch, labels


class TestForward:
    @pytest.mark.parametrize("cell", ["rnn", "gru", "lstm"])
    def test_zero_params_score_half(self, cell):
        params = init_head(cell, 10, 4, seed=0)
        for leaf in params.leaves():
            leaf[:] = 0.0
        series = series_from_matrix(normal(make_rng(1), (5, 10)))
        assert np.array_equal(head_forward(params, series), np.full(5, 0.5))

    def test_gru_readout_bias_only(self):
        params = init_head("gru", 10, 4, seed=0)
        for leaf in params.leaves():
            leaf[:] = 0.0
        params.b_out[:] = 0.7
        series = series_from_matrix(normal(make_rng(2), (4, 10)))
        expected = sigmoid(0.7)
        assert head_forward(params, series) == pytest.approx(
            np.full(4, expected), abs=1e-15
        )

    @pytest.mark.parametrize("cell", ["rnn", "gru", "lstm"])
    def test_single_step_matches_reference(self, cell):
        params = init_head(cell, 10, 6, seed=3)
        params.b[:] = normal(make_rng(4), params.b.shape) * 0.2
        if cell == "lstm":
            params.b[6:12] += 1.0
        params.b_out[:] = -0.3
        x = normal(make_rng(5), 10)
        series = series_from_matrix(x[None, :])
        ours = head_forward(params, series)[0]
        assert ours == pytest.approx(reference_single_step(params, x), abs=1e-12)

    @pytest.mark.parametrize("cell", ["rnn", "gru", "lstm"])
    def test_scores_strictly_inside_unit_interval(self, cell):
        params = init_head(cell, 10, 8, seed=6)
        params.w_out[:] = 100.0  # saturate the readout
        series = series_from_matrix(normal(make_rng(7), (20, 10)) * 50.0)
        scores = head_forward(params, series)
        assert np.all(scores > 0.0)
        assert np.all(scores < 1.0)

    def test_width_mismatch_rejected(self):
        params = init_head("gru", 9, 4, seed=8)
        series = series_from_matrix(np.zeros((3, 10)))
        with pytest.raises(ContractError):
            head_forward(params, series)


class TestBackward:
    @pytest.mark.parametrize("cell", ["rnn", "gru", "lstm"])
    @pytest.mark.parametrize("loss_mode", ["last_step", "mean_steps"])
    def test_gradients_match_finite_differences(self, cell, loss_mode):
        params = init_head(cell, 10, 4, seed=cell.__hash__() % 100)
        params.b[:] = normal(make_rng(9), params.b.shape) * 0.3
        batch, labels = random_batch(10)
        assert finite_difference_check(params, batch, labels, loss_mode) <= 1e-4

    def test_duplicated_batch_same_gradients(self):
        params = init_head("gru", 10, 4, seed=11)
        batch, labels = random_batch(12, n_series=1)
        loss1, grads1 = head_backward(params, batch, labels[:1])
        loss2, grads2 = head_backward(params, batch * 2, np.repeat(labels[:1], 2))
        assert loss2 == pytest.approx(loss1, abs=1e-15)
        for a, b in zip(grads1, grads2):
            assert b == pytest.approx(a, abs=1e-15)

    def test_label_flip_symmetry(self):
        # tanh RNN with zero biases is odd in the input, so negating the
        # series mirrors the score: p -> 1-p.  BCE(p,1) = BCE(1-p,0) keeps
        # the loss equal and negates the readout-bias gradient.
        params = init_head("rnn", 10, 4, seed=13)
        params.b[:] = 0.0
        params.b_out[:] = 0.0
        mat = normal(make_rng(14), (5, 10))
        pos = [series_from_matrix(mat)]
        neg = [series_from_matrix(-mat)]
        loss_pos, grads_pos = head_backward(params, pos, np.array([1.0]))
        loss_neg, grads_neg = head_backward(params, neg, np.array([0.0]))
        assert loss_neg == pytest.approx(loss_pos, abs=1e-12)
        assert grads_neg[-1][0] == pytest.approx(-grads_pos[-1][0], abs=1e-12)

    def test_bad_labels_rejected(self):
        params = init_head("gru", 10, 4, seed=15)
        batch, _ = random_batch(16)
        with pytest.raises(ConfigError):
            head_backward(params, batch, np.array([0.5, 0.5]))


class TestParamCounts:
    def test_gru_example_exact(self):
        assert head_param_count("gru", 10, 16) == 1313
        params = init_head("gru", 10, 16, seed=0)
        assert sum(leaf.size for leaf in params.leaves()) == 1313

    def test_all_cells_small(self):
        assert head_param_count("rnn", 10, 16) == 449
        assert head_param_count("lstm", 10, 16) == 1745
        for cell in ("rnn", "gru", "lstm"):
            assert head_param_count(cell, 10, 16) <= 10_000

    def test_oversized_rejected(self):
        with pytest.raises(ConfigError):
            init_head("lstm", 10, 60, seed=0)


class TestAuroc:
    def test_known_value(self):
        assert auroc(np.array([0.1, 0.4, 0.35, 0.8]), np.array([0, 0, 1, 1])) == 0.75

    def test_perfect_separation(self):
        assert auroc(np.array([0.1, 0.2, 0.8, 0.9]), np.array([0, 0, 1, 1])) == 1.0

    def test_all_ties(self):
        assert auroc(np.full(6, 0.4), np.array([0, 1, 0, 1, 0, 1])) == 0.5

    def test_invariant_under_increasing_transforms(self):
        rng = make_rng(17)
        scores = rng.random(40)
        labels = (rng.random(40) > 0.5).astype(int)
        labels[:2] = [0, 1]  # both classes
        base = auroc(scores, labels)
        assert auroc(2.0 * scores + 1.0, labels) == pytest.approx(base, abs=1e-15)
        assert auroc(scores**3, labels) == pytest.approx(base, abs=1e-15)

    def test_single_class_rejected(self):
        with pytest.raises(ConfigError):
            auroc(np.array([0.1, 0.2]), np.array([1, 1]))


@pytest.fixture(scope="module")
def tiny_corpus():
    """Small but separable corpus: 24 traces, T=60, N=16."""
    template = default_trace_config(seed=100, dim=24, length=60)
    traces = gen_trace_corpus(12, template, seed=100)
    return [run_trace(t, window_len=16) for t in traces]


class TestTraining:
    def test_zero_learning_rate_keeps_params(self, tiny_corpus):
        config = TrainConfig(learning_rate=0.0, epochs=2, seed=0)
        params, _ = head_train(tiny_corpus, config, cell="gru", hidden_dim=8)
        fresh = init_head("gru", 10, 8, seed=0)
        assert np.array_equal(params.w_in, fresh.w_in)
        assert np.array_equal(params.w_rec, fresh.w_rec)
        assert np.array_equal(params.b, fresh.b)

    def test_identical_seeds_identical_history(self, tiny_corpus):
        config = TrainConfig(epochs=4, seed=3)
        _, hist1 = head_train(tiny_corpus, config, cell="rnn", hidden_dim=8)
        _, hist2 = head_train(tiny_corpus, config, cell="rnn", hidden_dim=8)
        assert hist1 == hist2

    def test_learns_tiny_corpus(self, tiny_corpus):
        config = TrainConfig(epochs=12, seed=0)
        params, history = head_train(tiny_corpus, config, cell="gru", hidden_dim=8)
        assert max(h["val_auroc"] for h in history) >= 0.9
        assert params.standardization is not None

    def test_single_class_rejected(self, tiny_corpus):
        only_pos = [s for s in tiny_corpus if s.risk_label == 1]
        with pytest.raises(ConfigError):
            head_train(only_pos, TrainConfig(epochs=1), cell="gru", hidden_dim=8)

    def test_missing_split_rejected(self, tiny_corpus):
        stripped = []
        for s in tiny_corpus:
            c = truncate_series(s, 60)
            c.meta = {}
            stripped.append(c)
        with pytest.raises(ConfigError, match="split"):
            head_train(stripped, TrainConfig(epochs=1), cell="gru", hidden_dim=8)

    def test_standardized_series_rejected_at_forward(self, tiny_corpus):
        from actspec.monitor import feature_stats, standardize_series

        config = TrainConfig(epochs=1, seed=0)
        params, _ = head_train(tiny_corpus, config, cell="gru", hidden_dim=8)
        mean, std = feature_stats(tiny_corpus)
        z = standardize_series(tiny_corpus[0], mean, std)
        with pytest.raises(ContractError):
            head_forward(params, z)


class TestEvaluation:
    def test_budget_endpoints(self, tiny_corpus):
        config = TrainConfig(epochs=6, seed=1)
        params, _ = head_train(tiny_corpus, config, cell="gru", hidden_dim=8)
        test = [s for s in tiny_corpus if s.meta["split"] != "train"]
        curve = eval_early_detection(params, test, [16, 60])
        labels = np.array([s.risk_label for s in test])
        single = np.array(
            [score_series(params, truncate_series(s, 16)) for s in test]
        )
        assert curve[0] == (16, pytest.approx(auroc(single, labels)))
        full = np.array([score_series(params, s) for s in test])
        assert curve[1] == (60, pytest.approx(auroc(full, labels)))
