import numpy as np
import pytest

from caspr import autodiff as ad
from caspr import transformer as tf
from caspr.autodiff import Tensor
from caspr.errors import ConfigError, NumericError, SchemaMismatch
from caspr.ingest import ActivityRow, ColumnSpec, EntitySequence, FittedSchema, Schema


def tiny_fitted(n_num=1, vocab_sizes=(3,), statics=0):
    cols = [ColumnSpec("entity", "entity_id"), ColumnSpec("ts", "timestamp")]
    cols += [ColumnSpec(f"x{i}", "numerical") for i in range(n_num)]
    cols += [ColumnSpec(f"c{i}", "categorical") for i in range(len(vocab_sizes))]
    cols += [ColumnSpec(f"s{i}", "static_numerical") for i in range(statics)]
    schema = Schema(cols)
    vocab = {f"c{i}": [f"v{j}" for j in range(n)] for i, n in enumerate(vocab_sizes)}
    means = {f"x{i}": 0.0 for i in range(n_num)} | {f"s{i}": 0.0 for i in range(statics)}
    stds = {f"x{i}": 1.0 for i in range(n_num)} | {f"s{i}": 1.0 for i in range(statics)}
    return FittedSchema(schema, vocab=vocab, means=means, stds=stds)


def make_sequence(entity, values, codes, t, statics=(), ts_start=0):
    steps = [
        ActivityRow(entity=entity, ts=ts_start + i, nums=np.atleast_1d(np.float64(v)),
                    cats=np.atleast_1d(np.int64(c)), static_nums=np.array(list(statics)),
                    static_cats=np.array([], dtype=np.int64))
        for i, (v, c) in enumerate(zip(values, codes))
    ]
    return EntitySequence(entity=entity, steps=steps, pad_len=t - len(steps),
                          statics=np.array(list(statics), dtype=np.float64))


def random_sequences(rng, n, t, fitted, max_len=None, statics=0):
    out = []
    vocab_n = len(fitted.vocab["c0"])
    for i in range(n):
        k = int(rng.integers(1, (max_len or t) + 1))
        values = rng.normal(size=k)
        codes = rng.integers(1, vocab_n + 1, size=k)
        st = tuple(rng.normal(size=statics))
        out.append(make_sequence(f"e{i}", values, codes, t, statics=st))
    return out


def small_weights(fitted, seed=0, **overrides):
    defaults = dict(hidden=8, ff_dim=16, layers=2, heads=2, dropout=0.0, t=6,
                    emb_out=4, precision="f64")
    defaults.update(overrides)
    cfg = tf.ModelConfig(**defaults)
    return cfg, tf.build_weights(cfg, fitted, np.random.default_rng(seed))


class TestConfig:
    def test_defaults_match_contract(self):
        cfg = tf.ModelConfig()
        assert (cfg.hidden, cfg.ff_dim, cfg.layers, cfg.heads) == (16, 32, 6, 8)
        assert cfg.dropout == 0.1 and cfg.t == 15 and cfg.mask_p == 0.3
        assert cfg.d_k == 2

    def test_hidden_divisible_by_heads(self):
        with pytest.raises(ConfigError):
            tf.ModelConfig(hidden=10, heads=4)


class TestProjectInputs:
    def test_position_scalar_last_slot_is_one(self):
        fitted = tiny_fitted()
        cfg, _ = small_weights(fitted, t=15)
        seq = make_sequence("a", [0.5] * 15, [1] * 15, 15)
        batch = tf.prepare_batch([seq], fitted, cfg)
        assert batch.pos[0, -1] == 1.0
        np.testing.assert_allclose(batch.pos[0], (np.arange(15) + 1) / 15)

    def test_output_shape_default_config(self):
        fitted = tiny_fitted()
        cfg = tf.ModelConfig(precision="f64")
        weights = tf.build_weights(cfg, fitted, np.random.default_rng(0))
        seqs = random_sequences(np.random.default_rng(1), 3, 15, fitted)
        out = tf.project_inputs(seqs, weights)
        assert out.shape == (3, 15, 16)

    def test_all_pad_projects_to_zero_input(self):
        fitted = tiny_fitted()
        cfg, weights = small_weights(fitted)
        seq = EntitySequence("a", [], pad_len=cfg.t, statics=np.array([]))
        batch = tf.prepare_batch([seq], fitted, cfg)
        parts = np.concatenate([batch.pos[..., None] * batch.keep[..., None],
                                batch.nums * batch.keep[..., None]], axis=2)
        assert (parts == 0).all()
        out = tf.project_inputs(batch, weights)
        expected = weights["in_proj/b"].data[None, None, :]
        np.testing.assert_allclose(out.data, np.broadcast_to(expected, out.shape))

    def test_schema_mismatch_detected(self):
        fitted2 = tiny_fitted(n_num=2)
        cfg, weights = small_weights(tiny_fitted(n_num=1))
        seq = make_sequence("a", [1.0], [1], cfg.t)
        seq.steps[0].nums = np.array([1.0, 2.0])
        batch = tf.prepare_batch([seq], fitted2, cfg)
        with pytest.raises(SchemaMismatch):
            tf.project_inputs(batch, weights)


class TestScaledDotAttention:
    def test_single_key_returns_v(self):
        q = Tensor(np.array([[[1.0, 2.0]]]), dtype="f64")
        k = Tensor(np.array([[[0.3, -0.4]]]), dtype="f64")
        v = Tensor(np.array([[[5.0, 6.0]]]), dtype="f64")
        out = tf.scaled_dot_attention(q, k, v)
        np.testing.assert_allclose(out.data, v.data)

    def test_zero_scores_average_values(self):
        q = Tensor(np.zeros((1, 1, 2)), dtype="f64")
        k = Tensor(np.zeros((1, 3, 2)), dtype="f64")
        v = Tensor(np.arange(6.0).reshape(1, 3, 2), dtype="f64")
        out = tf.scaled_dot_attention(q, k, v)
        np.testing.assert_allclose(out.data[0, 0], v.data[0].mean(axis=0))

    def test_two_key_fixture(self):
        q = Tensor(np.array([[[1.0, 0.0]]]), dtype="f64")
        k = Tensor(np.array([[[1.0, 0.0], [0.0, 1.0]]]), dtype="f64")
        v = Tensor(np.array([[[1.0, 0.0], [0.0, 1.0]]]), dtype="f64")
        out = tf.scaled_dot_attention(q, k, v)
        np.testing.assert_allclose(out.data[0, 0], [0.66976155, 0.33023845], atol=1e-6)

    def test_fully_masked_row_raises(self):
        q = Tensor(np.zeros((1, 2, 2)), dtype="f64")
        k = Tensor(np.zeros((1, 2, 2)), dtype="f64")
        v = Tensor(np.zeros((1, 2, 2)), dtype="f64")
        mask = np.full((1, 2, 2), tf.NEG_INF)
        with pytest.raises(NumericError):
            tf.scaled_dot_attention(q, k, v, mask)

    def test_attention_rows_sum_to_one(self):
        rng = np.random.default_rng(3)
        scores = ad.softmax(Tensor(rng.normal(size=(4, 5, 5)), dtype="f64"), axis=-1)
        assert (scores.data >= 0).all()
        np.testing.assert_allclose(scores.data.sum(axis=-1), 1.0, atol=1e-6)


class TestMultiHead:
    def test_single_head_equals_plain_attention_plus_wo(self):
        fitted = tiny_fitted()
        cfg, weights = small_weights(fitted, heads=1)
        rng = np.random.default_rng(4)
        h = Tensor(rng.normal(size=(2, cfg.t, cfg.hidden)), dtype="f64")
        layer = {k: weights[f"enc0/attn/{k}"] for k in ("wq", "wk", "wv", "wo")}
        out = tf.multi_head(h, h, None, layer, heads=1)
        direct = ad.matmul(
            tf.scaled_dot_attention(ad.matmul(h, layer["wq"]), ad.matmul(h, layer["wk"]),
                                    ad.matmul(h, layer["wv"])),
            layer["wo"])
        np.testing.assert_allclose(out.data, direct.data, atol=1e-12)

    def test_shape_preserved(self):
        fitted = tiny_fitted()
        cfg, weights = small_weights(fitted, heads=4)
        rng = np.random.default_rng(5)
        h = Tensor(rng.normal(size=(3, cfg.t, cfg.hidden)), dtype="f64")
        layer = {k: weights[f"enc0/attn/{k}"] for k in ("wq", "wk", "wv", "wo")}
        assert tf.multi_head(h, h, None, layer, heads=4).shape == h.shape

    def test_default_head_width(self):
        cfg = tf.ModelConfig()
        assert cfg.hidden == 16 and cfg.heads == 8 and cfg.d_k == 2


class TestEncoder:
    def test_zero_layers_is_projection(self):
        fitted = tiny_fitted()
        cfg, weights = small_weights(fitted, layers=0)
        seqs = random_sequences(np.random.default_rng(6), 2, cfg.t, fitted)
        enc = tf.encoder_forward(seqs, weights)
        proj = tf.project_inputs(seqs, weights)
        np.testing.assert_allclose(enc.data, proj.data)

    def test_default_output_shape(self):
        fitted = tiny_fitted()
        cfg = tf.ModelConfig(precision="f64")
        weights = tf.build_weights(cfg, fitted, np.random.default_rng(0))
        seqs = random_sequences(np.random.default_rng(7), 4, 15, fitted)
        assert tf.encoder_forward(seqs, weights).shape == (4, 15, 16)

    def test_inference_is_deterministic(self):
        fitted = tiny_fitted()
        cfg, weights = small_weights(fitted, dropout=0.5)
        seqs = random_sequences(np.random.default_rng(8), 2, cfg.t, fitted)
        a = tf.encoder_forward(seqs, weights, train=False)
        b = tf.encoder_forward(seqs, weights, train=False)
        assert (a.data == b.data).all()

    def test_dropout_changes_training_output(self):
        fitted = tiny_fitted()
        cfg, weights = small_weights(fitted, dropout=0.5)
        seqs = random_sequences(np.random.default_rng(9), 2, cfg.t, fitted)
        rng = np.random.default_rng(0)
        a = tf.encoder_forward(seqs, weights, train=True, rng=rng)
        b = tf.encoder_forward(seqs, weights, train=True, rng=rng)
        assert not (a.data == b.data).all()


class TestDecoderCausality:
    def test_causal_mask_lower_triangular(self):
        real = np.ones((1, 3), dtype=bool)
        mask = tf.causal_mask(real)
        allow = mask[0] == 0.0
        np.testing.assert_array_equal(allow, np.tril(np.ones((3, 3), dtype=bool)))

    def test_perturbing_later_position_leaves_earlier_outputs(self):
        fitted = tiny_fitted()
        cfg, weights = small_weights(fitted)
        rng = np.random.default_rng(10)
        seqs = [make_sequence("a", rng.normal(size=cfg.t), rng.integers(1, 4, size=cfg.t), cfg.t)]
        batch = tf.prepare_batch(seqs, fitted, cfg)
        enc = tf.encoder_forward(batch, weights)
        base = tf.decoder_forward(batch, enc, weights).data.copy()

        perturbed = tf.prepare_batch(seqs, fitted, cfg)
        perturbed.nums = perturbed.nums.copy()
        perturbed.nums[0, 2, 0] += 1.0  # slot index 2 = position 3
        out = tf.decoder_forward(perturbed, enc, weights).data
        np.testing.assert_array_equal(out[0, :2], base[0, :2])
        assert np.abs(out[0, 2:] - base[0, 2:]).max() > 0

    def test_full_perturbation_sweep(self):
        fitted = tiny_fitted()
        cfg, weights = small_weights(fitted, t=5)
        rng = np.random.default_rng(11)
        seqs = [make_sequence("a", rng.normal(size=cfg.t), rng.integers(1, 4, size=cfg.t), cfg.t)]
        batch = tf.prepare_batch(seqs, fitted, cfg)
        enc = tf.encoder_forward(batch, weights)
        base = tf.decoder_forward(batch, enc, weights).data.copy()
        for j in range(cfg.t):
            pert = tf.prepare_batch(seqs, fitted, cfg)
            pert.nums = pert.nums.copy()
            pert.nums[0, j, 0] += 0.7
            out = tf.decoder_forward(pert, enc, weights).data
            np.testing.assert_array_equal(out[0, :j], base[0, :j])
            assert np.abs(out[0, j] - base[0, j]).max() > 0


class TestReconstructionHeads:
    def test_output_arity(self):
        fitted = tiny_fitted(n_num=2, vocab_sizes=(5,))
        cfg, weights = small_weights(fitted)
        seqs = [make_sequence("a", [0.1, 0.2], [1, 2], cfg.t)]
        # sequences here carry 1 numeric value; rebuild with two columns
        seqs[0].steps[0].nums = np.array([0.1, 0.3])
        seqs[0].steps[1].nums = np.array([0.2, 0.4])
        batch = tf.prepare_batch(seqs, fitted, cfg)
        dec = tf.decoder_forward(batch, tf.encoder_forward(batch, weights), weights)
        preds = tf.reconstruction_heads(dec, weights)
        assert preds["x0"].shape == (1, cfg.t, 1)
        assert preds["x1"].shape == (1, cfg.t, 1)
        assert preds["c0"].shape == (1, cfg.t, 6)

    def test_logits_finite(self):
        fitted = tiny_fitted()
        cfg, weights = small_weights(fitted)
        seqs = random_sequences(np.random.default_rng(12), 3, cfg.t, fitted)
        batch = tf.prepare_batch(seqs, fitted, cfg)
        dec = tf.decoder_forward(batch, tf.encoder_forward(batch, weights), weights)
        for pred in tf.reconstruction_heads(dec, weights).values():
            assert np.isfinite(pred.data).all()


class TestEmbed:
    def test_vector_length_is_emb_out(self):
        fitted = tiny_fitted()
        cfg, weights = small_weights(fitted, emb_out=16)
        seqs = random_sequences(np.random.default_rng(13), 2, cfg.t, fitted)
        recs = tf.embed(seqs, weights)
        assert all(len(r.vector) == 16 for r in recs)

    def test_identical_sequences_identical_vectors(self):
        fitted = tiny_fitted()
        cfg, weights = small_weights(fitted)
        seq_a = make_sequence("a", [0.3, -0.2], [1, 2], cfg.t)
        seq_b = make_sequence("b", [0.3, -0.2], [1, 2], cfg.t)
        ra, rb = tf.embed([seq_a, seq_b], weights)
        np.testing.assert_array_equal(ra.vector, rb.vector)

    def test_batch_permutation_no_leakage(self):
        fitted = tiny_fitted()
        cfg, weights = small_weights(fitted)
        seqs = random_sequences(np.random.default_rng(14), 5, cfg.t, fitted)
        recs = {r.entity: r.vector for r in tf.embed(seqs, weights)}
        recs_perm = {r.entity: r.vector for r in tf.embed(seqs[::-1], weights)}
        solo = {s.entity: tf.embed([s], weights)[0].vector for s in seqs}
        for entity in recs:
            np.testing.assert_allclose(recs[entity], recs_perm[entity], atol=1e-12)
            np.testing.assert_allclose(recs[entity], solo[entity], atol=1e-12)

    def test_pad_invariance(self):
        fitted = tiny_fitted()
        cfg, weights = small_weights(fitted, t=10)
        values, codes = [0.5, -1.0, 0.25], [1, 2, 3]
        short = make_sequence("a", values, codes, 10)
        short.pad_len = 5  # claims fewer pads than the layout implies
        padded = make_sequence("a", values, codes, 10)
        ra = tf.embed([short], weights)[0].vector
        rb = tf.embed([padded], weights)[0].vector
        np.testing.assert_allclose(ra, rb, atol=1e-6)

    def test_all_pad_pools_to_zero(self):
        fitted = tiny_fitted()
        cfg, weights = small_weights(fitted)
        seq = EntitySequence("a", [], pad_len=cfg.t, statics=np.array([]))
        vec = tf.embed([seq], weights)[0].vector
        # pooled part is zero, so the vector equals the head applied to zeros
        zeros = np.zeros((1, cfg.hidden))
        h1 = np.maximum(zeros @ weights["emb_head/w1"].data + weights["emb_head/b1"].data, 0)
        expected = h1 @ weights["emb_head/w2"].data + weights["emb_head/b2"].data
        np.testing.assert_allclose(vec, expected[0], atol=1e-12)

    def test_statics_concatenated(self):
        fitted = tiny_fitted(statics=2)
        cfg, weights = small_weights(fitted)
        seq1 = make_sequence("a", [0.1], [1], cfg.t, statics=(1.0, -1.0))
        seq2 = make_sequence("b", [0.1], [1], cfg.t, statics=(0.0, 0.0))
        r1, r2 = tf.embed([seq1, seq2], weights)
        assert np.abs(r1.vector - r2.vector).max() > 0
