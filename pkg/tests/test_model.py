import numpy as np
import pytest

from pockformer.model import (Model, ModelConfig, ModelError, backward,
                              forward, fuse_embeddings, generate_coordinates,
                              generate_coordinate_batch, generate_tokens,
                              init_model, load_checkpoint, log_likelihood,
                              param_count, sample_token_batch,
                              save_checkpoint)
from pockformer.seqcodec import ParallelSequence


def tiny_config(vocab_size, **kw):
    args = dict(n_layers=2, n_heads=2, d_model=32, max_len=256, vocab_size=vocab_size)
    args.update(kw)
    return ModelConfig(**args)


def random_inputs(rng, cfg, batch=2, length=12):
    tokens = rng.integers(0, cfg.vocab_size, size=(batch, length))
    numbers = rng.normal(size=(batch, length))
    return tokens, numbers


class TestInit:
    def test_deterministic(self):
        cfg = tiny_config(20)
        a, b = init_model(cfg, seed=7), init_model(cfg, seed=7)
        for k in a.params:
            assert a.params[k].tobytes() == b.params[k].tobytes()

    def test_param_count_closed_form(self):
        cfg = tiny_config(20)
        d, v, L, T = cfg.d_model, cfg.vocab_size, cfg.n_layers, cfg.max_len
        per_layer = (2 * d) + (d * 3 * d + 3 * d) + (d * d + d) + (2 * d) \
            + (d * 4 * d + 4 * d) + (4 * d * d + d)
        expected = v * d + T * d + L * per_layer + 2 * d + (d * v + v) + (d + 1)
        assert param_count(init_model(cfg, 0)) == expected

    def test_head_divisibility(self):
        with pytest.raises(ModelError):
            ModelConfig(n_layers=2, n_heads=4, d_model=30, max_len=64, vocab_size=10)


class TestForward:
    def test_fusion_identity(self):
        cfg = tiny_config(17)
        for seed in range(20):
            rng = np.random.default_rng(seed)
            m = init_model(cfg, seed)
            tokens, _ = random_inputs(rng, cfg)
            ones = np.ones(tokens.shape)
            fused = forward(m, tokens, ones)
            token_only = forward(m, tokens, None)
            assert np.array_equal(fused.logits, token_only.logits)
            assert np.array_equal(fused.numbers, token_only.numbers)

    def test_number_doubling_doubles_fusion(self):
        cfg = tiny_config(11)
        rng = np.random.default_rng(0)
        m = init_model(cfg, 0)
        tokens, numbers = random_inputs(rng, cfg)
        assert np.array_equal(fuse_embeddings(m, tokens, 2 * numbers),
                              2 * fuse_embeddings(m, tokens, numbers))

    def test_causality_bit_exact(self):
        cfg = tiny_config(13)
        for seed in range(20):
            rng = np.random.default_rng(100 + seed)
            m = init_model(cfg, seed)
            tokens, numbers = random_inputs(rng, cfg, batch=1, length=16)
            j = int(rng.integers(1, 16))
            tokens2 = tokens.copy()
            tokens2[0, j] = (tokens2[0, j] + 1) % cfg.vocab_size
            numbers2 = numbers.copy()
            numbers2[0, j] += 1.0
            a = forward(m, tokens, numbers)
            b = forward(m, tokens2, numbers2)
            assert np.array_equal(a.logits[0, :j], b.logits[0, :j])
            assert np.array_equal(a.numbers[0, :j], b.numbers[0, :j])

    def test_softmax_rows_sum_to_one(self):
        cfg = tiny_config(19)
        rng = np.random.default_rng(1)
        m = init_model(cfg, 1)
        tokens, numbers = random_inputs(rng, cfg)
        out = forward(m, tokens, numbers)
        e = np.exp(out.logits - out.logits.max(axis=-1, keepdims=True))
        sums = e.sum(axis=-1) / e.sum(axis=-1)  # normalized softmax rows
        probs = e / e.sum(axis=-1, keepdims=True)
        assert np.abs(probs.sum(axis=-1) - 1.0).max() < 1e-6

    def test_length_overflow(self):
        cfg = tiny_config(7, max_len=8)
        m = init_model(cfg, 0)
        with pytest.raises(ModelError):
            forward(m, np.zeros((1, 9), dtype=int), np.ones((1, 9)))

    def test_unknown_id(self):
        cfg = tiny_config(7)
        m = init_model(cfg, 0)
        with pytest.raises(ModelError):
            forward(m, np.array([[0, 99]]), np.ones((1, 2)))

    def test_zero_output_grads_give_zero_param_grads(self):
        cfg = tiny_config(9)
        rng = np.random.default_rng(2)
        m = init_model(cfg, 2)
        tokens, numbers = random_inputs(rng, cfg)
        out, cache = forward(m, tokens, numbers, want_cache=True)
        grads = backward(m, cache, np.zeros_like(out.logits), np.zeros_like(out.numbers))
        assert all(np.all(g == 0.0) for g in grads.values())


class TestLogLikelihood:
    def test_uniform_model(self):
        cfg = tiny_config(23)
        m = init_model(cfg, 0)
        m.params["tok_head.w"][:] = 0.0
        m.params["tok_head.b"][:] = 0.0
        tokens = np.arange(10) % cfg.vocab_size
        ll = log_likelihood(m, tokens, np.ones(10), (2, 8))
        assert ll == pytest.approx(6 * np.log(1.0 / 23), abs=1e-9)

    def test_confident_model_near_zero(self):
        cfg = tiny_config(9)
        m = init_model(cfg, 0)
        m.params["tok_head.w"][:] = 0.0
        m.params["tok_head.b"][:] = 0.0
        m.params["tok_head.b"][3] = 1000.0
        tokens = np.full(8, 3)
        ll = log_likelihood(m, tokens, np.ones(8), (1, 8))
        assert abs(ll) < 1e-6

    def test_additivity(self):
        cfg = tiny_config(15)
        rng = np.random.default_rng(3)
        m = init_model(cfg, 3)
        tokens = rng.integers(0, 15, size=14)
        numbers = np.ones(14)
        whole = log_likelihood(m, tokens, numbers, (1, 14))
        parts = sum(log_likelihood(m, tokens, numbers, (t, t + 1)) for t in range(1, 14))
        assert whole == pytest.approx(parts, abs=1e-9)

    def test_span_start_zero_rejected(self):
        cfg = tiny_config(5)
        m = init_model(cfg, 0)
        with pytest.raises(ModelError):
            log_likelihood(m, np.zeros(4, dtype=int), np.ones(4), (0, 3))


def toy_vocab():
    from pockformer.seqcodec import build_vocabulary
    from pockformer.chem import ComplexRecord

    rec = ComplexRecord(["C", "N", "O"], np.zeros((3, 3)), "CNO", np.zeros((3, 3)))
    return build_vocabulary([rec])


class TestGeneration:
    def setup_method(self):
        self.vocab = toy_vocab()
        self.cfg = tiny_config(self.vocab.size, max_len=128)
        self.prefix = ParallelSequence(
            ["[PS]", "C", "[PE]", "[PCS]", "[x]", "[y]", "[z]", "[PCE]", "[LS]"],
            np.array([1, 1, 1, 1, 0.1, -0.2, 0.3, 1, 1.0]),
        )

    def test_appended_numbers_are_one(self):
        m = init_model(self.cfg, 0)
        seq, _ = generate_tokens(m, self.vocab, self.prefix, "[LE]", 8, rng=0)
        assert np.all(seq.numbers[len(self.prefix):] == 1.0)

    def test_seeded_determinism(self):
        m = init_model(self.cfg, 1)
        a, ca = generate_tokens(m, self.vocab, self.prefix, "[LE]", 8, rng=42)
        b, cb = generate_tokens(m, self.vocab, self.prefix, "[LE]", 8, rng=42)
        assert a.tokens == b.tokens and ca == cb

    def test_temperature_zero_is_argmax(self):
        m = init_model(self.cfg, 2)
        a, _ = generate_tokens(m, self.vocab, self.prefix, "[LE]", 5, temperature=0.0, rng=0)
        b, _ = generate_tokens(m, self.vocab, self.prefix, "[LE]", 5, temperature=0.0, rng=99)
        assert a.tokens == b.tokens

    def test_stop_token_terminates(self):
        m = init_model(self.cfg, 3)
        m.params["tok_head.w"][:] = 0.0
        m.params["tok_head.b"][:] = 0.0
        m.params["tok_head.b"][self.vocab.index["[LE]"]] = 1000.0
        seq, completed = generate_tokens(m, self.vocab, self.prefix, "[LE]", 5, rng=0)
        assert completed and seq.tokens[-1] == "[LE]"

    def test_budget_exhaustion_flagged(self):
        m = init_model(self.cfg, 3)
        m.params["tok_head.w"][:] = 0.0
        m.params["tok_head.b"][:] = 0.0
        m.params["tok_head.b"][self.vocab.index["C"]] = 1000.0  # never stops
        seq, completed = generate_tokens(m, self.vocab, self.prefix, "[LE]", 4, rng=0)
        assert not completed and len(seq) == len(self.prefix) + 4

    def test_batch_matches_single(self):
        m = init_model(self.cfg, 4)
        single, done = generate_tokens(m, self.vocab, self.prefix, "[LE]", 6,
                                       temperature=0.0, rng=0)
        batch = sample_token_batch(m, self.vocab, self.prefix, 3, "[LE]", 6,
                                   temperature=0.0, rng=0)
        for sampled, completed in batch:
            assert self.prefix.tokens + sampled == single.tokens
            assert completed == done

    def test_numerical_mode_pattern(self):
        m = init_model(self.cfg, 5)
        lig = self.prefix + ParallelSequence(["C", "N", "[LE]"], np.ones(3))
        seq = generate_coordinates(m, self.vocab, lig, 2)
        tail = seq.tokens[len(lig):]
        assert tail == ["[LCS]", "[x]", "[y]", "[z]", "[x]", "[y]", "[z]", "[LCE]"]
        assert set(tail) <= {"[LCS]", "[x]", "[y]", "[z]", "[LCE]"}
        assert np.all(np.isfinite(seq.numbers))
        assert seq.numbers[len(lig)] == 1.0 and seq.numbers[-1] == 1.0

    def test_numerical_mode_deterministic(self):
        m = init_model(self.cfg, 6)
        lig = self.prefix + ParallelSequence(["C", "[LE]"], np.ones(2))
        a = generate_coordinates(m, self.vocab, lig, 1)
        b = generate_coordinates(m, self.vocab, lig, 1)
        assert np.array_equal(a.numbers, b.numbers)

    def test_numerical_mode_21_atoms_finite(self, reference):
        fix, _ = reference
        from pockformer.seqcodec import build_vocabulary, tokenize_smiles

        _, rec = reference
        vocab = build_vocabulary([rec])
        cfg = tiny_config(vocab.size, max_len=1024)
        m = init_model(cfg, 7)
        ts = tokenize_smiles(fix["ligand_smiles"])
        prefix = ParallelSequence(["[LS]"] + ts.tokens + ["[LE]"], np.ones(42))
        # ligand-span-only prefix is enough for shape/finiteness
        seq = generate_coordinates(m, vocab, prefix, ts.atom_count)
        marks = seq.segments()
        s, e = marks.ligand_coords
        assert e - s == 63
        assert np.all(np.isfinite(seq.numbers[s:e]))

    def test_batched_coordinates_match_sequential(self):
        m = init_model(self.cfg, 8)
        lig1 = self.prefix + ParallelSequence(["C", "N", "[LE]"], np.ones(3))
        lig2 = self.prefix + ParallelSequence(["O", "[LE]"], np.ones(2))
        batch = generate_coordinate_batch(m, self.vocab, [lig1, lig2], [2, 1])
        for lig, n, got in zip((lig1, lig2), (2, 1), batch):
            seq = generate_coordinates(m, self.vocab, lig, n)
            s, e = seq.segments().ligand_coords
            assert np.abs(got - seq.numbers[s:e].reshape(-1, 3)).max() < 1e-9

    def test_atom_count_positive(self):
        m = init_model(self.cfg, 9)
        lig = self.prefix + ParallelSequence(["C", "[LE]"], np.ones(2))
        with pytest.raises(ModelError):
            generate_coordinates(m, self.vocab, lig, 0)

    def test_prefix_must_end_with_le(self):
        m = init_model(self.cfg, 9)
        with pytest.raises(ModelError):
            generate_coordinates(m, self.vocab, self.prefix, 1)


class TestCheckpoint:
    def test_roundtrip_and_hash_check(self, tmp_path):
        cfg = tiny_config(12)
        m = init_model(cfg, 11)
        path = tmp_path / "ck.npz"
        save_checkpoint(path, m, vocab_hash="abc123", extra={"step": 5})
        loaded, meta, opt = load_checkpoint(path)
        assert meta["extra"]["step"] == 5 and opt is None
        for k in m.params:
            assert np.array_equal(loaded.params[k], m.params[k])
        with pytest.raises(ModelError):
            load_checkpoint(path, expect_vocab_hash="different")

    def test_optimizer_state_roundtrip(self, tmp_path):
        from pockformer.train import init_adam

        cfg = tiny_config(12)
        m = init_model(cfg, 11)
        state = init_adam(m.params)
        state.t = 3
        state.m["wte"][:] = 1.5
        path = tmp_path / "ck.npz"
        save_checkpoint(path, m, "h", opt_state=state)
        _, _, loaded = load_checkpoint(path)
        assert loaded.t == 3
        assert np.all(loaded.m["wte"] == 1.5)
