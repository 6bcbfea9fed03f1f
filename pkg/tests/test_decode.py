import itertools

import numpy as np
import pytest

from catlab.decode import (
    DecodeConfig,
    Hypothesis,
    beam_search,
    decode_corpus,
    greedy_decode_batch,
    _forbidden_ids,
    _log_softmax,
    _max_steps,
)
from catlab.model import ModelConfig, decoder_logits, encode_source, init_params
from catlab.subword import BOS, EOS, PAD, UNK, BpeTokenizer, Vocabulary


def tiny_model(vocab_size=10, seed=0, max_len=24):
    cfg = ModelConfig(enc_layers=1, dec_layers=1, d_model=16, d_ffn=32,
                      n_heads=2, vocab_size=vocab_size, max_len=max_len,
                      seed=seed)
    return init_params(cfg), cfg


def make_vocab(n_units, tags=()):
    units = ["<pad>", "<bos>", "<eos>", "<unk>"] + list(tags)
    units += [f"u{i}" for i in range(n_units)]
    tag_ids = {t: 4 + i for i, t in enumerate(tags)}
    return Vocabulary(units=units, tag_ids=tag_ids)


def exhaustive_best(params, cfg, src_ids, dconfig, vocab):
    """Enumerate every hypothesis the beam could produce (content tokens from
    the allowed set, optional EOS termination, length cap) and rank by the
    same (score, finish_step, tokens) rule."""
    forbidden = set(_forbidden_ids(vocab, dconfig.forbid_tags_in_output))
    allowed = [i for i in range(cfg.vocab_size) if i not in forbidden and i != EOS]
    max_steps = _max_steps(len(src_ids), cfg, dconfig)
    src = np.asarray([src_ids], dtype=np.int32)
    memory, enc_mask = encode_source(params, cfg, src)

    def seq_logprob(tokens):
        tgt_in = np.array([[BOS] + list(tokens[:-1])], dtype=np.int32)
        logits = decoder_logits(params, cfg, memory, enc_mask, tgt_in)
        logp = _log_softmax(logits[0])
        return float(sum(logp[t, tok] for t, tok in enumerate(tokens)))

    candidates = []
    for content_len in range(0, max_steps):
        for content in itertools.product(allowed, repeat=content_len):
            toks = tuple(content) + (EOS,)
            lp = seq_logprob(toks)
            score = lp / len(toks) ** dconfig.length_penalty
            candidates.append(Hypothesis(tokens=toks, logprob=lp, score=score,
                                         finish_step=content_len + 1))
    for content in itertools.product(allowed, repeat=max_steps):
        lp = seq_logprob(tuple(content))
        score = lp / max_steps ** dconfig.length_penalty
        candidates.append(Hypothesis(tokens=tuple(content), logprob=lp,
                                     score=score, finish_step=max_steps + 1))
    candidates.sort(key=lambda h: (-h.score, h.finish_step, h.tokens))
    return candidates[0]


class TestBeamEqualsGreedy:
    def test_beam_one_equals_greedy_rollout(self):
        vocab = make_vocab(6)
        for seed in range(20):
            params, cfg = tiny_model(vocab_size=10, seed=seed)
            rng = np.random.default_rng(seed)
            src_ids = [int(t) for t in rng.integers(4, 10, size=4)] + [EOS]
            dconfig = DecodeConfig(beam_size=1, max_len_ratio=1.5)
            hyp = beam_search(params, cfg, src_ids, dconfig, vocab)
            forbidden = _forbidden_ids(vocab, True)
            greedy = greedy_decode_batch(
                params, cfg, np.asarray([src_ids], np.int32), forbidden,
                _max_steps(len(src_ids), cfg, dconfig))[0]
            beam_content = [t for t in hyp.tokens if t != EOS]
            assert beam_content == greedy

    def test_exhaustive_oracle_with_full_width_beam(self):
        # 3 allowed content tokens, short cap: a wide beam prunes nothing and
        # must agree with brute-force enumeration
        vocab = make_vocab(3)
        for seed in (0, 1, 2, 3):
            params, cfg = tiny_model(vocab_size=7, seed=seed)
            src_ids = [4, 5, EOS]
            dconfig = DecodeConfig(beam_size=256, max_len_ratio=1.0,
                                   length_penalty=1.0)
            assert _max_steps(len(src_ids), cfg, dconfig) == 5
            dconfig = DecodeConfig(beam_size=256, max_len_ratio=0.34,
                                   length_penalty=1.0)
            assert _max_steps(len(src_ids), cfg, dconfig) == 4
            best = exhaustive_best(params, cfg, src_ids, dconfig, vocab)
            hyp = beam_search(params, cfg, src_ids, dconfig, vocab)
            assert hyp.tokens == best.tokens
            # scores come from different summation orders in float32
            assert hyp.score == pytest.approx(best.score, abs=1e-5)

    def test_wider_beam_never_lowers_raw_score(self):
        vocab = make_vocab(5)
        dbase = dict(max_len_ratio=1.2, length_penalty=0.0)
        for seed in range(8):
            params, cfg = tiny_model(vocab_size=9, seed=100 + seed)
            src_ids = [4, 6, 8, EOS]
            prev = -np.inf
            for beam in (1, 2, 4, 8):
                hyp = beam_search(params, cfg, src_ids,
                                  DecodeConfig(beam_size=beam, **dbase), vocab)
                assert hyp.score >= prev - 1e-12
                prev = hyp.score


class TestDecodeContracts:
    def test_empty_source_list(self):
        vocab = make_vocab(4)
        params, cfg = tiny_model(vocab_size=8)
        tok = BpeTokenizer(vocab=vocab, merges=[])
        assert decode_corpus(params, cfg, [], DecodeConfig(), tok) == []

    def test_unknown_tag_fatal(self):
        vocab = make_vocab(4, tags=("<a>",))
        params, cfg = tiny_model(vocab_size=9)
        tok = BpeTokenizer(vocab=vocab, merges=[])
        with pytest.raises(KeyError):
            decode_corpus(params, cfg, ["u0"], DecodeConfig(inference_tag="<b>"),
                          tok)

    def test_no_specials_or_tags_in_hypotheses(self):
        vocab = make_vocab(5, tags=("<a>", "<b>"))
        for seed in range(10):
            params, cfg = tiny_model(vocab_size=11, seed=seed)
            hyp = beam_search(params, cfg, [7, 8, 5, EOS],
                              DecodeConfig(beam_size=4), vocab)
            body = hyp.tokens[:-1] if hyp.tokens and hyp.tokens[-1] == EOS \
                else hyp.tokens
            for t in body:
                assert t not in (PAD, BOS, UNK)
                assert not vocab.is_tag(t)

    def test_deterministic(self):
        vocab = make_vocab(5, tags=("<a>",))
        params, cfg = tiny_model(vocab_size=10, seed=4)
        tok = BpeTokenizer(vocab=vocab, merges=[])
        sources = ["u0 u1", "u2", "u3 u4 u0"]
        dconfig = DecodeConfig(inference_tag="<a>", beam_size=3)
        out1 = decode_corpus(params, cfg, sources, dconfig, tok)
        out2 = decode_corpus(params, cfg, sources, dconfig, tok)
        assert out1 == out2

    def test_results_in_input_order(self):
        # permuting the input list permutes the outputs identically
        vocab = make_vocab(5)
        params, cfg = tiny_model(vocab_size=9, seed=2)
        tok = BpeTokenizer(vocab=vocab, merges=[])
        sources = ["u0", "u1 u2 u3 u4 u0 u1", "u2 u3"]
        out = decode_corpus(params, cfg, sources, DecodeConfig(beam_size=1), tok)
        perm = [1, 2, 0]
        out_perm = decode_corpus(params, cfg, [sources[i] for i in perm],
                                 DecodeConfig(beam_size=1), tok)
        assert out_perm == [out[i] for i in perm]

    def test_per_sentence_length_caps(self):
        # a short sentence's generation budget is independent of batch mates
        vocab = make_vocab(5)
        params, cfg = tiny_model(vocab_size=9, seed=2)
        tok = BpeTokenizer(vocab=vocab, merges=[])
        dconfig = DecodeConfig(beam_size=1, max_len_ratio=1.0)
        short = "u0"
        alone = decode_corpus(params, cfg, [short], dconfig, tok)[0]
        batched = decode_corpus(params, cfg,
                                [short, "u1 u2 u3 u4 u0"],
                                dconfig, tok)[0]
        assert len(batched.split()) <= len(alone.split()) + 0  # same cap
        assert batched == alone

    def test_empty_source_fatal(self):
        vocab = make_vocab(4)
        params, cfg = tiny_model(vocab_size=8)
        tok = BpeTokenizer(vocab=vocab, merges=[])
        with pytest.raises(ValueError, match="empty source"):
            decode_corpus(params, cfg, ["   "], DecodeConfig(), tok)

    def test_beam_size_validation(self):
        with pytest.raises(ValueError):
            DecodeConfig(beam_size=0)
