"""Greedy and beam-search decoding with a source-side inference tag.

The inference tag is appended to the encoded source just before EOS, exactly
as during training. Generated output masks tag and special tokens (except
EOS) at every step when forbid_tags_in_output is set, so control tokens can
never leak into translations. Sentences decode independently; results keep
input order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from catlab.model import BOS, EOS, PAD, ModelConfig, decoder_logits, encode_source
from catlab.subword import UNK, BpeTokenizer


@dataclass(frozen=True)
class DecodeConfig:
    inference_tag: str | None = None  # None decodes without a tag (baseline)
    beam_size: int = 4
    max_len_ratio: float = 2.0
    length_penalty: float = 1.0
    forbid_tags_in_output: bool = True

    def __post_init__(self):
        if self.beam_size < 1:
            raise ValueError("beam_size must be >= 1")


@dataclass(frozen=True)
class Hypothesis:
    tokens: tuple        # generated ids, EOS included when reached
    logprob: float
    score: float         # logprob / len(tokens) ** length_penalty
    finish_step: int


def _forbidden_ids(vocab, forbid_tags: bool) -> list:
    ids = [PAD, BOS, UNK]
    if forbid_tags:
        ids.extend(sorted(vocab.tag_ids.values()))
    return ids


def _source_ids(tokenizer: BpeTokenizer, text: str, tag: str | None) -> list:
    ids = tokenizer.encode(text)
    if not ids:
        raise ValueError(f"empty source after encoding: {text!r}")
    if tag is not None:
        ids.append(tokenizer.vocab.tag_id(tag))
    ids.append(EOS)
    return ids


def _max_steps(src_len: int, config: ModelConfig, dconfig: DecodeConfig) -> int:
    return max(1, min(config.max_len - 1,
                      int(np.ceil(dconfig.max_len_ratio * src_len)) + 2))


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def greedy_decode_batch(params, config: ModelConfig, src: np.ndarray,
                        forbidden: list, max_steps) -> list:
    """Argmax rollout for a whole batch at once; returns id lists sans EOS.

    max_steps is an int (shared cap) or a per-sentence list, so a sentence's
    length budget does not depend on what it was batched with.
    """
    b = src.shape[0]
    caps = [max_steps] * b if isinstance(max_steps, int) else list(max_steps)
    memory, enc_mask = encode_source(params, config, src)
    tgt_in = np.full((b, 1), BOS, dtype=np.int32)
    alive = np.ones(b, dtype=bool)
    outputs: list = [[] for _ in range(b)]
    for step in range(max(caps)):
        logits = decoder_logits(params, config, memory, enc_mask, tgt_in)
        last = logits[:, -1, :].copy()
        last[:, forbidden] = -np.inf
        nxt = last.argmax(axis=-1).astype(np.int32)
        for i in range(b):
            if not alive[i]:
                nxt[i] = PAD
            elif nxt[i] == EOS or step >= caps[i]:
                alive[i] = False
                nxt[i] = PAD if nxt[i] != EOS else nxt[i]
            else:
                outputs[i].append(int(nxt[i]))
        if not alive.any():
            break
        tgt_in = np.concatenate([tgt_in, nxt[:, None]], axis=1)
    return outputs


def beam_search(params, config: ModelConfig, src_ids: list,
                dconfig: DecodeConfig, vocab) -> Hypothesis:
    """Beam search for one sentence.

    Hypotheses finish on EOS (or forced at the length cap); the winner
    maximizes logprob / len^length_penalty with ties broken by earlier finish
    then lexicographic token ids.
    """
    forbidden = _forbidden_ids(vocab, dconfig.forbid_tags_in_output)
    max_steps = _max_steps(len(src_ids), config, dconfig)
    src = np.asarray([src_ids], dtype=np.int32)
    memory, enc_mask = encode_source(params, config, src)
    k = dconfig.beam_size

    beams = [((), 0.0)]  # (generated tokens, logprob)
    finished: list[Hypothesis] = []
    width = k  # a selected EOS finishes a hypothesis and frees its slot

    def normalized(lp: float, length: int) -> float:
        return lp / max(1, length) ** dconfig.length_penalty

    for step in range(1, max_steps + 1):
        n = len(beams)
        tgt_in = np.full((n, step), BOS, dtype=np.int32)
        for i, (toks, _) in enumerate(beams):
            tgt_in[i, 1 : 1 + len(toks)] = toks
        mem = np.repeat(memory, n, axis=0)
        msk = np.repeat(enc_mask, n, axis=0)
        logits = decoder_logits(params, config, mem, msk, tgt_in)
        logp = _log_softmax(logits[:, -1, :])
        logp[:, forbidden] = -np.inf
        scores = np.array([lp for _, lp in beams])[:, None] + logp
        flat = scores.ravel()
        # Rank candidates by score desc; stable sort keeps (beam, token id)
        # order on ties, matching the greedy argmax tie-break at width 1.
        ranked = np.argsort(-flat, kind="stable")
        next_beams = []
        for cand in ranked:
            if len(next_beams) >= width:
                break
            lp = float(flat[cand])
            if not np.isfinite(lp):
                break
            b_idx, tok = divmod(int(cand), logp.shape[1])
            toks = beams[b_idx][0] + (tok,)
            if tok == EOS:
                finished.append(Hypothesis(
                    tokens=toks, logprob=lp,
                    score=normalized(lp, len(toks)), finish_step=step))
                width -= 1
            else:
                next_beams.append((toks, lp))
        beams = next_beams
        if not beams:
            break
    for toks, lp in beams:  # length cap reached without EOS
        finished.append(Hypothesis(tokens=toks, logprob=lp,
                                   score=normalized(lp, len(toks)),
                                   finish_step=max_steps + 1))
    finished.sort(key=lambda h: (-h.score, h.finish_step, h.tokens))
    return finished[0]


def decode_corpus(params, config: ModelConfig, sources: list,
                  dconfig: DecodeConfig, tokenizer: BpeTokenizer) -> list:
    """Translate a list of sentences; deterministic, input order preserved."""
    if not sources:
        return []
    vocab = tokenizer.vocab
    tag = dconfig.inference_tag
    if tag is not None:
        vocab.tag_id(tag)  # unknown tag fails before any work
    src_seqs = [_source_ids(tokenizer, s, tag) for s in sources]
    if dconfig.beam_size == 1:
        s_max = max(len(s) for s in src_seqs)
        src = np.full((len(src_seqs), s_max), PAD, dtype=np.int32)
        for i, s in enumerate(src_seqs):
            src[i, : len(s)] = s
        forbidden = _forbidden_ids(vocab, dconfig.forbid_tags_in_output)
        caps = [_max_steps(len(s), config, dconfig) for s in src_seqs]
        outputs = greedy_decode_batch(params, config, src, forbidden, caps)
        return [tokenizer.decode(ids) for ids in outputs]
    texts = []
    for ids in src_seqs:
        hyp = beam_search(params, config, ids, dconfig, vocab)
        texts.append(tokenizer.decode(list(hyp.tokens)))
    return texts
