"""Tag-embedding fine-tuning (OCAT) and baseline fine-tuners.

The OCAT procedure follows the generic scheme: rank training-corpus tags by
decoding a dev set with each tag, build a small high-quality fine-tune set
(top corpora and/or the validation set), then train with every coordinate
frozen except the target tag's embedding row. Baseline fine-tuners cover
full-weight updates, bottleneck adapters, and low-rank attention deltas.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from catlab.corpus import CorpusRecord, TagRegistry, inject_tag, untagged_example
from catlab.decode import DecodeConfig, decode_corpus
from catlab.metrics import ChrFConfig, chrf_corpus
from catlab.model import (
    AdapterConfig,
    LoraConfig,
    ModelConfig,
    attach_adapters,
    attach_lora,
)
from catlab.subword import BpeTokenizer
from catlab.trainer import FreezeMask, TrainResult, token_batches, train_loop

__all__ = [
    "AdapterConfig",
    "LoraConfig",
    "OcatPlan",
    "rank_tags",
    "sort_ranked",
    "build_ocat_dataset",
    "ocat_finetune",
    "full_finetune",
    "adapter_finetune",
    "lora_finetune",
]


@dataclass(frozen=True)
class OcatPlan:
    """What to fine-tune: the target tag row, its init, data, and budget."""

    target_tag: str
    finetune_data: tuple
    steps: int = 500
    lr: float = 1e-3
    init_from: str = "random"  # existing tag string, or "random"
    seed: int = 0
    batch_tokens: int = 4000

    def __post_init__(self):
        if not self.finetune_data:
            raise ValueError("finetune_data must be non-empty")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")


def sort_ranked(scores: list) -> list:
    """Stable descending sort of (tag, score) pairs; ties keep input order."""
    return sorted(scores, key=lambda ts: -ts[1])


def rank_tags(
    params: dict,
    config: ModelConfig,
    registry: TagRegistry,
    dev_set: list,
    decode_config: DecodeConfig,
    tokenizer: BpeTokenizer,
    metric: ChrFConfig | None = None,
) -> list:
    """Decode the dev set once per training-corpus tag and sort by chrF."""
    metric = metric or ChrFConfig()
    sources = [r.source for r in dev_set]
    refs = [r.target for r in dev_set]
    scores = []
    for tag in registry.corpus_tags():
        dconfig = dataclasses.replace(decode_config, inference_tag=tag)
        hyps = decode_corpus(params, config, sources, dconfig, tokenizer)
        scores.append((tag, chrf_corpus(hyps, refs, metric)))
    return sort_ranked(scores)


def build_ocat_dataset(
    ranked: list,
    training_corpora: dict,
    validation_set: list,
    take_top: int = 0,
    include_validation: bool = True,
) -> list:
    """Concatenate the take_top best-ranked corpora and (optionally) the
    validation set. Records keep their provenance fields."""
    if take_top > len(ranked):
        raise ValueError(f"take_top {take_top} exceeds ranked list ({len(ranked)})")
    data: list = []
    for tag, _ in ranked[:take_top]:
        data.extend(training_corpora[tag])
    if include_validation:
        data.extend(validation_set)
    return data


def ocat_finetune(
    params: dict,
    config: ModelConfig,
    plan: OcatPlan,
    registry: TagRegistry,
    tokenizer: BpeTokenizer,
) -> TrainResult:
    """Fine-tune exactly one embedding row: the target tag's.

    All fine-tune examples are re-tagged with the target tag. When init_from
    names an existing tag, that tag's row warm-starts the target row before
    training. With steps=0 the parameters come back entirely unchanged.
    """
    tag_id = tokenizer.vocab.tag_id(plan.target_tag)
    if plan.steps == 0:
        return TrainResult(params={k: p.copy() for k, p in params.items()},
                           checkpoints=[])
    start = {k: p.copy() for k, p in params.items()}
    if plan.init_from != "random":
        src_id = tokenizer.vocab.tag_id(plan.init_from)
        start["embedding"][tag_id] = start["embedding"][src_id]
    examples = [
        inject_tag(dataclasses.replace(r, tag=plan.target_tag), registry, tokenizer)
        for r in plan.finetune_data
    ]
    mask = FreezeMask.embedding_row(tag_id, config.vocab_size)
    return train_loop(
        start,
        token_batches(examples, plan.batch_tokens, seed=plan.seed),
        config,
        plan.lr,
        steps=plan.steps,
        mask=mask,
        seed=plan.seed,
    )


def _encode_finetune_data(data, registry, tokenizer, tag):
    if tag is None:
        return [untagged_example(r, tokenizer) for r in data]
    return [
        inject_tag(dataclasses.replace(r, tag=tag), registry, tokenizer)
        for r in data
    ]


def full_finetune(
    params: dict,
    config: ModelConfig,
    data: list,
    steps: int,
    lr: float,
    tokenizer: BpeTokenizer,
    registry: TagRegistry | None = None,
    tag: str | None = None,
    seed: int = 0,
    batch_tokens: int = 4000,
) -> TrainResult:
    """Fine-tune every coordinate (the overfitting-prone baseline)."""
    examples = _encode_finetune_data(data, registry, tokenizer, tag)
    return train_loop(
        params,
        token_batches(examples, batch_tokens, seed=seed),
        config,
        lr,
        steps=steps,
        mask=FreezeMask.all_trainable(),
        seed=seed,
    )


def adapter_finetune(
    params: dict,
    config: ModelConfig,
    adapter: AdapterConfig,
    data: list,
    steps: int,
    lr: float,
    tokenizer: BpeTokenizer,
    registry: TagRegistry | None = None,
    tag: str | None = None,
    seed: int = 0,
    batch_tokens: int = 4000,
):
    """Train only freshly attached bottleneck adapters; base stays frozen.

    Returns (TrainResult, extended ModelConfig). Because adapter
    up-projections start at zero, step 0 reproduces the base model exactly.
    """
    aug_params, aug_config = attach_adapters(params, config, adapter, seed=seed)
    mask = FreezeMask.only_tensors(
        [n for n in aug_params if ".adapter" in n]
    )
    examples = _encode_finetune_data(data, registry, tokenizer, tag)
    result = train_loop(
        aug_params,
        token_batches(examples, batch_tokens, seed=seed),
        aug_config,
        lr,
        steps=steps,
        mask=mask,
        seed=seed,
    )
    return result, aug_config


def lora_finetune(
    params: dict,
    config: ModelConfig,
    lora: LoraConfig,
    data: list,
    steps: int,
    lr: float,
    tokenizer: BpeTokenizer,
    registry: TagRegistry | None = None,
    tag: str | None = None,
    seed: int = 0,
    batch_tokens: int = 4000,
):
    """Train only low-rank deltas on attention query/value projections.

    Returns (TrainResult, extended ModelConfig). B factors start at zero, so
    the augmented model initially equals the base model; deltas can later be
    folded into the base weights with model.merge_lora.
    """
    aug_params, aug_config = attach_lora(params, config, lora, seed=seed)
    mask = FreezeMask.only_tensors([n for n in aug_params if ".lora_" in n])
    examples = _encode_finetune_data(data, registry, tokenizer, tag)
    result = train_loop(
        aug_params,
        token_batches(examples, batch_tokens, seed=seed),
        aug_config,
        lr,
        steps=steps,
        mask=mask,
        seed=seed,
    )
    return result, aug_config


def param_diff_support(before: dict, after: dict) -> list:
    """Names and coordinates where two parameter sets differ (for freeze
    verification): list of (name, index tuple array)."""
    diffs = []
    for name in sorted(before):
        changed = np.nonzero(before[name] != after[name])
        if changed[0].size:
            diffs.append((name, changed))
    return diffs
