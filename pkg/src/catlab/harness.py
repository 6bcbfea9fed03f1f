"""Experiment harness: synthetic corpora and end-to-end pipelines.

The synthetic "translation" task maps each source word through a fixed
bijection to a target word and reverses the sequence, so the model needs real
encoder-decoder attention rather than copying. Corpora differ only in noise:
clean, token-substitution noise, or misaligned (target column permuted),
standing in for parallel corpora of very different quality.

Every report embeds the experiment config hash, seeds, and the metric
signature; deterministic mode is simply the default since all randomness is
seeded.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from catlab import __version__
from catlab.corpus import (
    CorpusRecord,
    MixtureSpec,
    TagRegistry,
    build_mixture,
    inject_tag,
    mixture_manifest,
    untagged_example,
)
from catlab.decode import DecodeConfig, decode_corpus
from catlab.finetune import (
    OcatPlan,
    adapter_finetune,
    full_finetune,
    lora_finetune,
    ocat_finetune,
    rank_tags,
)
from catlab.metrics import ChrFConfig, Report, ScoredSystem, chrf_corpus, score_table
from catlab.model import (
    AdapterConfig,
    LoraConfig,
    ModelConfig,
    attach_adapters,
    attach_lora,
    init_params,
)
from catlab.subword import BpeTokenizer, train_subword
from catlab.trainer import (
    FreezeMask,
    NonFiniteLossError,
    OptimizerState,
    Schedule,
    average_checkpoints,
    token_batches,
    train_loop,
)

logger = logging.getLogger(__name__)

HQ_TAG = "<HQ>"


def _derive_seed(seed: int, label: str) -> int:
    digest = hashlib.sha256(f"{seed}|{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


# ------------------------------------------------------------ synthetic data


@dataclass(frozen=True)
class CorpusSpec:
    name: str
    size: int
    noise_kind: str = "none"  # none | substitution | misaligned
    noise_param: float = 0.0

    def __post_init__(self):
        if self.noise_kind not in ("none", "substitution", "misaligned"):
            raise ValueError(f"unknown noise_kind {self.noise_kind!r}")
        if self.noise_kind == "substitution" and not 0.0 <= self.noise_param <= 1.0:
            raise ValueError("substitution probability must be in [0, 1]")


@dataclass(frozen=True)
class SyntheticTaskSpec:
    """Desk-scale stand-in for a multi-corpus translation setup."""

    vocab_size: int = 160          # distinct words per language side
    seq_len: tuple = (4, 9)        # inclusive range of words per sentence
    mapping: str = "bijection_reverse"
    corpora: tuple = (
        CorpusSpec("clean", 4000),
        CorpusSpec("noisy", 4000, "substitution", 0.5),
        CorpusSpec("misaligned", 4000, "misaligned"),
    )
    dev_size: int = 512
    test_size: int = 256

    def __post_init__(self):
        if self.mapping != "bijection_reverse":
            raise ValueError("only the bijection_reverse mapping is implemented")
        if self.seq_len[0] < 1 or self.seq_len[1] < self.seq_len[0]:
            raise ValueError("invalid seq_len range")


def _make_words(rng, n: int, alphabet: str) -> list:
    words = []
    seen = set()
    while len(words) < n:
        length = int(rng.integers(4, 8))
        w = "".join(alphabet[i] for i in rng.integers(0, len(alphabet), size=length))
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


def _task_language(spec: SyntheticTaskSpec, seed: int):
    rng = np.random.default_rng(_derive_seed(seed, "language"))
    src_words = _make_words(rng, spec.vocab_size, "abcdefghijkl")
    tgt_words = _make_words(rng, spec.vocab_size, "mnopqrstuvwx")
    bijection = rng.permutation(spec.vocab_size)
    return src_words, tgt_words, bijection


def make_synthetic_corpora(spec: SyntheticTaskSpec, seed: int = 0) -> dict:
    """Generate all task corpora plus clean "dev" and "test" sets.

    Deterministic per (spec, seed): the language tables derive from the seed,
    each corpus gets its own derived sampling stream.
    """
    src_words, tgt_words, bijection = _task_language(spec, seed)
    all_specs = list(spec.corpora) + [
        CorpusSpec("dev", spec.dev_size),
        CorpusSpec("test", spec.test_size),
    ]
    lo, hi = spec.seq_len
    out: dict = {}
    for cs in all_specs:
        rng = np.random.default_rng(_derive_seed(seed, f"corpus|{cs.name}"))
        sources = []
        targets = []
        for _ in range(cs.size):
            idx = rng.integers(0, spec.vocab_size, size=int(rng.integers(lo, hi + 1)))
            sources.append(" ".join(src_words[i] for i in idx))
            mapped = [tgt_words[bijection[i]] for i in idx[::-1]]
            if cs.noise_kind == "substitution":
                mapped = [
                    tgt_words[rng.integers(0, spec.vocab_size)]
                    if rng.random() < cs.noise_param
                    else w
                    for w in mapped
                ]
            targets.append(" ".join(mapped))
        if cs.noise_kind == "misaligned":
            targets = [targets[i] for i in rng.permutation(cs.size)]
        out[cs.name] = [
            CorpusRecord(source=s, target=t, corpus_id=cs.name)
            for s, t in zip(sources, targets)
        ]
    return out


# --------------------------------------------------------- experiment config


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "synthetic-cat"
    seed: int = 0
    task: SyntheticTaskSpec = field(default_factory=SyntheticTaskSpec)
    subword_vocab: int = 384
    per_tag_cap: int = 10000
    max_len: int = 64
    dropout: float = 0.0
    pretrain_steps: int = 3000
    batch_tokens: int = 3000
    lr_max: float = 1e-3
    warmup_steps: int = 200
    checkpoint_every: int = 20
    average_last: int = 5
    ocat_steps: int = 500
    ocat_lr: float = 1e-3
    finetune_batch_tokens: int = 2500
    beam_size: int = 1
    length_penalty: float = 1.0
    chrf: ChrFConfig = field(default_factory=ChrFConfig)
    bootstrap_resamples: int = 300
    bootstrap_seed: int = 0
    baseline_ft_steps: int = 500
    baseline_ft_lr: float = 1e-3
    adapter_dim: int = 8
    lora_rank: int = 4
    sweep_lrs: tuple = (1e-4, 1e-3, 1e-2, 1e-1)
    sweep_steps: tuple = (50, 200, 800)
    sweep_sizes: tuple = (1, 10, 100, 400)

    def model_config(self) -> ModelConfig:
        return ModelConfig.toy(
            vocab_size=self.subword_vocab,
            max_len=self.max_len,
            dropout=self.dropout,
            seed=_derive_seed(self.seed, "model-init") % (2**31),
        )

    def decode_config(self, tag: str | None) -> DecodeConfig:
        return DecodeConfig(inference_tag=tag, beam_size=self.beam_size,
                            length_penalty=self.length_penalty)

    def schedule(self) -> Schedule:
        return Schedule(lr_max=self.lr_max, warmup_steps=self.warmup_steps)


def micro_config(seed: int = 0) -> ExperimentConfig:
    """Small/fast settings for determinism checks and smoke runs."""
    return ExperimentConfig(
        name="synthetic-cat-micro",
        seed=seed,
        task=SyntheticTaskSpec(
            vocab_size=60,
            corpora=(
                CorpusSpec("clean", 600),
                CorpusSpec("misaligned", 600, "misaligned"),
            ),
            dev_size=64,
            test_size=48,
        ),
        subword_vocab=224,
        pretrain_steps=200,
        batch_tokens=1500,
        warmup_steps=50,
        checkpoint_every=20,
        average_last=2,
        ocat_steps=50,
        bootstrap_resamples=100,
        sweep_lrs=(1e-3, 1e-2),
        sweep_steps=(20, 60),
        sweep_sizes=(1, 8),
    )


def experiment_hash(config: ExperimentConfig) -> str:
    blob = json.dumps(dataclasses.asdict(config), sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def config_to_json(config: ExperimentConfig) -> str:
    return json.dumps(dataclasses.asdict(config), indent=2, sort_keys=True)


def config_from_dict(d: dict) -> ExperimentConfig:
    d = dict(d)
    if "task" in d and isinstance(d["task"], dict):
        task = dict(d["task"])
        if "corpora" in task:
            task["corpora"] = tuple(CorpusSpec(**c) for c in task["corpora"])
        if "seq_len" in task:
            task["seq_len"] = tuple(task["seq_len"])
        d["task"] = SyntheticTaskSpec(**task)
    if "chrf" in d and isinstance(d["chrf"], dict):
        d["chrf"] = ChrFConfig(**d["chrf"])
    for key in ("sweep_lrs", "sweep_steps", "sweep_sizes"):
        if key in d:
            d[key] = tuple(d[key])
    return ExperimentConfig(**d)


# --------------------------------------------------------------- experiment


def tag_for_corpus(name: str) -> str:
    return f"<syn-{name}>"


def build_registry(config: ExperimentConfig) -> TagRegistry:
    registry = TagRegistry()
    for cs in config.task.corpora:
        registry.register(tag_for_corpus(cs.name), "synthetic", corpus_ids=(cs.name,))
    registry.register(HQ_TAG, "hq")
    return registry


@dataclass
class CatExperiment:
    """All artifacts of one end-to-end run, reused by sweeps and tests."""

    config: ExperimentConfig
    corpora: dict
    registry: TagRegistry
    tokenizer: BpeTokenizer
    model_config: ModelConfig
    cat_params: dict
    base_params: dict
    ranked: list                 # [(tag, dev chrF)] descending
    ocat_params: dict
    test_scores: dict            # system label -> chrF on the test set
    test_hyps: dict              # system label -> decoded test hypotheses
    report: Report
    manifest: dict

    @property
    def best_tag(self) -> str:
        return self.ranked[0][0]


def _train_and_average(config, examples, model_config, seed_label):
    res = train_loop(
        init_params(model_config),
        token_batches(examples, config.batch_tokens,
                      seed=_derive_seed(config.seed, f"batches|{seed_label}")),
        model_config,
        config.schedule(),
        steps=config.pretrain_steps,
        seed=_derive_seed(config.seed, f"train|{seed_label}"),
        checkpoint_every=config.checkpoint_every,
        checkpoint_keep=config.average_last,
    )
    if res.checkpoints:
        return average_checkpoints(res.checkpoints[-config.average_last :])
    return res.params


def run_cat_experiment(config: ExperimentConfig) -> CatExperiment:
    """Pretrain baseline and tag-injected models on the same mixture, rank the
    tags on dev, fine-tune the high-quality tag row, and score everything."""
    t0 = time.time()
    corpora = make_synthetic_corpora(config.task, config.seed)
    registry = build_registry(config)
    training_names = [cs.name for cs in config.task.corpora]

    text = []
    for name in training_names:
        for r in corpora[name]:
            text.append(r.source)
            text.append(r.target)
    tokenizer, vocab = train_subword(text, config.subword_vocab, registry.tags)
    logger.info("tokenizer trained: %d units", vocab.size)

    by_tag = {tag_for_corpus(n): corpora[n] for n in training_names}
    mixture = build_mixture(
        by_tag,
        MixtureSpec(per_tag_cap=config.per_tag_cap,
                    shuffle_seed=_derive_seed(config.seed, "mixture")),
        registry,
    )
    manifest = mixture_manifest(
        mixture, MixtureSpec(config.per_tag_cap,
                             _derive_seed(config.seed, "mixture")))
    tagged = [inject_tag(r, registry, tokenizer) for r in mixture]
    untagged = [untagged_example(r, tokenizer) for r in mixture]

    model_config = config.model_config()
    cat_params = _train_and_average(config, tagged, model_config, "cat")
    logger.info("CAT model trained (%.0fs)", time.time() - t0)
    base_params = _train_and_average(config, untagged, model_config, "base")
    logger.info("baseline model trained (%.0fs)", time.time() - t0)

    dev = corpora["dev"]
    ranked = rank_tags(cat_params, model_config, registry, dev,
                       config.decode_config(None), tokenizer, config.chrf)
    logger.info("tag ranking on dev: %s", ranked)

    plan = OcatPlan(
        target_tag=HQ_TAG,
        finetune_data=tuple(dev),
        steps=config.ocat_steps,
        lr=config.ocat_lr,
        init_from=ranked[0][0],
        seed=_derive_seed(config.seed, "ocat"),
        batch_tokens=config.finetune_batch_tokens,
    )
    ocat_params = ocat_finetune(cat_params, model_config, plan, registry,
                                tokenizer).params
    logger.info("OCAT fine-tune done (%.0fs)", time.time() - t0)

    test = corpora["test"]
    refs = {"test": [r.target for r in test], "dev": [r.target for r in dev]}
    systems = []
    labels = {}

    def add_system(model_name, tag, params):
        hyps = {}
        for split, records in (("test", test), ("dev", dev)):
            hyps[split] = decode_corpus(params, model_config,
                                        [r.source for r in records],
                                        config.decode_config(tag), tokenizer)
        systems.append(ScoredSystem(model=model_name, tag=tag, hyps=hyps))
        labels[(model_name, tag)] = len(systems) - 1

    add_system("baseline", None, base_params)
    for tag in registry.corpus_tags():
        add_system("cat", tag, cat_params)
    add_system("ocat", HQ_TAG, ocat_params)

    report = score_table(
        systems,
        refs,
        config.chrf,
        n_resamples=config.bootstrap_resamples,
        seed=config.bootstrap_seed,
        meta={
            "experiment": config.name,
            "config_hash": experiment_hash(config),
            "seed": config.seed,
            "tag_ranking": [[t, round(s, 4)] for t, s in ranked],
            "mixture_manifest": manifest,
            "version": __version__,
        },
    )
    test_scores = {}
    test_hyps = {}
    for system in systems:
        label = system.model if system.tag is None else f"{system.model}:{system.tag}"
        test_scores[label] = chrf_corpus(system.hyps["test"], refs["test"],
                                         config.chrf)
        test_hyps[label] = system.hyps["test"]
    logger.info("experiment complete in %.0fs: %s", time.time() - t0, test_scores)
    return CatExperiment(
        config=config,
        corpora=corpora,
        registry=registry,
        tokenizer=tokenizer,
        model_config=model_config,
        cat_params=cat_params,
        base_params=base_params,
        ranked=ranked,
        ocat_params=ocat_params,
        test_scores=test_scores,
        test_hyps=test_hyps,
        report=report,
        manifest=manifest,
    )


# -------------------------------------------------------------------- sweeps


def _eval_chrf(params, model_config, config, tag, records, tokenizer):
    hyps = decode_corpus(params, model_config, [r.source for r in records],
                         config.decode_config(tag), tokenizer)
    return chrf_corpus(hyps, [r.target for r in records], config.chrf)


def _finetune_snapshots(params, model_config, examples, lr, steps_list, mask,
                        seed, batch_tokens):
    """Train once to max(steps_list), capturing parameter snapshots at each
    grid step. Returns ({step: params or None}, diverged_at or None)."""
    steps_sorted = sorted(steps_list)
    batches = token_batches(examples, batch_tokens, seed=seed)
    state = OptimizerState.fresh(params)
    snaps: dict = {}
    current = params
    prev = 0
    diverged_at = None
    for target in steps_sorted:
        if diverged_at is not None:
            snaps[target] = None
            continue
        try:
            res = train_loop(current, batches, model_config, lr,
                             steps=target - prev, mask=mask, seed=seed,
                             state=state, log_every=10**9)
            current = res.params
            snaps[target] = current
            prev = target
        except NonFiniteLossError:
            diverged_at = target
            snaps[target] = None
    return snaps, diverged_at


def sweep_stability(config: ExperimentConfig, experiment: CatExperiment) -> Report:
    """Grid over fine-tune lr x steps for the tag-row method and the three
    baselines; records held-out and tune-set chrF per cell."""
    dev = experiment.corpora["dev"]
    test = experiment.corpora["test"]
    tokenizer = experiment.tokenizer
    registry = experiment.registry
    rows = []
    for method in ("ocat", "full", "adapter", "lora"):
        for lr in config.sweep_lrs:
            seed = _derive_seed(config.seed, f"sweep|{method}|{lr}")
            if method == "ocat":
                base_cfg = experiment.model_config
                start = {k: p.copy() for k, p in experiment.cat_params.items()}
                tag_id = tokenizer.vocab.tag_id(HQ_TAG)
                start["embedding"][tag_id] = start["embedding"][
                    tokenizer.vocab.tag_id(experiment.best_tag)
                ]
                mask = FreezeMask.embedding_row(tag_id, base_cfg.vocab_size)
                examples = [
                    inject_tag(dataclasses.replace(r, tag=HQ_TAG), registry, tokenizer)
                    for r in dev
                ]
                eval_tag = HQ_TAG
                ref_score = experiment.test_scores[f"cat:{experiment.best_tag}"]
            else:
                examples = [untagged_example(r, tokenizer) for r in dev]
                eval_tag = None
                ref_score = experiment.test_scores["baseline"]
                if method == "full":
                    base_cfg = experiment.model_config
                    start = experiment.base_params
                    mask = FreezeMask.all_trainable()
                elif method == "adapter":
                    start, base_cfg = attach_adapters(
                        experiment.base_params, experiment.model_config,
                        AdapterConfig(config.adapter_dim), seed=seed)
                    mask = FreezeMask.only_tensors(
                        [n for n in start if ".adapter" in n])
                else:
                    start, base_cfg = attach_lora(
                        experiment.base_params, experiment.model_config,
                        LoraConfig(config.lora_rank), seed=seed)
                    mask = FreezeMask.only_tensors(
                        [n for n in start if ".lora_" in n])
            trainable = mask.trainable_count(start)
            snaps, diverged_at = _finetune_snapshots(
                start, base_cfg, examples, lr, config.sweep_steps, mask, seed,
                config.finetune_batch_tokens)
            for steps in sorted(config.sweep_steps):
                params_s = snaps[steps]
                if params_s is None:
                    rows.append({"method": method, "lr": lr, "steps": steps,
                                 "heldout_chrf": 0.0, "tuneset_chrf": 0.0,
                                 "delta": -ref_score, "trainable": trainable,
                                 "diverged": True})
                    continue
                heldout = _eval_chrf(params_s, base_cfg, config, eval_tag, test,
                                     tokenizer)
                tuneset = _eval_chrf(params_s, base_cfg, config, eval_tag, dev,
                                     tokenizer)
                rows.append({"method": method, "lr": lr, "steps": steps,
                             "heldout_chrf": round(heldout, 4),
                             "tuneset_chrf": round(tuneset, 4),
                             "delta": round(heldout - ref_score, 4),
                             "trainable": trainable, "diverged": False})
            logger.info("sweep %s lr=%g done", method, lr)
    return Report(
        kind="stability_sweep",
        columns=["method", "lr", "steps", "heldout_chrf", "tuneset_chrf",
                 "delta", "trainable", "diverged"],
        rows=rows,
        meta={
            "experiment": config.name,
            "config_hash": experiment_hash(config),
            "seed": config.seed,
            "metric_signature": config.chrf.signature(),
            "lr_grid": list(config.sweep_lrs),
            "step_grid": list(config.sweep_steps),
            "reference_scores": {k: round(v, 4)
                                 for k, v in experiment.test_scores.items()},
        },
    )


def sweep_finetune_size(config: ExperimentConfig, experiment: CatExperiment,
                        sizes=None) -> Report:
    """Fine-tune the tag row on n dev sentences for each n; report held-out
    chrF and its delta against the best pretrained tag."""
    sizes = list(config.sweep_sizes if sizes is None else sizes)
    dev = experiment.corpora["dev"]
    test = experiment.corpora["test"]
    ref_score = experiment.test_scores[f"cat:{experiment.best_tag}"]
    order = np.random.default_rng(
        _derive_seed(config.seed, "size-sweep")).permutation(len(dev))
    rows = []
    for n in sizes:
        if n < 1 or n > len(dev):
            raise ValueError(f"fine-tune size {n} out of range [1, {len(dev)}]")
        subset = tuple(dev[i] for i in order[:n])
        plan = OcatPlan(
            target_tag=HQ_TAG,
            finetune_data=subset,
            steps=config.ocat_steps,
            lr=config.ocat_lr,
            init_from=experiment.best_tag,
            seed=_derive_seed(config.seed, f"size|{n}"),
            batch_tokens=config.finetune_batch_tokens,
        )
        tuned = ocat_finetune(experiment.cat_params, experiment.model_config,
                              plan, experiment.registry, experiment.tokenizer)
        heldout = _eval_chrf(tuned.params, experiment.model_config, config,
                             HQ_TAG, test, experiment.tokenizer)
        rows.append({"n": n, "heldout_chrf": round(heldout, 4),
                     "delta": round(heldout - ref_score, 4)})
        logger.info("size sweep n=%d: heldout %.2f (ref %.2f)", n, heldout,
                    ref_score)
    return Report(
        kind="finetune_size_sweep",
        columns=["n", "heldout_chrf", "delta"],
        rows=rows,
        meta={
            "experiment": config.name,
            "config_hash": experiment_hash(config),
            "seed": config.seed,
            "metric_signature": config.chrf.signature(),
            "reference_score": round(ref_score, 4),
            "reference_tag": experiment.best_tag,
        },
    )


def run_overfit_probe(config: ExperimentConfig, experiment: CatExperiment,
                      n_pairs: int = 16, full_steps: int = 800,
                      full_lr: float = 1e-3) -> Report:
    """Fine-tune on a tiny pair set two ways: tag-row only (from the tagged
    model) and full-weight (from the baseline model). Reports tune-set and
    held-out scores with deltas against each method's own pretrained score."""
    dev = experiment.corpora["dev"]
    test = experiment.corpora["test"]
    order = np.random.default_rng(
        _derive_seed(config.seed, "overfit-probe")).permutation(len(dev))
    subset = [dev[i] for i in order[:n_pairs]]
    rows = []

    plan = OcatPlan(
        target_tag=HQ_TAG,
        finetune_data=tuple(subset),
        steps=config.ocat_steps,
        lr=config.ocat_lr,
        init_from=experiment.best_tag,
        seed=_derive_seed(config.seed, "overfit-ocat"),
        batch_tokens=config.finetune_batch_tokens,
    )
    tuned = ocat_finetune(experiment.cat_params, experiment.model_config, plan,
                          experiment.registry, experiment.tokenizer)
    ocat_ref = experiment.test_scores[f"cat:{experiment.best_tag}"]
    heldout = _eval_chrf(tuned.params, experiment.model_config, config, HQ_TAG,
                         test, experiment.tokenizer)
    tuneset = _eval_chrf(tuned.params, experiment.model_config, config, HQ_TAG,
                         subset, experiment.tokenizer)
    rows.append({"method": "ocat", "n_pairs": n_pairs,
                 "tuneset_chrf": round(tuneset, 4),
                 "heldout_chrf": round(heldout, 4),
                 "heldout_delta": round(heldout - ocat_ref, 4)})

    full = full_finetune(experiment.base_params, experiment.model_config,
                         subset, full_steps, full_lr, experiment.tokenizer,
                         seed=_derive_seed(config.seed, "overfit-full"),
                         batch_tokens=config.finetune_batch_tokens)
    full_ref = experiment.test_scores["baseline"]
    heldout = _eval_chrf(full.params, experiment.model_config, config, None,
                         test, experiment.tokenizer)
    tuneset = _eval_chrf(full.params, experiment.model_config, config, None,
                         subset, experiment.tokenizer)
    rows.append({"method": "full", "n_pairs": n_pairs,
                 "tuneset_chrf": round(tuneset, 4),
                 "heldout_chrf": round(heldout, 4),
                 "heldout_delta": round(heldout - full_ref, 4)})
    return Report(
        kind="overfit_probe",
        columns=["method", "n_pairs", "tuneset_chrf", "heldout_chrf",
                 "heldout_delta"],
        rows=rows,
        meta={
            "experiment": config.name,
            "config_hash": experiment_hash(config),
            "seed": config.seed,
            "metric_signature": config.chrf.signature(),
            "full_steps": full_steps,
            "full_lr": full_lr,
            "reference_scores": {
                "ocat_ref": round(ocat_ref, 4),
                "full_ref": round(full_ref, 4),
            },
        },
    )


# --------------------------------------------------------- threshold checks
#
# Frozen pass/fail rules for the synthetic-scale phenomena. Tests and the
# CLI --check mode share these; each returns a list of failure strings
# (empty means pass).


def check_tag_sensitivity(experiment: CatExperiment, min_gap: float = 5.0) -> list:
    clean = experiment.test_scores[f"cat:{tag_for_corpus('clean')}"]
    bad = experiment.test_scores[f"cat:{tag_for_corpus('misaligned')}"]
    if clean - bad < min_gap:
        return [f"tag sensitivity gap {clean - bad:.2f} < {min_gap}"
                f" (clean {clean:.2f}, misaligned {bad:.2f})"]
    return []


def check_ocat_improvement(experiment: CatExperiment,
                           best_slack: float = 0.5,
                           baseline_margin: float = 1.0) -> list:
    ocat = experiment.test_scores[f"ocat:{HQ_TAG}"]
    best = experiment.test_scores[f"cat:{experiment.best_tag}"]
    base = experiment.test_scores["baseline"]
    failures = []
    if ocat < best - best_slack:
        failures.append(f"ocat {ocat:.2f} < best tag {best:.2f} - {best_slack}")
    if ocat < base + baseline_margin:
        failures.append(f"ocat {ocat:.2f} < baseline {base:.2f} + {baseline_margin}")
    return failures


def check_stability_report(report: Report, max_ocat_range: float = 2.0,
                           min_degradation: float = 5.0) -> list:
    ocat_scores = [r["heldout_chrf"] for r in report.rows if r["method"] == "ocat"]
    others = [r for r in report.rows if r["method"] != "ocat"]
    failures = []
    spread = max(ocat_scores) - min(ocat_scores)
    if spread > max_ocat_range:
        failures.append(f"ocat held-out spread {spread:.2f} > {max_ocat_range}")
    if not any(r["delta"] < -min_degradation for r in others):
        failures.append(
            f"no full/adapter/lora cell degrades held-out by > {min_degradation}")
    return failures


def check_size_report(report: Report, min_delta_n1: float = -2.0) -> list:
    if not report.rows:
        return []
    by_n = {r["n"]: r["delta"] for r in report.rows}
    smallest, largest = min(by_n), max(by_n)
    failures = []
    if by_n[smallest] < min_delta_n1 and smallest == 1:
        failures.append(f"delta at n=1 is {by_n[1]:.2f} < {min_delta_n1}")
    if by_n[largest] < by_n[smallest]:
        failures.append(
            f"delta(n={largest}) {by_n[largest]:.2f} < delta(n={smallest}) "
            f"{by_n[smallest]:.2f}")
    return failures


def check_overfit_report(report: Report, ocat_min_delta: float = -1.0,
                         full_max_delta: float = -5.0,
                         full_min_tuneset: float = 95.0) -> list:
    rows = {r["method"]: r for r in report.rows}
    failures = []
    if rows["ocat"]["heldout_delta"] < ocat_min_delta:
        failures.append(
            f"ocat held-out delta {rows['ocat']['heldout_delta']:.2f} < "
            f"{ocat_min_delta}")
    if rows["full"]["heldout_delta"] > full_max_delta:
        failures.append(
            f"full FT held-out delta {rows['full']['heldout_delta']:.2f} > "
            f"{full_max_delta} (should degrade)")
    if rows["full"]["tuneset_chrf"] <= full_min_tuneset:
        failures.append(
            f"full FT tune-set chrF {rows['full']['tuneset_chrf']:.2f} <= "
            f"{full_min_tuneset} (should memorize)")
    return failures


def run_baseline_finetunes(config: ExperimentConfig,
                           experiment: CatExperiment) -> Report:
    """Single-setting comparison of the four fine-tuners (trainable params,
    held-out and tune-set scores), mirroring the comparison-table shape."""
    dev = experiment.corpora["dev"]
    test = experiment.corpora["test"]
    tokenizer = experiment.tokenizer
    registry = experiment.registry
    rows = []

    def eval_row(method, params, mcfg, tag, trainable):
        heldout = _eval_chrf(params, mcfg, config, tag, test, tokenizer)
        tuneset = _eval_chrf(params, mcfg, config, tag, dev, tokenizer)
        rows.append({"method": method, "trainable": trainable,
                     "heldout_chrf": round(heldout, 4),
                     "tuneset_chrf": round(tuneset, 4)})

    seed = _derive_seed(config.seed, "baselines")
    eval_row("cat-best-tag", experiment.cat_params, experiment.model_config,
             experiment.best_tag,
             0)
    eval_row("ocat", experiment.ocat_params, experiment.model_config, HQ_TAG,
             experiment.model_config.d_model)
    eval_row("baseline", experiment.base_params, experiment.model_config, None, 0)

    full = full_finetune(experiment.base_params, experiment.model_config,
                         list(dev), config.baseline_ft_steps,
                         config.baseline_ft_lr, tokenizer, seed=seed,
                         batch_tokens=config.finetune_batch_tokens)
    eval_row("full", full.params, experiment.model_config, None,
             FreezeMask.all_trainable().trainable_count(full.params))

    ad_res, ad_cfg = adapter_finetune(
        experiment.base_params, experiment.model_config,
        AdapterConfig(config.adapter_dim), list(dev), config.baseline_ft_steps,
        config.baseline_ft_lr, tokenizer, seed=seed,
        batch_tokens=config.finetune_batch_tokens)
    eval_row("adapter", ad_res.params, ad_cfg, None,
             FreezeMask.only_tensors(
                 [n for n in ad_res.params if ".adapter" in n]
             ).trainable_count(ad_res.params))

    lo_res, lo_cfg = lora_finetune(
        experiment.base_params, experiment.model_config,
        LoraConfig(config.lora_rank), list(dev), config.baseline_ft_steps,
        config.baseline_ft_lr, tokenizer, seed=seed,
        batch_tokens=config.finetune_batch_tokens)
    eval_row("lora", lo_res.params, lo_cfg, None,
             FreezeMask.only_tensors(
                 [n for n in lo_res.params if ".lora_" in n]
             ).trainable_count(lo_res.params))

    return Report(
        kind="finetune_comparison",
        columns=["method", "trainable", "heldout_chrf", "tuneset_chrf"],
        rows=rows,
        meta={
            "experiment": config.name,
            "config_hash": experiment_hash(config),
            "seed": config.seed,
            "metric_signature": config.chrf.signature(),
        },
    )
