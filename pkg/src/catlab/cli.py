"""Command-line interface.

Experiments run against a working directory that accumulates staged
artifacts: synthetic corpora (TSV), the trained tokenizer, model checkpoints,
tag rankings, and reports (TSV + JSON). A typical session:

    catlab synth --workdir runs/demo
    catlab pretrain --workdir runs/demo
    catlab rank-tags --workdir runs/demo
    catlab ocat --workdir runs/demo
    catlab report --workdir runs/demo
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from catlab import harness
from catlab.corpus import (
    MixtureSpec,
    build_mixture,
    ingest_tsv,
    inject_tag,
    mixture_manifest,
    split_by_url_domain,
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
from catlab.harness import (
    CatExperiment,
    ExperimentConfig,
    HQ_TAG,
    build_registry,
    check_size_report,
    check_stability_report,
    config_from_dict,
    config_to_json,
    experiment_hash,
    run_baseline_finetunes,
    sweep_finetune_size,
    sweep_stability,
    tag_for_corpus,
)
from catlab.metrics import chrf_corpus
from catlab.model import (
    AdapterConfig,
    LoraConfig,
    ModelConfig,
    count_params,
    init_params,
    model_config_from_dict,
)
from catlab.subword import BpeTokenizer, train_subword
from catlab.trainer import (
    Checkpoint,
    Schedule,
    average_checkpoints,
    config_hash,
    token_batches,
    train_loop,
)

logger = logging.getLogger("catlab")


# ------------------------------------------------------------ workdir state


def _load_config(args) -> ExperimentConfig:
    workdir = Path(args.workdir)
    stored = workdir / "config.json"
    if getattr(args, "config", None):
        cfg = config_from_dict(json.loads(Path(args.config).read_text()))
    elif stored.exists():
        cfg = config_from_dict(json.loads(stored.read_text()))
    else:
        cfg = ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def _save_config(cfg: ExperimentConfig, workdir: Path) -> None:
    workdir.mkdir(parents=True, exist_ok=True)
    (workdir / "config.json").write_text(config_to_json(cfg))


def _corpora_dir(workdir: Path) -> Path:
    return workdir / "corpora"


def _write_corpus_tsv(records, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            url = f"\t{r.url}" if r.url else ""
            f.write(f"{r.source}\t{r.target}{url}\n")


def _load_corpora(cfg: ExperimentConfig, workdir: Path) -> dict:
    out = {}
    names = [cs.name for cs in cfg.task.corpora] + ["dev", "test"]
    for name in names:
        path = _corpora_dir(workdir) / f"{name}.tsv"
        out[name] = ingest_tsv(path, corpus_id=name).records
    return out


def _load_tokenizer(workdir: Path) -> BpeTokenizer:
    return BpeTokenizer.load(workdir / "tokenizer")


def _model_path(workdir: Path, name: str) -> Path:
    return workdir / "models" / f"{name}.bin"


def _save_model(params, model_config: ModelConfig, workdir: Path, name: str,
                step: int = 0) -> None:
    Checkpoint(params=params, step=step, config_hash=config_hash(model_config),
               config=dataclasses.asdict(model_config)).save(
        _model_path(workdir, name))


def _load_model(workdir: Path, name: str):
    ckpt = Checkpoint.load(_model_path(workdir, name))
    return ckpt.params, model_config_from_dict(ckpt.config)


def _tagged_examples(cfg, corpora, registry, tokenizer):
    by_tag = {tag_for_corpus(cs.name): corpora[cs.name] for cs in cfg.task.corpora}
    seed = harness._derive_seed(cfg.seed, "mixture")
    spec = MixtureSpec(per_tag_cap=cfg.per_tag_cap, shuffle_seed=seed)
    mixture = build_mixture(by_tag, spec, registry)
    return mixture, mixture_manifest(mixture, spec)


# ------------------------------------------------------------------- stages


def cmd_synth(args) -> int:
    cfg = _load_config(args)
    workdir = Path(args.workdir)
    _save_config(cfg, workdir)
    corpora = harness.make_synthetic_corpora(cfg.task, cfg.seed)
    for name, records in corpora.items():
        _write_corpus_tsv(records, _corpora_dir(workdir) / f"{name}.tsv")
    manifest = {name: len(records) for name, records in corpora.items()}
    (workdir / "corpora" / "manifest.json").write_text(
        json.dumps({"sizes": manifest, "seed": cfg.seed,
                    "config_hash": experiment_hash(cfg)}, indent=2))
    print(f"wrote {len(corpora)} corpora to {workdir / 'corpora'}: {manifest}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _load_config(args)
    workdir = Path(args.workdir)
    if getattr(args, "steps", None):
        cfg = dataclasses.replace(cfg, pretrain_steps=args.steps)
    _save_config(cfg, workdir)
    corpora = _load_corpora(cfg, workdir)
    registry = build_registry(cfg)
    text = []
    for cs in cfg.task.corpora:
        for r in corpora[cs.name]:
            text.extend((r.source, r.target))
    tokenizer, _ = train_subword(text, cfg.subword_vocab, registry.tags)
    tokenizer.save(workdir / "tokenizer")
    mixture, manifest = _tagged_examples(cfg, corpora, registry, tokenizer)
    (workdir / "mixture_manifest.json").write_text(json.dumps(manifest, indent=2))
    model_config = cfg.model_config()
    which = args.models.split(",")
    for name in which:
        if name == "cat":
            examples = [inject_tag(r, registry, tokenizer) for r in mixture]
        elif name == "base":
            examples = [untagged_example(r, tokenizer) for r in mixture]
        else:
            raise SystemExit(f"unknown model {name!r} (expected cat/base)")
        res = train_loop(
            init_params(model_config),
            token_batches(examples, cfg.batch_tokens,
                          seed=harness._derive_seed(cfg.seed, f"batches|{name}")),
            model_config,
            cfg.schedule(),
            steps=cfg.pretrain_steps,
            seed=harness._derive_seed(cfg.seed, f"train|{name}"),
            checkpoint_every=cfg.checkpoint_every,
            checkpoint_dir=workdir / "checkpoints" / name,
        )
        params = (average_checkpoints(res.checkpoints[-cfg.average_last:])
                  if res.checkpoints else res.params)
        _save_model(params, model_config, workdir, name, step=cfg.pretrain_steps)
        print(f"trained {name} model ({cfg.pretrain_steps} steps, "
              f"{count_params(model_config)} params) -> "
              f"{_model_path(workdir, name)}")
    return 0


def cmd_rank_tags(args) -> int:
    cfg = _load_config(args)
    workdir = Path(args.workdir)
    corpora = _load_corpora(cfg, workdir)
    tokenizer = _load_tokenizer(workdir)
    registry = build_registry(cfg)
    params, model_config = _load_model(workdir, "cat")
    ranked = rank_tags(params, model_config, registry, corpora["dev"],
                       cfg.decode_config(None), tokenizer, cfg.chrf)
    (workdir / "ranking.json").write_text(
        json.dumps({"ranking": [[t, s] for t, s in ranked],
                    "metric_signature": cfg.chrf.signature()}, indent=2))
    for tag, score in ranked:
        print(f"{tag}\t{score:.2f}")
    return 0


def cmd_ocat(args) -> int:
    cfg = _load_config(args)
    workdir = Path(args.workdir)
    corpora = _load_corpora(cfg, workdir)
    tokenizer = _load_tokenizer(workdir)
    registry = build_registry(cfg)
    params, model_config = _load_model(workdir, "cat")
    init_from = args.init_from
    if init_from == "auto":
        ranking_path = workdir / "ranking.json"
        if not ranking_path.exists():
            raise SystemExit("run rank-tags first (or pass --init-from)")
        init_from = json.loads(ranking_path.read_text())["ranking"][0][0]
    data = corpora[args.data]
    plan = OcatPlan(
        target_tag=args.tag,
        finetune_data=tuple(data),
        steps=args.steps if args.steps is not None else cfg.ocat_steps,
        lr=args.lr if args.lr is not None else cfg.ocat_lr,
        init_from=init_from,
        seed=harness._derive_seed(cfg.seed, "ocat"),
        batch_tokens=cfg.finetune_batch_tokens,
    )
    res = ocat_finetune(params, model_config, plan, registry, tokenizer)
    _save_model(res.params, model_config, workdir, "ocat", step=plan.steps)
    print(f"ocat fine-tune done: tag {args.tag} (init {init_from}, "
          f"{plan.steps} steps, lr {plan.lr}) -> {_model_path(workdir, 'ocat')}")
    return 0


def cmd_finetune(args) -> int:
    cfg = _load_config(args)
    workdir = Path(args.workdir)
    if args.method == "ocat":
        return cmd_ocat(args)
    corpora = _load_corpora(cfg, workdir)
    tokenizer = _load_tokenizer(workdir)
    params, model_config = _load_model(workdir, "base")
    data = list(corpora[args.data])
    steps = args.steps if args.steps is not None else cfg.baseline_ft_steps
    lr = args.lr if args.lr is not None else cfg.baseline_ft_lr
    seed = harness._derive_seed(cfg.seed, f"finetune|{args.method}")
    if args.method == "full":
        res = full_finetune(params, model_config, data, steps, lr, tokenizer,
                            seed=seed, batch_tokens=cfg.finetune_batch_tokens)
        out_cfg = model_config
    elif args.method == "adapter":
        res, out_cfg = adapter_finetune(
            params, model_config, AdapterConfig(cfg.adapter_dim), data, steps,
            lr, tokenizer, seed=seed, batch_tokens=cfg.finetune_batch_tokens)
    elif args.method == "lora":
        res, out_cfg = lora_finetune(
            params, model_config, LoraConfig(cfg.lora_rank), data, steps, lr,
            tokenizer, seed=seed, batch_tokens=cfg.finetune_batch_tokens)
    else:
        raise SystemExit(f"unknown finetune method {args.method!r}")
    _save_model(res.params, out_cfg, workdir, args.method, step=steps)
    print(f"{args.method} fine-tune done ({steps} steps, lr {lr}) -> "
          f"{_model_path(workdir, args.method)}")
    return 0


def _load_experiment(cfg: ExperimentConfig, workdir: Path) -> CatExperiment:
    """Reassemble a CatExperiment from staged artifacts (decodes the test and
    dev sets for the reference systems)."""
    corpora = _load_corpora(cfg, workdir)
    tokenizer = _load_tokenizer(workdir)
    registry = build_registry(cfg)
    cat_params, model_config = _load_model(workdir, "cat")
    base_params, _ = _load_model(workdir, "base")
    ranking_path = workdir / "ranking.json"
    if not ranking_path.exists():
        raise SystemExit("run rank-tags first")
    ranked = [(t, s) for t, s in json.loads(ranking_path.read_text())["ranking"]]
    ocat_path = _model_path(workdir, "ocat")
    ocat_params = Checkpoint.load(ocat_path).params if ocat_path.exists() else None

    test = corpora["test"]
    test_refs = [r.target for r in test]
    test_scores = {}
    test_hyps = {}

    def score(label, params, tag):
        hyps = decode_corpus(params, model_config, [r.source for r in test],
                             cfg.decode_config(tag), tokenizer)
        test_scores[label] = chrf_corpus(hyps, test_refs, cfg.chrf)
        test_hyps[label] = hyps

    score("baseline", base_params, None)
    for tag in registry.corpus_tags():
        score(f"cat:{tag}", cat_params, tag)
    if ocat_params is not None:
        score(f"ocat:{HQ_TAG}", ocat_params, HQ_TAG)
    return CatExperiment(
        config=cfg, corpora=corpora, registry=registry, tokenizer=tokenizer,
        model_config=model_config, cat_params=cat_params,
        base_params=base_params, ranked=ranked, ocat_params=ocat_params,
        test_scores=test_scores, test_hyps=test_hyps, report=None,
        manifest={})


def _finish_report(report, workdir: Path, name: str, failures: list,
                   check: bool) -> int:
    report.save(workdir / "reports" / name)
    print(report.to_tsv())
    print(f"report written to {workdir / 'reports' / name}.(json|tsv)")
    if failures:
        for f in failures:
            print(f"CHECK FAIL: {f}", file=sys.stderr)
    if check and failures:
        return 1
    return 0


def cmd_baselines(args) -> int:
    cfg = _load_config(args)
    workdir = Path(args.workdir)
    experiment = _load_experiment(cfg, workdir)
    report = run_baseline_finetunes(cfg, experiment)
    return _finish_report(report, workdir, "finetune_comparison", [], False)


def cmd_sweep_stability(args) -> int:
    cfg = _load_config(args)
    workdir = Path(args.workdir)
    experiment = _load_experiment(cfg, workdir)
    report = sweep_stability(cfg, experiment)
    failures = check_stability_report(report)
    return _finish_report(report, workdir, "stability_sweep", failures, args.check)


def cmd_sweep_size(args) -> int:
    cfg = _load_config(args)
    workdir = Path(args.workdir)
    experiment = _load_experiment(cfg, workdir)
    sizes = [int(s) for s in args.sizes.split(",")] if args.sizes else None
    report = sweep_finetune_size(cfg, experiment, sizes)
    failures = check_size_report(report)
    return _finish_report(report, workdir, "finetune_size_sweep", failures,
                          args.check)


def cmd_report(args) -> int:
    from catlab.metrics import ScoredSystem, score_table

    cfg = _load_config(args)
    workdir = Path(args.workdir)
    experiment = _load_experiment(cfg, workdir)
    corpora = experiment.corpora
    refs = {"test": [r.target for r in corpora["test"]],
            "dev": [r.target for r in corpora["dev"]]}
    systems = []
    for label, hyps in experiment.test_hyps.items():
        model, _, tag = label.partition(":")
        dev_hyps = decode_corpus(
            experiment.cat_params if model in ("cat", "ocat")
            else experiment.base_params,
            experiment.model_config,
            [r.source for r in corpora["dev"]],
            cfg.decode_config(tag or None), experiment.tokenizer)
        systems.append(ScoredSystem(model=model, tag=tag or None,
                                    hyps={"test": hyps, "dev": dev_hyps}))
    report = score_table(systems, refs, cfg.chrf,
                         n_resamples=cfg.bootstrap_resamples,
                         seed=cfg.bootstrap_seed,
                         meta={"experiment": cfg.name,
                               "config_hash": experiment_hash(cfg),
                               "seed": cfg.seed,
                               "tag_ranking": experiment.ranked})
    failures = []
    if args.check:
        failures = (harness.check_tag_sensitivity(experiment)
                    + harness.check_ocat_improvement(experiment))
    return _finish_report(report, workdir, "score_table", failures, args.check)


def cmd_decode(args) -> int:
    cfg = _load_config(args)
    workdir = Path(args.workdir)
    tokenizer = _load_tokenizer(workdir)
    params, model_config = _load_model(workdir, args.model)
    dconfig = DecodeConfig(inference_tag=args.tag, beam_size=args.beam,
                           length_penalty=args.length_penalty)
    sources = Path(args.input).read_text(encoding="utf-8").splitlines()
    sources = [s for s in sources if s.strip()]
    outputs = decode_corpus(params, model_config, sources, dconfig, tokenizer)
    Path(args.output).write_text("\n".join(outputs) + "\n", encoding="utf-8")
    print(f"decoded {len(outputs)} sentences -> {args.output}")
    return 0


def cmd_corpus_split(args) -> int:
    result = ingest_tsv(args.input, corpus_id=args.corpus_id)
    with_url = [r for r in result.records if r.url]
    dropped = len(result.records) - len(with_url)
    buckets = split_by_url_domain(with_url, args.top_k)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = {}
    for tag, records in sorted(buckets.items()):
        fname = tag.strip("<>").replace("/", "_") + ".tsv"
        _write_corpus_tsv(records, out_dir / fname)
        summary[tag] = len(records)
    (out_dir / "split_manifest.json").write_text(json.dumps(
        {"buckets": summary, "top_k": args.top_k,
         "malformed_lines": result.malformed_count,
         "records_without_url": dropped}, indent=2))
    print(json.dumps(summary, indent=2))
    return 0


def cmd_corpus_mixture(args) -> int:
    from catlab.corpus import TagRegistry

    registry = TagRegistry()
    corpora = {}
    for item in args.inputs:
        tag, _, path = item.partition("=")
        if not path:
            raise SystemExit(f"--inputs expects tag=path, got {item!r}")
        registry.register(tag, "named-corpus")
        corpora[tag] = ingest_tsv(path, corpus_id=tag.strip("<>")).records
    spec = MixtureSpec(per_tag_cap=args.cap, shuffle_seed=args.seed)
    mixed = build_mixture(corpora, spec, registry)
    _write_corpus_tsv(mixed, Path(args.output))
    manifest = mixture_manifest(mixed, spec)
    manifest_path = Path(args.manifest or (args.output + ".manifest.json"))
    manifest_path.write_text(json.dumps(manifest, indent=2))
    print(json.dumps(manifest, indent=2))
    return 0


def cmd_train(args) -> int:
    args.models = args.models or "cat,base"
    return cmd_pretrain(args)


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="catlab",
        description="Corpus-aware training laboratory (synthetic, desk scale)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, **kw):
        p = sub.add_parser(name, **kw)
        p.set_defaults(fn=fn)
        return p

    def add_workdir(p, config=True):
        p.add_argument("--workdir", required=True)
        if config:
            p.add_argument("--config", help="experiment config JSON")
        p.add_argument("--seed", type=int, default=None)

    p = add("synth", cmd_synth, help="generate synthetic corpora")
    add_workdir(p)

    p = add("pretrain", cmd_pretrain, help="train tokenizer + models")
    add_workdir(p)
    p.add_argument("--models", default="cat,base",
                   help="comma list from {cat,base}")
    p.add_argument("--steps", type=int, default=None)

    p = add("train", cmd_train, help="alias of pretrain")
    add_workdir(p)
    p.add_argument("--models", default=None)
    p.add_argument("--steps", type=int, default=None)

    p = add("rank-tags", cmd_rank_tags, help="score every inference tag on dev")
    add_workdir(p)

    p = add("ocat", cmd_ocat, help="fine-tune one tag-embedding row")
    add_workdir(p)
    p.add_argument("--tag", default=HQ_TAG)
    p.add_argument("--init-from", default="auto",
                   help="tag string, 'random', or 'auto' (best ranked)")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--data", default="dev")

    p = add("finetune", cmd_finetune, help="run a fine-tuning method")
    p.add_argument("method", choices=["ocat", "full", "adapter", "lora"])
    add_workdir(p)
    p.add_argument("--tag", default=HQ_TAG)
    p.add_argument("--init-from", default="auto")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--data", default="dev")

    p = add("baselines", cmd_baselines,
            help="compare ocat/full/adapter/lora fine-tuning")
    add_workdir(p)

    p = add("sweep-stability", cmd_sweep_stability,
            help="lr x steps grid for all fine-tuners")
    add_workdir(p)
    p.add_argument("--check", action="store_true",
                   help="exit nonzero if stability thresholds fail")

    p = add("sweep-size", cmd_sweep_size, help="fine-tune set size sweep")
    add_workdir(p)
    p.add_argument("--sizes", default=None, help="comma list, e.g. 1,10,100")
    p.add_argument("--check", action="store_true")

    p = add("report", cmd_report, help="assemble the score table")
    add_workdir(p)
    p.add_argument("--check", action="store_true",
                   help="exit nonzero if tag-sensitivity/ocat thresholds fail")

    p = add("decode", cmd_decode, help="translate a file of sentences")
    add_workdir(p, config=True)
    p.add_argument("--model", default="cat",
                   help="model name under workdir/models")
    p.add_argument("--tag", default=None)
    p.add_argument("--beam", type=int, default=4)
    p.add_argument("--length-penalty", type=float, default=1.0)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)

    corpus = sub.add_parser("corpus", help="corpus file operations")
    corpus_sub = corpus.add_subparsers(dest="corpus_command", required=True)
    p = corpus_sub.add_parser("split-by-domain",
                              help="split a TSV corpus by URL domain")
    p.set_defaults(fn=cmd_corpus_split)
    p.add_argument("--input", required=True)
    p.add_argument("--corpus-id", required=True)
    p.add_argument("--top-k", type=int, required=True)
    p.add_argument("--out-dir", required=True)

    p = corpus_sub.add_parser("build-mixture",
                              help="cap, merge and shuffle tagged corpora")
    p.set_defaults(fn=cmd_corpus_mixture)
    p.add_argument("--inputs", nargs="+", required=True,
                   metavar="TAG=PATH")
    p.add_argument("--cap", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", required=True)
    p.add_argument("--manifest", default=None)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(message)s", datefmt="%H:%M:%S")
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
