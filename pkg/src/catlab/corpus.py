"""Parallel-corpus ingestion, tag assignment, capping, and tag injection.

Mixture construction is deterministic for a fixed seed regardless of how
ingestion was parallelized: per-tag sampling uses a seed derived from the tag
string, and the merged output is shuffled once with the mixture seed.
"""

from __future__ import annotations

import dataclasses
import hashlib
import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from urllib.parse import urlparse

import numpy as np

from catlab.subword import EOS, BpeTokenizer

logger = logging.getLogger(__name__)

TAG_PATTERN = re.compile(r"^<[^<>\s]+>$")

TAG_ORIGINS = ("named-corpus", "url-domain", "synthetic", "hq")


@dataclass(frozen=True)
class CorpusRecord:
    """One parallel sentence pair with provenance."""

    source: str
    target: str
    corpus_id: str
    url: str | None = None
    tag: str | None = None

    def __post_init__(self):
        if not self.source.strip() or not self.target.strip():
            raise ValueError("source and target must be non-empty after trimming")


@dataclass
class TagRegistry:
    """Ordered tag inventory plus the corpus-id -> tag binding."""

    tags: list[str] = field(default_factory=list)
    origin: dict = field(default_factory=dict)  # tag -> origin kind
    _corpus_to_tag: dict = field(default_factory=dict)

    def register(self, tag: str, origin: str, corpus_ids: tuple = ()) -> None:
        if not TAG_PATTERN.match(tag):
            raise ValueError(f"tag {tag!r} must look like <name> with no whitespace")
        if origin not in TAG_ORIGINS:
            raise ValueError(f"unknown tag origin {origin!r}")
        if tag in self.origin:
            raise ValueError(f"tag {tag!r} already registered")
        self.tags.append(tag)
        self.origin[tag] = origin
        for cid in corpus_ids:
            self.bind(cid, tag)

    def bind(self, corpus_id: str, tag: str) -> None:
        if tag not in self.origin:
            raise KeyError(f"tag {tag!r} not registered")
        existing = self._corpus_to_tag.get(corpus_id)
        if existing is not None and existing != tag:
            raise ValueError(f"corpus {corpus_id!r} already bound to {existing!r}")
        self._corpus_to_tag[corpus_id] = tag

    def tag_for(self, corpus_id: str) -> str:
        if corpus_id not in self._corpus_to_tag:
            raise KeyError(f"corpus id {corpus_id!r} has no registered tag")
        return self._corpus_to_tag[corpus_id]

    def corpus_tags(self) -> list[str]:
        """Tags that denote training corpora (everything except hq slots)."""
        return [t for t in self.tags if self.origin[t] != "hq"]


@dataclass(frozen=True)
class MixtureSpec:
    per_tag_cap: int
    shuffle_seed: int = 0

    def __post_init__(self):
        if self.per_tag_cap < 1:
            raise ValueError("per_tag_cap must be >= 1")


@dataclass(frozen=True)
class TaggedExample:
    """Token-id view of a record; source ends [tag_id, EOS], target ends [EOS].

    tag_id None means no tag was injected (baseline training without tags).
    """

    source_tokens: tuple
    target_tokens: tuple
    tag_id: int | None


@dataclass
class IngestResult:
    records: list
    malformed_count: int = 0

    @property
    def kept_count(self) -> int:
        return len(self.records)


def ingest_tsv(path, corpus_id: str) -> IngestResult:
    """Read source<TAB>target[<TAB>url] lines; skip and count malformed ones."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"corpus file not found: {path}")
    records = []
    malformed = 0
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) < 2 or not fields[0].strip() or not fields[1].strip():
                malformed += 1
                continue
            url = fields[2].strip() if len(fields) > 2 and fields[2].strip() else None
            records.append(
                CorpusRecord(
                    source=fields[0].strip(),
                    target=fields[1].strip(),
                    corpus_id=corpus_id,
                    url=url,
                )
            )
    logger.info(
        "ingested %s: %d records kept, %d malformed lines skipped",
        path, len(records), malformed,
    )
    return IngestResult(records=records, malformed_count=malformed)


def url_domain(url: str) -> str:
    """Registrable-domain second-level label, lowercased ("baunat" from
    www.baunat.com)."""
    host = urlparse(url).hostname or url
    host = host.lower()
    if host.startswith("www."):
        host = host[4:]
    labels = [l for l in host.split(".") if l]
    if not labels:
        raise ValueError(f"cannot extract a domain from url {url!r}")
    return labels[-2] if len(labels) >= 2 else labels[0]


def split_by_url_domain(records: list, top_k: int) -> dict:
    """Partition records by URL domain: top_k domains get their own tag, the
    long tail pools under <corpus-other>.

    Domains rank by record count descending, ties broken lexicographically.
    """
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    corpus_ids = {r.corpus_id for r in records}
    if len(corpus_ids) > 1:
        raise ValueError(f"records span multiple corpora: {sorted(corpus_ids)}")
    domains = []
    for r in records:
        if r.url is None:
            raise ValueError("every record must carry a url; filter first")
        domains.append(url_domain(r.url))
    counts = Counter(domains)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    kept = {d for d, _ in ranked[:top_k]}
    corpus = next(iter(corpus_ids)) if corpus_ids else "corpus"
    buckets: dict = {}
    for r, d in zip(records, domains):
        tag = f"<{corpus}-{d}>" if d in kept else f"<{corpus}-other>"
        buckets.setdefault(tag, []).append(r)
    return buckets


def _tag_seed(shuffle_seed: int, tag: str) -> int:
    digest = hashlib.sha256(f"{shuffle_seed}|{tag}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def build_mixture(
    corpora: dict, spec: MixtureSpec, registry: TagRegistry
) -> list:
    """Cap each tag's corpus at per_tag_cap via seeded sampling without
    replacement, merge, and shuffle. Output records carry their tag."""
    for tag in corpora:
        if tag not in registry.origin:
            raise KeyError(f"tag {tag!r} not registered")
    mixed = []
    for tag in sorted(corpora):
        records = corpora[tag]
        if len(records) > spec.per_tag_cap:
            rng = np.random.default_rng(_tag_seed(spec.shuffle_seed, tag))
            idx = rng.permutation(len(records))[: spec.per_tag_cap]
            chosen = [records[i] for i in sorted(idx)]
        else:
            chosen = list(records)
        mixed.extend(dataclasses.replace(r, tag=tag) for r in chosen)
    order = np.random.default_rng(spec.shuffle_seed).permutation(len(mixed))
    return [mixed[i] for i in order]


def mixture_manifest(records: list, spec: MixtureSpec) -> dict:
    """JSON-style manifest of a built mixture: per-tag counts, cap, seed."""
    counts = Counter(r.tag for r in records)
    return {
        "per_tag_counts": {tag: counts[tag] for tag in sorted(counts)},
        "per_tag_cap": spec.per_tag_cap,
        "shuffle_seed": spec.shuffle_seed,
        "total": len(records),
    }


def inject_tag(
    record: CorpusRecord, registry: TagRegistry, tokenizer: BpeTokenizer
) -> TaggedExample:
    """Encode a record and append its corpus tag just before source EOS."""
    tag = record.tag if record.tag is not None else registry.tag_for(record.corpus_id)
    tag_id = tokenizer.vocab.tag_id(tag)
    return _encode_example(record, tokenizer, tag_id)


def untagged_example(record: CorpusRecord, tokenizer: BpeTokenizer) -> TaggedExample:
    """Encode a record without any tag (baseline training)."""
    return _encode_example(record, tokenizer, None)


def _encode_example(
    record: CorpusRecord, tokenizer: BpeTokenizer, tag_id: int | None
) -> TaggedExample:
    src = tokenizer.encode(record.source)
    tgt = tokenizer.encode(record.target)
    if not src:
        raise ValueError(f"empty source after encoding: {record.source!r}")
    if not tgt:
        raise ValueError(f"empty target after encoding: {record.target!r}")
    suffix = (tag_id, EOS) if tag_id is not None else (EOS,)
    return TaggedExample(
        source_tokens=tuple(src) + suffix,
        target_tokens=tuple(tgt) + (EOS,),
        tag_id=tag_id,
    )
