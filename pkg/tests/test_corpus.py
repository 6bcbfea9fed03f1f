import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from catlab.corpus import (
    CorpusRecord,
    IngestResult,
    MixtureSpec,
    TagRegistry,
    build_mixture,
    ingest_tsv,
    inject_tag,
    mixture_manifest,
    split_by_url_domain,
    untagged_example,
    url_domain,
)
from catlab.subword import EOS, train_subword


@pytest.fixture(scope="module")
def tokenizer():
    corpus = ["hello world", "bonjour tout le monde", "salut hello",
              "le monde entier", "hello le monde"]
    tok, _ = train_subword(corpus, vocab_size=56, reserved=["<opus>", "<crawl>", "<HQ>"])
    return tok


@pytest.fixture()
def registry():
    reg = TagRegistry()
    reg.register("<opus>", "named-corpus", corpus_ids=("opus",))
    reg.register("<crawl>", "named-corpus", corpus_ids=("crawl",))
    reg.register("<HQ>", "hq")
    return reg


def rec(src="hello", tgt="bonjour", cid="opus", **kw):
    return CorpusRecord(source=src, target=tgt, corpus_id=cid, **kw)


class TestIngest:
    def test_two_fields(self, tmp_path):
        p = tmp_path / "c.tsv"
        p.write_text("hello\tbonjour\n", encoding="utf-8")
        result = ingest_tsv(p, "opus")
        assert result.kept_count == 1
        assert result.malformed_count == 0
        assert result.records[0].source == "hello"
        assert result.records[0].target == "bonjour"
        assert result.records[0].url is None

    def test_third_field_is_url(self, tmp_path):
        p = tmp_path / "c.tsv"
        p.write_text("hi\tsalut\thttp://a.com/x\n", encoding="utf-8")
        result = ingest_tsv(p, "crawl")
        assert result.records[0].url == "http://a.com/x"

    def test_single_field_skipped_and_counted(self, tmp_path):
        p = tmp_path / "c.tsv"
        p.write_text("loner\nhello\tbonjour\n", encoding="utf-8")
        result = ingest_tsv(p, "opus")
        assert result.kept_count == 1
        assert result.malformed_count == 1

    def test_empty_side_is_malformed(self, tmp_path):
        p = tmp_path / "c.tsv"
        p.write_text("\tbonjour\nx\t \n", encoding="utf-8")
        result = ingest_tsv(p, "opus")
        assert result.kept_count == 0
        assert result.malformed_count == 2

    def test_missing_file_fatal(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            ingest_tsv(tmp_path / "absent.tsv", "opus")


class TestRecordInvariants:
    def test_blank_source_rejected(self):
        with pytest.raises(ValueError):
            CorpusRecord(source="  ", target="x", corpus_id="c")

    def test_blank_target_rejected(self):
        with pytest.raises(ValueError):
            CorpusRecord(source="x", target="\t", corpus_id="c")


class TestRegistry:
    def test_tags_must_be_delimited(self, registry):
        with pytest.raises(ValueError):
            registry.register("plain", "named-corpus")
        with pytest.raises(ValueError):
            registry.register("<has space>", "named-corpus")

    def test_duplicate_tag_rejected(self, registry):
        with pytest.raises(ValueError):
            registry.register("<opus>", "named-corpus")

    def test_corpus_binds_to_exactly_one_tag(self, registry):
        with pytest.raises(ValueError):
            registry.bind("opus", "<crawl>")

    def test_corpus_tags_excludes_hq(self, registry):
        assert registry.corpus_tags() == ["<opus>", "<crawl>"]


class TestUrlDomainSplit:
    def test_second_level_label(self):
        assert url_domain("http://www.baunat.com/en") == "baunat"
        assert url_domain("https://php.example.net/docs") == "example"
        assert url_domain("http://localhost/x") == "localhost"

    def test_top_k_and_other_bucket(self):
        records = (
            [rec(cid="crawl", url="http://a.com/1") for _ in range(5)]
            + [rec(cid="crawl", url="http://b.com/1") for _ in range(3)]
            + [rec(cid="crawl", url="http://c.com/1")]
        )
        buckets = split_by_url_domain(records, top_k=2)
        assert sorted(buckets) == ["<crawl-a>", "<crawl-b>", "<crawl-other>"]
        assert len(buckets["<crawl-a>"]) == 5
        assert len(buckets["<crawl-other>"]) == 1

    def test_tie_break_lexicographic(self):
        records = [rec(cid="crawl", url="http://b.com/1"),
                   rec(cid="crawl", url="http://a.com/1"),
                   rec(cid="crawl", url="http://b.com/2"),
                   rec(cid="crawl", url="http://a.com/2")]
        buckets = split_by_url_domain(records, top_k=1)
        assert "<crawl-a>" in buckets
        assert len(buckets["<crawl-other>"]) == 2

    def test_missing_url_fatal(self):
        with pytest.raises(ValueError, match="url"):
            split_by_url_domain([rec()], top_k=1)

    def test_partition_property(self):
        rng = np.random.default_rng(0)
        records = [rec(cid="crawl", url=f"http://d{rng.integers(12)}.com/x")
                   for _ in range(80)]
        buckets = split_by_url_domain(records, top_k=4)
        total = sum(len(v) for v in buckets.values())
        assert total == len(records)
        seen = set()
        for v in buckets.values():
            for r in v:
                assert id(r) not in seen
                seen.add(id(r))

    def test_long_tail_other_is_largest_bucket(self):
        # Zipf-ish: many singleton domains; the pooled tail dominates any
        # single kept domain, mirroring a crawled-corpus distribution.
        records = []
        for d in range(30):  # kept domains, a few records each
            records += [rec(cid="crawl", url=f"http://top{d:03d}.com/p")
                        for _ in range(3 + (d % 3))]
        for d in range(200):  # long tail, one record each
            records.append(rec(cid="crawl", url=f"http://tail{d:04d}.org/p"))
        buckets = split_by_url_domain(records, top_k=30)
        sizes = {tag: len(v) for tag, v in buckets.items()}
        other = sizes.pop("<crawl-other>")
        assert other == 200
        assert other > max(sizes.values())


class TestBuildMixture:
    def make_corpora(self, registry, n_a=100, n_b=20):
        a = [rec(src=f"src a {i}", tgt=f"tgt a {i}") for i in range(n_a)]
        b = [rec(src=f"src b {i}", tgt=f"tgt b {i}", cid="crawl") for i in range(n_b)]
        return {"<opus>": a, "<crawl>": b}

    def test_cap_enforced(self, registry):
        corpora = self.make_corpora(registry)
        out = build_mixture(corpora, MixtureSpec(per_tag_cap=10, shuffle_seed=1),
                            registry)
        counts = {}
        for r in out:
            counts[r.tag] = counts.get(r.tag, 0) + 1
        assert counts == {"<opus>": 10, "<crawl>": 10}

    def test_no_op_cap_is_permutation(self, registry):
        corpora = self.make_corpora(registry, n_a=15, n_b=7)
        out = build_mixture(corpora, MixtureSpec(per_tag_cap=1000, shuffle_seed=2),
                            registry)
        assert len(out) == 22
        assert {r.source for r in out} == {
            r.source for v in corpora.values() for r in v}

    def test_deterministic(self, registry):
        corpora = self.make_corpora(registry)
        spec = MixtureSpec(per_tag_cap=30, shuffle_seed=7)
        out1 = build_mixture(corpora, spec, registry)
        out2 = build_mixture(corpora, spec, registry)
        assert [(r.source, r.tag) for r in out1] == [(r.source, r.tag) for r in out2]

    def test_unregistered_tag_fatal(self, registry):
        with pytest.raises(KeyError):
            build_mixture({"<nope>": [rec()]}, MixtureSpec(per_tag_cap=5), registry)

    def test_manifest(self, registry):
        corpora = self.make_corpora(registry)
        spec = MixtureSpec(per_tag_cap=10, shuffle_seed=1)
        out = build_mixture(corpora, spec, registry)
        manifest = mixture_manifest(out, spec)
        assert manifest["per_tag_counts"] == {"<crawl>": 10, "<opus>": 10}
        assert manifest["per_tag_cap"] == 10
        assert manifest["total"] == 20

    @settings(max_examples=20, deadline=None)
    @given(cap=st.integers(1, 40), n=st.integers(1, 60), seed=st.integers(0, 5))
    def test_counts_never_exceed_cap(self, cap, n, seed):
        reg = TagRegistry()
        reg.register("<t>", "named-corpus", corpus_ids=("c",))
        records = [CorpusRecord(source=f"s{i}", target=f"t{i}", corpus_id="c")
                   for i in range(n)]
        out = build_mixture({"<t>": records}, MixtureSpec(cap, seed), reg)
        assert len(out) == min(cap, n)


class TestInjectTag:
    def test_tag_before_eos(self, registry, tokenizer):
        ex = inject_tag(rec(src="hello world", tgt="bonjour monde"), registry,
                        tokenizer)
        tag_id = tokenizer.vocab.tag_id("<opus>")
        assert ex.source_tokens[-2:] == (tag_id, EOS)
        assert ex.target_tokens[-1] == EOS
        assert ex.tag_id == tag_id

    def test_exactly_one_tag_in_source_none_in_target(self, registry, tokenizer):
        ex = inject_tag(rec(src="hello world", tgt="le monde"), registry, tokenizer)
        src_tags = [t for t in ex.source_tokens if tokenizer.vocab.is_tag(t)]
        tgt_tags = [t for t in ex.target_tokens if tokenizer.vocab.is_tag(t)]
        assert len(src_tags) == 1
        assert tgt_tags == []

    def test_unregistered_tag_fatal(self, registry, tokenizer):
        r = dataclasses.replace(rec(), tag="<unknown>")
        with pytest.raises(KeyError):
            inject_tag(r, registry, tokenizer)

    def test_unbound_corpus_fatal(self, registry, tokenizer):
        with pytest.raises(KeyError):
            inject_tag(rec(cid="mystery"), registry, tokenizer)

    def test_empty_source_after_encode_fatal(self, registry, tokenizer):
        r = rec()
        object.__setattr__(r, "source", "   ")  # bypass record validation
        with pytest.raises(ValueError, match="empty source"):
            inject_tag(r, registry, tokenizer)

    def test_same_text_different_tags_differ_only_in_tag(self, registry, tokenizer):
        a = inject_tag(rec(src="hello monde", tgt="le monde"), registry, tokenizer)
        b = inject_tag(rec(src="hello monde", tgt="le monde", cid="crawl"),
                       registry, tokenizer)
        assert a.source_tokens[:-2] == b.source_tokens[:-2]
        assert a.source_tokens[-1] == b.source_tokens[-1] == EOS
        assert a.source_tokens[-2] != b.source_tokens[-2]
        assert a.target_tokens == b.target_tokens

    def test_tag_strippable_reconstruction(self, registry, tokenizer):
        # dropping the last two source tokens recovers the plain encoding
        r = rec(src="hello tout le monde", tgt="bonjour")
        ex = inject_tag(r, registry, tokenizer)
        assert list(ex.source_tokens[:-2]) == tokenizer.encode(r.source)

    def test_untagged_example(self, tokenizer):
        ex = untagged_example(rec(src="hello", tgt="monde"), tokenizer)
        assert ex.tag_id is None
        assert ex.source_tokens[-1] == EOS
        assert not any(tokenizer.vocab.is_tag(t) for t in ex.source_tokens)
