import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from catlab.subword import (
    EOS,
    PAD,
    UNK,
    BpeTokenizer,
    Vocabulary,
    normalize,
    train_subword,
)

CORPUS = [
    "the cat sat on the mat",
    "the dog sat on the log",
    "a cat and a dog walked home",
    "the mat and the log were wet",
    "birds fly over the green hills",
    "little rivers run past the village mill",
    "the miller works while the birds sing",
    "home is where the green valley opens",
]


@pytest.fixture(scope="module")
def trained():
    return train_subword(CORPUS, vocab_size=64, reserved=["<X>", "<HQ>"])


def test_normalize_collapses_whitespace():
    assert normalize("  a\t b\n\nc ") == "a b c"


def test_highest_frequency_pair_merged_first():
    tok, _ = train_subword(["aaab aaab"], vocab_size=10, reserved=[])
    # pairs: (_,a)x2, (a,a)x4, (a,b)x2 -> "aa" before any "ab"
    assert tok.merges[0] == ("a", "a")


def test_tie_break_lexicographic():
    # "ab" and "cd" each appear twice; (a,b) < (c,d)
    tok, _ = train_subword(["ab cd ab cd"], vocab_size=12, reserved=[])
    first_non_marker = [m for m in tok.merges if "▁" not in m[0]]
    assert first_non_marker[0] == ("a", "b")


def test_exact_vocab_size(trained):
    _, vocab = trained
    assert vocab.size == 64


def test_special_and_tag_layout(trained):
    _, vocab = trained
    assert vocab.units[:4] == ["<pad>", "<bos>", "<eos>", "<unk>"]
    assert vocab.tag_ids == {"<X>": 4, "<HQ>": 5}
    assert vocab.units[4:6] == ["<X>", "<HQ>"]


def test_vocab_size_too_small_rejected():
    with pytest.raises(ValueError, match="too small"):
        train_subword(CORPUS, vocab_size=10, reserved=["<X>"])


def test_merges_exhausted_is_an_error():
    with pytest.raises(ValueError, match="exhausted"):
        train_subword(["ab"], vocab_size=100, reserved=[])


def test_retraining_is_deterministic():
    a = train_subword(CORPUS, vocab_size=48, reserved=["<X>"])
    b = train_subword(CORPUS, vocab_size=48, reserved=["<X>"])
    assert a[1].units == b[1].units
    assert a[0].merges == b[0].merges


def test_round_trip_training_corpus(trained):
    tok, _ = trained
    for line in CORPUS:
        assert tok.decode(tok.encode(line)) == normalize(line)


def test_encode_empty(trained):
    tok, _ = trained
    assert tok.encode("") == []
    assert tok.encode("   ") == []


def test_unknown_character_maps_to_unk(trained):
    tok, _ = trained
    ids = tok.encode("zebra")  # z, b, r absent from training corpus
    assert UNK in ids


def test_literal_tag_text_never_produces_tag_id():
    corpus = CORPUS + ["the <HQ> marker appears in raw text <HQ>"]
    tok, vocab = train_subword(corpus, vocab_size=96, reserved=["<HQ>"])
    ids = tok.encode("some <HQ> text")
    assert vocab.tag_ids["<HQ>"] not in ids
    # the literal string survives decoding as plain characters
    assert "<HQ>" not in vocab.units[6:] or vocab.units.index("<HQ>") == 4


def test_no_unit_equals_tag_or_special(trained):
    tok, vocab = trained
    subword_units = vocab.units[4 + len(vocab.tag_ids):]
    for forbidden in ["<pad>", "<bos>", "<eos>", "<unk>", "<X>", "<HQ>"]:
        assert forbidden not in subword_units


def test_save_load_round_trip(tmp_path, trained):
    tok, vocab = trained
    tok.save(tmp_path / "tok")
    loaded = BpeTokenizer.load(tmp_path / "tok")
    assert loaded.vocab.units == vocab.units
    assert loaded.merges == tok.merges
    text = "the cat and the dog"
    assert loaded.encode(text) == tok.encode(text)


def test_vocab_file_one_unit_per_line(tmp_path, trained):
    _, vocab = trained
    vocab.save(tmp_path / "v")
    lines = (tmp_path / "v.vocab").read_text().split("\n")[:-1]
    assert len(lines) == vocab.size
    assert lines[0] == "<pad>"
    reloaded = Vocabulary.load(tmp_path / "v")
    assert reloaded.units == vocab.units


@settings(max_examples=25, deadline=None)
@given(st.lists(
    st.text(alphabet="abcde ", min_size=1, max_size=30).filter(str.strip),
    min_size=1, max_size=8))
def test_round_trip_property(lines):
    from hypothesis import assume

    chars = {c for line in lines for c in normalize(line) if c != " "}
    vocab_size = 4 + 1 + len(chars) + 6  # specials + tag + chars + some merges
    try:
        tok, _ = train_subword(lines, vocab_size=vocab_size, reserved=["<T>"])
    except ValueError:
        assume(False)  # corpus too small for any merges; uninteresting
    for line in lines:
        assert tok.decode(tok.encode(line)) == normalize(line)


def test_decode_skips_structural_specials(trained):
    tok, _ = trained
    ids = tok.encode("the cat")
    assert tok.decode([PAD] + ids + [EOS]) == "the cat"
