import json

import pytest

from safm.tasks import (
    PATTERNS,
    ConfigurationError,
    Stream,
    TaskSpec,
    Vocab,
    apply_pattern,
    make_dissimilar_stream,
    make_similar_stream,
    make_stream,
    materialize,
    read_jsonl,
    write_jsonl,
)


def spec(pattern, domain=tuple(range(10, 22)), **kw):
    return TaskSpec(0, pattern, domain, seed=0, **kw)


class TestPatterns:
    def test_copy_sort_reverse(self):
        x = (7, 3, 9)
        assert apply_pattern(spec("copy"), x) == (7, 3, 9)
        assert apply_pattern(spec("sort"), x) == (3, 7, 9)
        assert apply_pattern(spec("reverse"), x) == (9, 3, 7)

    def test_verbalize_is_a_lexicon(self):
        s = spec("verbalize")
        assert apply_pattern(s, (10, 15, 10)) == (16, 21, 16)

    def test_classify_and_extract(self):
        s = spec("classify-intent")
        assert apply_pattern(s, (20, 14, 19)) == (11,)
        with pytest.raises(ValueError):
            apply_pattern(s, (13, 14))
        assert apply_pattern(spec("extract-slot"), (12, 10, 17, 13)) == (17,)

    def test_unknown_pattern(self):
        with pytest.raises(ConfigurationError):
            spec("summarize")


class TestStreams:
    def test_similar_deterministic(self):
        assert make_similar_stream(5, seed=1) == make_similar_stream(5, seed=1)
        assert make_similar_stream(5, seed=1) != make_similar_stream(5, seed=2)

    def test_similar_disjoint_and_verbalize(self):
        st = make_similar_stream(5, seed=1)
        assert all(s.pattern == "verbalize" for s in st.specs)
        doms = [set(s.domain) for s in st.specs]
        assert all(not (doms[i] & doms[j]) for i in range(5) for j in range(i + 1, 5))
        assert sorted(st.order) == list(range(5))

    def test_dissimilar_distinct_patterns(self):
        st = make_dissimilar_stream(5, seed=0)
        assert len({s.pattern for s in st.specs}) == 5
        assert {s.pattern for s in make_dissimilar_stream(6, 3, domain_size=10).specs} == set(PATTERNS)

    def test_vocab_exhaustion(self):
        with pytest.raises(ConfigurationError):
            make_similar_stream(6, seed=0, domain_size=12, n_content=64)

    def test_unknown_scenario(self):
        with pytest.raises(ConfigurationError):
            make_stream("mixed")

    def test_manifest_roundtrip(self):
        st = make_dissimilar_stream(4, seed=3)
        assert Stream.from_manifest(json.loads(json.dumps(st.to_manifest()))) == st


class TestMaterialize:
    @pytest.mark.parametrize("pattern", PATTERNS)
    def test_rule_sizes_disjoint(self, pattern):
        st = make_dissimilar_stream(6, seed=2, domain_size=10)
        s = next(sp for sp in st.specs if sp.pattern == pattern)
        data = materialize(s)
        assert [len(data[k]) for k in ("train", "valid", "test")] == [256, 64, 64]
        for split in data.values():
            assert all(x.y == apply_pattern(s, x.x) for x in split)
            assert all(len(x.x) + len(x.y) + 3 <= 32 for x in split)
        train = {x.x for x in data["train"]}
        assert not train & {x.x for x in data["test"]}
        assert not train & {x.x for x in data["valid"]}

    def test_deterministic(self):
        s = make_similar_stream(2, seed=4).specs[1]
        assert materialize(s) == materialize(s)

    def test_tiny_input_space(self):
        with pytest.raises(ConfigurationError):
            materialize(TaskSpec(0, "copy", (10, 11), seed=0, n_train=500, min_len=1, max_len=2))

    def test_ids_within_vocab(self):
        st = make_similar_stream(5, seed=0)
        for s in st.specs:
            for smp in materialize(s)["train"]:
                toks = smp.tokens(st.vocab)
                assert max(toks) < st.vocab.size and toks[0] == st.vocab.task_token(s.task_id)


def test_vocab_layout():
    v = Vocab(3, 10)
    assert v.size == 17 and v.content(0) == 7 and v.is_content(16) and not v.is_content(6)
    with pytest.raises(ConfigurationError):
        v.task_token(3)


def test_jsonl_roundtrip(tmp_path):
    samples = materialize(make_similar_stream(1, seed=0).specs[0])["valid"]
    path = tmp_path / "t.jsonl"
    write_jsonl(path, samples)
    first = json.loads(path.read_text().splitlines()[0])
    assert set(first) == {"task", "x", "y"}
    assert read_jsonl(path) == samples
