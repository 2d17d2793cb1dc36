import numpy as np
import pytest

from tnt.errors import InvalidSpec
from tnt.evaluation import unwanted_rate
from tnt.model import TabularModel
from tnt.synthdata import (
    EOS,
    TaskSpec,
    annotate,
    annotate_pairs,
    build_update_dataset,
    generate_corpus,
    read_corpus,
    read_jsonl,
    write_corpus,
    write_jsonl,
)

SMALL = dict(sizes=(300, 50, 50))


def spec(kind="lexicon", **kw):
    return TaskSpec(kind=kind, **{**SMALL, **kw})


@pytest.mark.parametrize("kind", ["lexicon", "entity-copy"])
class TestCorpus:
    def test_sizes_and_shape(self, kind):
        s = spec(kind, n_unwanted=10) if kind == "entity-copy" else spec(kind)
        corpus = generate_corpus(s)
        assert [len(corpus[k]) for k in ("train", "val", "test")] == [300, 50, 50]
        for inp, out in corpus["train"].pairs:
            assert out[-1] == EOS and EOS not in out[:-1]
            assert all(0 <= t < s.vocab_size for t in inp + out)

    def test_deterministic(self, kind):
        s = spec(kind, n_unwanted=10) if kind == "entity-copy" else spec(kind)
        assert generate_corpus(s)["train"].pairs == generate_corpus(s)["train"].pairs

    def test_splits_differ(self, kind):
        s = spec(kind, n_unwanted=10) if kind == "entity-copy" else spec(kind)
        c = generate_corpus(s)
        assert c["val"].pairs != c["test"].pairs

    def test_clean_corpus_has_no_negatives(self, kind):
        s = spec(kind, corruption_rate=0.0, n_unwanted=10) if kind == "entity-copy" else spec(kind, corruption_rate=0.0)
        for inp, out in generate_corpus(s)["train"].pairs:
            assert annotate(inp, out, s) == []

    def test_fully_corrupt_corpus(self, kind):
        s = spec(kind, corruption_rate=1.0, n_unwanted=10) if kind == "entity-copy" else spec(kind, corruption_rate=1.0)
        for inp, out in generate_corpus(s)["train"].pairs:
            anns = annotate(inp, out, s)
            assert anns
            assert all(a.negative_ids <= set(s.unwanted_ids) for a in anns)


class TestSpec:
    def test_layout_disjoint(self):
        s = TaskSpec()
        groups = [set(s.unwanted_ids), set(s.partner_ids), set(s.trigger_ids), set(s.filler_ids), {0, 1, 2, 3, 4}]
        assert sum(len(g) for g in groups) == s.vocab_size
        assert set().union(*groups) == set(range(s.vocab_size))
        assert not set(s.unwanted_ids) & set(s.vocab.reserved)

    @pytest.mark.parametrize("kw", [dict(corruption_rate=1.5), dict(kind="poetry"), dict(vocab_size=12),
                                    dict(min_len=5, max_len=3), dict(sizes=(1, 0, 1)),
                                    dict(kind="entity-copy", n_unwanted=4)])
    def test_invalid(self, kw):
        with pytest.raises(InvalidSpec):
            TaskSpec(**kw)

    def test_round_trip(self):
        s = spec(corruption_rate=0.3)
        assert TaskSpec.from_dict(s.to_dict()) == s


class TestAnnotate:
    def test_clean_output(self):
        s = TaskSpec()
        assert annotate((20, 21), (20, 21, EOS), s) == []

    def test_entity_absent_from_input(self):
        s = TaskSpec(kind="entity-copy", n_unwanted=10)
        e1, e2, e3 = s.unwanted_ids[:3]
        anns = annotate((e1, e2), (e1, e2, 30, 31, e3, EOS), s)
        assert [(a.position, set(a.negative_ids)) for a in anns] == [(4, {e3})]

    def test_repeated_entity_twice_annotated(self):
        s = TaskSpec(kind="entity-copy", n_unwanted=10)
        e1, e3 = s.unwanted_ids[0], s.unwanted_ids[2]
        assert [a.position for a in annotate((e1,), (e3, e1, e3, EOS), s)] == [0, 2]

    def test_lexicon_ignores_input(self):
        s = TaskSpec()
        bad = s.unwanted_ids[0]
        assert [a.position for a in annotate((bad,), (bad, EOS), s)] == [0]

    def test_consistent_with_rate(self):
        s = spec(corruption_rate=0.3)
        pairs = generate_corpus(s)["val"].pairs
        seqs = annotate_pairs(pairs, s)
        flagged = sum(bool(x.annotations) for x in seqs)
        assert unwanted_rate(seqs, s) == pytest.approx(100 * flagged / len(seqs))
        assert unwanted_rate([o for _, o in pairs], s, inputs=[i for i, _ in pairs]) == unwanted_rate(seqs, s)


class TestUpdateDataset:
    def test_fixed_entity_model(self):
        s = TaskSpec(kind="entity-copy", n_unwanted=10, sizes=(20, 5, 5))
        e3 = s.unwanted_ids[2]
        inputs = [(s.unwanted_ids[0], 25), (e3, 26), (s.unwanted_ids[1],)]
        conds = {}
        m0 = TabularModel(s.vocab, 1)
        for inp in inputs:
            first = np.full(s.vocab_size, 0.0)
            first[e3] = 1.0
            then = np.full(s.vocab_size, 0.0)
            then[EOS] = 1.0
            conds[m0.context_key(inp, [])] = first
            conds[m0.context_key(inp, [e3])] = then
        model = TabularModel.from_conditionals(s.vocab, 1, conds)
        data = build_update_dataset(model, inputs, s)
        assert [x.output for x in data] == [(e3, EOS)] * 3
        assert [bool(x.annotations) for x in data] == [True, False, True]

    def test_outputs_are_generations(self):
        s = spec()
        corpus = generate_corpus(s)["val"]
        model = TabularModel(s.vocab, 1)   # uniform: greedy emits PAD... ties go to id 0
        data = build_update_dataset(model, corpus, s, max_len=3)
        assert all(x.output == (0, 0, 0) for x in data)
        assert [x.input for x in data] == corpus.inputs


class TestFiles:
    def test_jsonl_round_trip(self, tmp_path):
        s = spec(corruption_rate=0.5)
        seqs = annotate_pairs(generate_corpus(s)["test"].pairs, s)
        write_jsonl(seqs, tmp_path / "x.jsonl")
        assert read_jsonl(tmp_path / "x.jsonl") == seqs

    def test_record_format(self, tmp_path):
        s = TaskSpec()
        bad = s.unwanted_ids[0]
        write_jsonl(annotate_pairs([((20, 31), (bad, 20, EOS))], s), tmp_path / "x.jsonl")
        assert (tmp_path / "x.jsonl").read_text() == f'{{"input":[20,31],"output":[{bad},20,2],"neg":[[0,[{bad}]]]}}\n'

    def test_write_corpus_twice_identical(self, tmp_path):
        s = spec()
        a, b = tmp_path / "a", tmp_path / "b"
        a.mkdir()
        b.mkdir()
        assert write_corpus(generate_corpus(s), s, a) == write_corpus(generate_corpus(s), s, b)
        assert (a / "train.jsonl").read_bytes() == (b / "train.jsonl").read_bytes()
        assert read_corpus(a / "val.jsonl").pairs == generate_corpus(s)["val"].pairs

    def test_missing_dir(self, tmp_path):
        s = spec()
        with pytest.raises(FileNotFoundError):
            write_corpus(generate_corpus(s), s, tmp_path / "nope")
