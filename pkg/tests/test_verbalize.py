import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from icl_dynamics import (
    TEMPLATES,
    TaskDataset,
    TemplateSpec,
    assemble,
    build_prompt,
    load_dataset,
    render_example,
    save_dataset,
)
from icl_dynamics.errors import AssemblyError, DatasetError, TemplateError

from conftest import make_sentiment_dataset


class TestRenderExample:
    def test_single_sentence_template(self):
        out = render_example(TEMPLATES["single"], "I am happy", "positive")
        assert out == "Sentence: 'I am happy'\nAnswer: positive\n\n"

    def test_question_pair_template(self):
        out = render_example(TEMPLATES["question_pair"], ("Q1 text", "Q2 text"), "yes")
        assert out == "Question 1: 'Q1 text'\nQuestion 2: 'Q2 text'\nAnswer: yes\n\n"

    def test_sentence_pair_template(self):
        out = render_example(TEMPLATES["sentence_pair"], ("A b.", "C d."), "no")
        assert out == "Sentence 1: 'A b.'\nSentence 2: 'C d.'\nAnswer: no\n\n"

    def test_empty_input_substitutes(self):
        out = render_example(TEMPLATES["single"], "", "negative")
        assert out == "Sentence: ''\nAnswer: negative\n\n"

    def test_arity_mismatch_raises(self):
        with pytest.raises(TemplateError):
            render_example(TEMPLATES["single"], ("a", "b"), "positive")
        with pytest.raises(TemplateError):
            render_example(TEMPLATES["question_pair"], "only one", "yes")

    def test_example_is_query_plus_label(self):
        tpl = TEMPLATES["single"]
        q = tpl.render_query("some text")
        assert tpl.render_example("some text", "positive") == q + " positive" + tpl.separator
        assert q.endswith(tpl.label_cue)
        assert not q.endswith(" ")

    def test_label_cue_variant(self):
        tpl = TemplateSpec("Sentence: '{text}'\nLabel:", label_cue="Label:")
        assert tpl.render_example("x", "positive") == "Sentence: 'x'\nLabel: positive\n\n"

    def test_bad_templates_rejected(self):
        with pytest.raises(TemplateError):
            TemplateSpec("Sentence: '{text}'\nAnswer: trailing ")
        with pytest.raises(TemplateError):
            TemplateSpec("Answer: {text} Answer:")


class TestDataset:
    def test_validations(self):
        with pytest.raises(DatasetError):
            TaskDataset((), ("only",), (1.0,))
        with pytest.raises(DatasetError):
            TaskDataset(((("x",), 5),), ("a", "b"), (0.5, 0.5))
        with pytest.raises(DatasetError):
            TaskDataset(((("x",), 0),), ("a", "b"), (0.6, 0.6))
        with pytest.raises(DatasetError):
            TaskDataset(((("x",), 0),), ("a", "a"), (0.5, 0.5))

    def test_empirical_frequencies(self):
        ds = TaskDataset.from_examples(
            [(("x",), 0), (("y",), 0), (("z",), 1), (("w",), 0)], ("a", "b")
        )
        assert ds.class_frequencies == (0.75, 0.25)

    def test_file_round_trip(self, tmp_path):
        ds = make_sentiment_dataset(4)
        path = tmp_path / "task.jsonl"
        save_dataset(ds, path)
        back = load_dataset(path)
        assert back.examples == ds.examples
        assert back.class_names == ds.class_names
        assert back.class_frequencies == ds.class_frequencies

    def test_load_accepts_label_names_and_pairs(self, tmp_path):
        path = tmp_path / "pairs.jsonl"
        lines = [
            {"class_names": ["no", "yes"]},
            {"text1": "a", "text2": "b", "label": "yes"},
            {"text1": "c", "text2": "d", "label": 0},
        ]
        path.write_text("\n".join(json.dumps(l) for l in lines))
        ds = load_dataset(path)
        assert ds.examples == ((("a", "b"), 1), (("c", "d"), 0))

    def test_load_rejects_missing_fields(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"class_names": ["a", "b"]}\n{"label": 0}\n')
        with pytest.raises(DatasetError):
            load_dataset(path)


class TestAssemble:
    def test_two_examples_two_label_spans(self, sentiment_dataset, single_template):
        asm = assemble(sentiment_dataset, [0, 1], [0, 1], single_template)
        assert len(asm.segments) == 2
        assert asm.label_text(0) == "negative"
        assert asm.label_text(1) == "positive"
        assert asm.text.endswith("\n\n")

    def test_prompt_span_covers_prefix(self, sentiment_dataset, single_template):
        prompt = build_prompt("instruct", sentiment_dataset.class_names)
        assert prompt == (
            "In the following, negative means positive and positive means negative. "
        )
        asm = assemble(sentiment_dataset, [0, 1], [0, 1], single_template, prompt=prompt)
        assert asm.prompt_span == (0, len(prompt))
        assert asm.text.startswith(prompt)
        assert asm.segments[0].start == len(prompt)

    def test_permutation_same_segment_multiset(self, sentiment_dataset, single_template):
        a = assemble(sentiment_dataset, [3, 1, 2], [0, 0, 0], single_template)
        b = assemble(sentiment_dataset, [1, 2, 3], [0, 0, 0], single_template)
        assert a.text != b.text
        blocks_a = sorted(a.text[s.start : s.end] for s in a.segments)
        blocks_b = sorted(b.text[s.start : s.end] for s in b.segments)
        assert blocks_a == blocks_b

    def test_segments_contiguous_and_cover(self, sentiment_dataset, single_template):
        asm = assemble(sentiment_dataset, [0, 2, 4], [0, 1, 0], single_template)
        assert asm.segments[0].start == 0
        for left, right in zip(asm.segments, asm.segments[1:]):
            assert left.end == right.start
        assert asm.segments[-1].end == len(asm.text)

    def test_empty_order_raises(self, sentiment_dataset, single_template):
        with pytest.raises(AssemblyError):
            assemble(sentiment_dataset, [], [], single_template)

    def test_duplicate_order_raises(self, sentiment_dataset, single_template):
        with pytest.raises(AssemblyError):
            assemble(sentiment_dataset, [0, 0], [0, 0], single_template)

    def test_label_arity_checked(self, sentiment_dataset, single_template):
        with pytest.raises(AssemblyError):
            assemble(sentiment_dataset, [0, 1], [0], single_template)

    def test_deterministic(self, sentiment_dataset, single_template):
        a = assemble(sentiment_dataset, [0, 1, 2], [0, 1, 0], single_template)
        b = assemble(sentiment_dataset, [0, 1, 2], [0, 1, 0], single_template)
        assert a == b

    @given(
        order=st.permutations(list(range(8))),
        labels=st.lists(st.integers(0, 1), min_size=8, max_size=8),
    )
    @settings(max_examples=30, deadline=None)
    def test_round_trip_label_spans(self, order, labels):
        ds = make_sentiment_dataset(8)
        asm = assemble(ds, order[:8], labels, TEMPLATES["single"])
        for seg, lab in zip(asm.segments, labels):
            assert asm.text[seg.label_start : seg.label_end] == ds.class_names[lab]
            # pre-label span ends with the cue plus one space
            assert asm.text[seg.start : seg.label_start].endswith("Answer: ")


class TestPromptRegistry:
    def test_three_kinds(self):
        names = ("negative", "positive")
        assert "negative means positive" in build_prompt("instruct", names)
        assert build_prompt("ignore", names) == "In the following, ignore all prior knowledge. "
        assert build_prompt("invert", names) == "In the following, flip the meaning for all answers. "

    def test_instruct_substitutes_task_labels(self):
        fp = ("negative", "neutral", "positive")
        out = build_prompt("instruct", fp)
        assert out == (
            "In the following, negative means neutral, neutral means positive "
            "and positive means negative. "
        )

    def test_unknown_kind(self):
        with pytest.raises(TemplateError):
            build_prompt("nope", ("a", "b"))
