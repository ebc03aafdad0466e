import json
import re

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from refine.data import (BOS, PAD, TaskSample, TokenSequence, decode, decode_bytes, encode,
                         gen_copy_task, gen_corpus, gen_niah, load_corpus, load_tasks, split_windows,
                         write_corpus, write_tasks)


def test_encode_examples():
    assert encode("ab").tolist() == [97, 98]
    assert encode("").tolist() == []
    assert decode([]) == ""


def test_random_kib_round_trips():
    raw = np.random.default_rng(0).integers(0, 256, 1024, dtype=np.uint8).tobytes()
    assert decode_bytes(encode(raw)) == raw


@given(st.binary(max_size=300))
def test_bytes_round_trip(raw):
    assert decode_bytes(encode(raw)) == raw


@given(st.text(max_size=100))
def test_text_round_trip(s):
    assert decode(encode(s)) == s


def test_decode_rejects_out_of_vocab_and_skips_specials():
    with pytest.raises(ValueError):
        decode([97, 300])
    assert decode([BOS, 97, PAD]) == "a"


def test_token_sequence_spans():
    seq = TokenSequence(np.arange(6), prompt_len=2)
    assert seq.has_spans and len(seq.prompt()) == 2
    with pytest.raises(ValueError):
        TokenSequence(np.arange(3), prompt_len=5)


def _write(path, lines):
    path.write_text("".join(lines), encoding="utf-8")
    return path


def test_load_corpus_short_text(tmp_path):
    p = _write(tmp_path / "c.jsonl", [json.dumps({"text": "x" * 10}) + "\n"])
    seqs = list(load_corpus(p, 16, 16))
    assert [len(s) for s in seqs] == [10]


def test_load_corpus_splits_long_text(tmp_path):
    p = _write(tmp_path / "c.jsonl", [json.dumps({"text": "y" * 20}) + "\n"])
    assert [len(s) for s in load_corpus(p, 16, 16)] == [16, 4]


def test_load_corpus_empty_file(tmp_path):
    p = _write(tmp_path / "c.jsonl", [])
    assert list(load_corpus(p, 16)) == []


def test_load_corpus_names_bad_line(tmp_path):
    p = _write(tmp_path / "c.jsonl", [json.dumps({"text": "ok"}) + "\n", "{not json\n"])
    with pytest.raises(ValueError, match=":2:"):
        list(load_corpus(p, 16))


def test_corpus_write_load_is_ordered(tmp_path):
    texts = gen_corpus(5, 40, 3)
    write_corpus(tmp_path / "c.jsonl", texts)
    assert [s.text() for s in load_corpus(tmp_path / "c.jsonl", 64)] == texts


@given(st.integers(1, 200), st.integers(1, 64), st.integers(1, 64))
def test_split_windows_cover_every_token(n, T, stride):
    ids = np.arange(n)
    wins = split_windows(ids, T, stride)
    assert all(0 < len(w) <= T for w in wins)
    assert wins[0][0] == 0
    if stride <= T:
        assert set(np.concatenate(wins).tolist()) == set(range(n))


def test_gen_corpus_lengths_and_determinism():
    a = gen_corpus(4, 100, 0)
    assert a == gen_corpus(4, 100, 0)
    assert all(len(encode(t)) == 100 for t in a)
    assert a != gen_corpus(4, 100, 1)


def test_niah_single_needle():
    task = gen_niah(256, 1, 1, seed=0)
    assert task.prompt.count(task.answer) == 1
    assert re.search(rf"The magic number for \w+ is {task.answer}\.", task.prompt)
    assert task == gen_niah(256, 1, 1, seed=0)


def test_niah_multi_query():
    task = gen_niah(512, 4, 2, seed=3)
    values = task.answer.split(", ")
    assert len(values) == 2 and all(v in task.prompt for v in values)


@given(st.integers(128, 1024), st.integers(0, 10_000))
def test_niah_length_matches_target(length, seed):
    task = gen_niah(length, 1, 1, seed)
    assert abs(len(encode(task.prompt)) - length) <= 0.05 * length


def test_niah_rejects_tiny_haystack():
    with pytest.raises(ValueError):
        gen_niah(64, 8, 1, 0)
    with pytest.raises(ValueError):
        gen_niah(32, 1, 1, 0)


def test_copy_task_examples():
    task = gen_copy_task(4, 8, distractors=0, seed=0)
    assert task.prompt.count(":") == 2 and task.prompt.count(task.answer) == 1
    assert len(encode(task.answer)) == 8
    assert gen_copy_task(4, 8, 3, seed=5) == gen_copy_task(4, 8, 3, seed=5)
    with pytest.raises(ValueError):
        gen_copy_task(0, 8)


def test_task_jsonl_round_trip(tmp_path):
    tasks = [gen_niah(128, 2, 1, seed=s) for s in range(3)] + [gen_copy_task(3, 6, 2, seed=1)]
    write_tasks(tmp_path / "t.jsonl", tasks)
    back = load_tasks(tmp_path / "t.jsonl")
    assert [(t.prompt, t.answer, t.needles) for t in back] == [(t.prompt, t.answer, t.needles) for t in tasks]


def test_task_sequence_labels_prompt_span():
    task = TaskSample("hello ", "world")
    seq = task.to_sequence()
    assert seq.prompt_len == 6 and decode(seq.ids) == "hello world"
    with pytest.raises(ValueError):
        TaskSample("p", "")
