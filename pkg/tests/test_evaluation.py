import csv
import json
import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, strategies as st

import refine.evaluation as ev
from refine.data import TaskSample, encode, gen_corpus
from refine.evaluation import (EvalReport, config_digest, dump_diagnostics, eval_niah_recall, eval_ntp,
                               needle_recall, prompt_logprob, rollout_reward_stats, write_reports)
from refine.model import forward_sequence
from refine.numerics import Array


@pytest.fixture(scope="module")
def seqs():
    return [encode(t) for t in gen_corpus(3, 40, 5)]


def test_eval_ntp_matches_brute_force(small_params, seqs):
    hits = total = 0
    nll = 0.0
    for ids in seqs:
        logits = forward_sequence(small_params, ids).logits.data.astype(np.float64)
        for t in range(len(ids) - 1):
            row = logits[t]
            hits += int(np.argmax(row) == ids[t + 1])
            nll += math.log(np.exp(row - row.max()).sum()) + row.max() - row[ids[t + 1]]
            total += 1
    acc, loss = eval_ntp(small_params, seqs)
    assert acc == hits / total
    assert loss == pytest.approx(nll / total, rel=1e-9)


def test_uniform_logits_give_log_vocab_loss(small_params, seqs):
    head = small_params["head"].data
    flat = small_params.replace({**small_params.tensors, "head": Array(np.zeros_like(head))})
    acc, loss = eval_ntp(flat, seqs)
    assert loss == pytest.approx(math.log(258), abs=1e-6)
    # ties go to token 0, which never appears in text
    assert acc == 0.0


def test_perfect_predictor_scores_one(monkeypatch, small_params, seqs):
    def oracle(params, ids, **_):
        logits = np.full((len(ids), 258), -30.0, dtype=np.float32)
        logits[np.arange(len(ids) - 1), ids[1:]] = 30.0
        return SimpleNamespace(logits=SimpleNamespace(data=logits))

    monkeypatch.setattr(ev, "forward_sequence", oracle)
    acc, loss = eval_ntp(small_params, seqs)
    assert acc == 1.0 and loss < 1e-20


def test_eval_ntp_rejects_empty(small_params):
    with pytest.raises(ValueError):
        eval_ntp(small_params, [np.array([3])])


def test_needle_recall_cases():
    assert needle_recall("abc 123 xyz 456", ["123", "456"]) == 1.0
    assert needle_recall("", ["123"]) == 0.0
    assert needle_recall("value 123", ["123", "456"]) == 0.5
    with pytest.raises(ValueError):
        needle_recall("x", [])


@given(st.lists(st.text("0123456789", min_size=3, max_size=5), min_size=1, max_size=5, unique=True),
       st.text("abcxyz ", max_size=20))
def test_needle_recall_monotone_in_output(values, prefix):
    partial = prefix + values[0]
    full = partial + " " + " ".join(values)
    assert needle_recall(partial, values) <= needle_recall(full, values) == 1.0


def test_niah_recall_counts_greedy_output(monkeypatch, small_params):
    monkeypatch.setattr(ev, "greedy_continue", lambda p, ids, n: encode("the code is 4821 ok"))
    tasks = [TaskSample("where?", "4821", ["4821"]), TaskSample("and?", "9999, 4821")]
    assert eval_niah_recall(small_params, tasks) == pytest.approx(0.75)


def test_prompt_logprob_is_negative_mean(small_params, seqs):
    lp = prompt_logprob(small_params, seqs[0])
    assert lp < 0
    assert lp == pytest.approx(forward_sequence(small_params, seqs[0]).token_logprobs.mean(), rel=1e-5)


def test_eval_report_validates_range(tmp_path):
    with pytest.raises(ValueError):
        EvalReport("niah", "niah_recall", 1.5, 3)
    with pytest.raises(ValueError):
        EvalReport("niah", "ntp_accuracy", 0.5, 0)
    r = EvalReport("heldout", "ntp_loss", 2.5, 10, seed=1, config_digest=config_digest({"a": 1}))
    write_reports(tmp_path / "r.jsonl", [r, r])
    rows = [json.loads(x) for x in (tmp_path / "r.jsonl").read_text().splitlines()]
    assert len(rows) == 2 and rows[0]["value"] == 2.5 and len(rows[0]["config_digest"]) == 12
    assert config_digest({"a": 1, "b": 2}) == config_digest({"b": 2, "a": 1})


def _fake_run(tmp_path, rng, steps=4):
    metrics, rollouts = [], []
    for s in range(1, steps + 1):
        rewards = rng.uniform(-1, 1, size=5)
        metrics.append({"step": s, "reward_mean": float(rewards.mean()), "reward_std": float(rewards.std())})
        rollouts += [{"step": s, "reward": float(r)} for r in rewards]
    (tmp_path / "metrics.jsonl").write_text("".join(json.dumps(m) + "\n" for m in metrics))
    (tmp_path / "rollouts.jsonl").write_text("".join(json.dumps(r) + "\n" for r in rollouts))


def test_dump_diagnostics_consistent_with_rollouts(tmp_path, rng, small_params, seqs):
    _fake_run(tmp_path, rng)
    paths = dump_diagnostics(tmp_path / "metrics.jsonl", tmp_path / "out", small_params, seqs[0])
    with open(paths[0]) as fh:
        series = list(csv.DictReader(fh))
    assert len(series) == 4
    stats = rollout_reward_stats(tmp_path / "rollouts.jsonl")
    for row in series:
        mean, std = stats[int(row["step"])]
        assert float(row["reward_mean"]) == pytest.approx(mean, abs=1e-12)
        assert float(row["reward_std"]) == pytest.approx(std, abs=1e-12)
    with open(paths[1]) as fh:
        prof = list(csv.DictReader(fh))
    assert len(prof) == len(seqs[0])
    assert all(0 <= float(r["entropy"]) <= math.log(258) + 1e-6 for r in prof)


def test_dump_diagnostics_missing_input(tmp_path):
    with pytest.raises(FileNotFoundError):
        dump_diagnostics(tmp_path / "nope.jsonl", tmp_path / "out")
