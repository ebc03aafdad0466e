"""Byte-level tokenisation, JSONL corpora and synthetic long-context tasks."""

from __future__ import annotations

import json
import string
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

BYTE_VOCAB = 256
BOS = 256
PAD = 257
VOCAB_SIZE = 258


# --------------------------------------------------------------- tokenizer

@dataclass
class TokenSequence:
    """Token ids with optional provenance and a prompt/response split.

    ``prompt_len`` marks the prompt span ``[0, prompt_len)``; the response
    span is the remainder.
    """

    ids: np.ndarray
    source: str = ""
    prompt_len: int | None = None

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64).reshape(-1)
        if self.ids.size and (self.ids.min() < 0 or self.ids.max() >= VOCAB_SIZE):
            raise ValueError("TokenSequence ids must lie in [0, 258)")
        if self.prompt_len is not None and not 0 <= self.prompt_len <= len(self.ids):
            raise ValueError(f"prompt_len {self.prompt_len} outside [0, {len(self.ids)}]")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def has_spans(self) -> bool:
        return self.prompt_len is not None

    def prompt(self) -> TokenSequence:
        if self.prompt_len is None:
            raise ValueError("sequence has no span labels")
        return TokenSequence(self.ids[:self.prompt_len], self.source)

    def text(self) -> str:
        return decode(self.ids)


def encode(text: str | bytes) -> np.ndarray:
    """UTF-8 bytes of ``text`` as token ids (no BOS)."""
    raw = text if isinstance(text, bytes) else text.encode("utf-8", "surrogateescape")
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


def decode_bytes(ids) -> bytes:
    """Inverse of :func:`encode` on raw bytes; special tokens are dropped."""
    ids = np.asarray(ids, dtype=np.int64).reshape(-1)
    if ids.size and (ids.min() < 0 or ids.max() >= VOCAB_SIZE):
        bad = ids[(ids < 0) | (ids >= VOCAB_SIZE)][0]
        raise ValueError(f"token id {bad} outside vocabulary of size {VOCAB_SIZE}")
    return ids[ids < BYTE_VOCAB].astype(np.uint8).tobytes()


def decode(ids) -> str:
    # surrogateescape keeps decode(encode(s)) lossless for any byte string
    return decode_bytes(ids).decode("utf-8", "surrogateescape")


# ------------------------------------------------------------------ corpora

def _read_jsonl(path) -> Iterator[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise ValueError(f"{path}:{lineno}: expected a JSON object")
            yield lineno, obj


def split_windows(ids: np.ndarray, max_seq_len: int, stride: int) -> list[np.ndarray]:
    if max_seq_len < 1 or stride < 1:
        raise ValueError("max_seq_len and stride must be >= 1")
    if len(ids) <= max_seq_len:
        return [ids] if len(ids) else []
    out = []
    start = 0
    while start < len(ids):
        out.append(ids[start:start + max_seq_len])
        if start + max_seq_len >= len(ids):
            break
        start += stride
    return out


def load_corpus(path, max_seq_len: int, stride: int | None = None) -> Iterator[TokenSequence]:
    """Stream token sequences from a JSONL file of ``{"text": ...}`` records.

    Texts longer than ``max_seq_len`` are cut into windows starting every
    ``stride`` tokens (default: non-overlapping).
    """
    stride = stride or max_seq_len
    for lineno, obj in _read_jsonl(path):
        if not isinstance(obj.get("text"), str):
            raise ValueError(f"{path}:{lineno}: record has no string 'text' field")
        for n, window in enumerate(split_windows(encode(obj["text"]), max_seq_len, stride)):
            yield TokenSequence(window, f"{path}:{lineno}#{n}")


def write_corpus(path, texts) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for text in texts:
            fh.write(json.dumps({"text": text}) + "\n")


# ---------------------------------------------------------- synthetic tasks

@dataclass
class TaskSample:
    prompt: str
    answer: str
    needles: list[str] = field(default_factory=list)
    context_len: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.answer:
            raise ValueError("TaskSample answer must be non-empty")

    def to_sequence(self) -> TokenSequence:
        """Prompt followed by answer, with the prompt span labelled."""
        p, a = encode(self.prompt), encode(self.answer)
        return TokenSequence(np.concatenate([p, a]), self.meta.get("task", ""), len(p))

    def to_json(self) -> dict:
        meta = dict(self.meta, needles=self.needles, context_len=self.context_len)
        return {"prompt": self.prompt, "answer": self.answer, "meta": meta}

    @classmethod
    def from_json(cls, obj: dict) -> TaskSample:
        meta = dict(obj.get("meta") or {})
        needles = meta.pop("needles", [])
        ctx = meta.pop("context_len", len(encode(obj["prompt"])))
        return cls(obj["prompt"], obj["answer"], needles, ctx, meta)


def write_tasks(path, tasks) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for task in tasks:
            fh.write(json.dumps(task.to_json()) + "\n")


def load_tasks(path) -> list[TaskSample]:
    tasks = []
    for lineno, obj in _read_jsonl(path):
        if not isinstance(obj.get("prompt"), str) or not isinstance(obj.get("answer"), str):
            raise ValueError(f"{path}:{lineno}: task needs string 'prompt' and 'answer'")
        tasks.append(TaskSample.from_json(obj))
    return tasks


SENTENCE_BANK = (
    "The grass is green and the sky is wide.",
    "A river runs past the old mill every morning.",
    "She packed a lunch and walked to the hill.",
    "Clouds drift slowly over the quiet town.",
    "The baker opens the shop before sunrise.",
    "Children play near the fountain in the park.",
    "An old map hangs on the wall of the inn.",
    "The train leaves the station at noon.",
    "Leaves fall softly when the wind turns cold.",
    "He wrote a long letter to his brother.",
    "The market is busy on the first day of the week.",
    "A small boat waits by the wooden pier.",
    "Birds sing in the tall trees behind the house.",
    "The library keeps its doors open late in winter.",
    "Snow covers the road that leads to the farm.",
    "They watched the stars from the roof.",
    "The teacher reads a story to the class.",
    "A cat sleeps in the warm light of the window.",
    "Fresh bread smells sweet in the kitchen.",
    "The bridge was built from stone and iron.",
    "Rain taps gently on the glass at night.",
    "The garden is full of roses and tall weeds.",
    "A lantern glows at the end of the lane.",
    "The fisherman mends his net on the shore.",
)

KEY_WORDS = (
    "apple", "beacon", "cobalt", "dune", "ember", "falcon", "garnet", "harbor", "iris",
    "jasper", "kettle", "lotus", "maple", "nectar", "onyx", "pepper", "quartz", "raven",
    "saffron", "tundra", "umber", "violet", "willow", "yarrow", "zephyr", "acorn", "birch",
    "cedar", "delta", "fjord", "glacier", "hazel",
)


def _filler(rng: np.random.Generator, n_chars: int) -> list[str]:
    """Sentences from the bank, cycled in seeded shuffled order, totalling >= n_chars."""
    out, total = [], 0
    order = rng.permutation(len(SENTENCE_BANK))
    i = 0
    while total < n_chars:
        if i == len(order):
            order, i = rng.permutation(len(SENTENCE_BANK)), 0
        s = SENTENCE_BANK[order[i]]
        out.append(s)
        total += len(s) + 1
        i += 1
    return out


def _trim_join(sentences: list[str], budget: int) -> str:
    text = " ".join(sentences)
    return text[:budget]


def gen_corpus(n_seqs: int, seq_len: int, seed: int) -> list[str]:
    """Filler documents of exactly ``seq_len`` bytes, for desk-scale mid-training."""
    rng = np.random.default_rng(seed)
    return [_trim_join(_filler(rng, seq_len), seq_len) for _ in range(n_seqs)]


def _unique_values(rng, n, width=6) -> list[str]:
    seen: set[str] = set()
    while len(seen) < n:
        seen.add("".join(str(d) for d in rng.integers(0, 10, size=width)))
    vals = sorted(seen)
    return [vals[i] for i in rng.permutation(n)]


def gen_niah(haystack_len: int, n_needles: int = 1, n_queries: int = 1, seed: int = 0) -> TaskSample:
    """Key-value needles hidden in filler text, queried at the end.

    The prompt is exactly ``haystack_len`` bytes long. The answer lists the
    queried values separated by ``", "``.
    """
    if haystack_len < 64:
        raise ValueError("gen_niah needs haystack_len >= 64")
    if n_needles < 1 or n_queries < 1:
        raise ValueError("gen_niah needs n_needles >= 1 and n_queries >= 1")
    if n_queries > n_needles:
        raise ValueError("gen_niah cannot query more keys than there are needles")
    if n_needles > len(KEY_WORDS):
        raise ValueError(f"gen_niah supports at most {len(KEY_WORDS)} needles")
    rng = np.random.default_rng(seed)
    keys = [KEY_WORDS[i] for i in rng.choice(len(KEY_WORDS), n_needles, replace=False)]
    values = _unique_values(rng, n_needles)
    needles = [f"The magic number for {k} is {v}." for k, v in zip(keys, values)]
    asked = sorted(rng.choice(n_needles, n_queries, replace=False).tolist())
    if n_queries == 1:
        question = f" What is the magic number for {keys[asked[0]]}? Answer: "
    else:
        question = " What are the magic numbers for " + ", ".join(keys[i] for i in asked) + "? Answer: "
    fixed = sum(len(n) + 1 for n in needles) + len(question)
    budget = haystack_len - fixed
    if budget < 0:
        raise ValueError(f"haystack_len {haystack_len} too small for {n_needles} needles")
    filler_text = _trim_join(_filler(rng, budget), budget)
    # needles go at sentence starts so the filler around them stays readable
    starts = [0] + [i + 1 for i, ch in enumerate(filler_text) if ch == "." and i + 1 < len(filler_text)]
    positions = np.sort(rng.choice(starts, size=n_needles))
    pieces: list[str] = []
    cursor = 0
    for needle, pos in zip(needles, positions):
        pieces.append(filler_text[cursor:pos])
        pieces.append(needle + " ")
        cursor = int(pos)
    pieces.append(filler_text[cursor:])
    prompt = "".join(pieces) + question
    answer = ", ".join(values[i] for i in asked)
    return TaskSample(prompt, answer, [values[i] for i in asked], len(encode(prompt)),
                      {"task": "niah", "keys": [keys[i] for i in asked], "seed": seed})


_PAYLOAD_CHARS = string.ascii_uppercase + string.digits


def gen_copy_task(key_len: int, payload_len: int, distractors: int = 0, seed: int = 0,
                  repeats: int = 1) -> TaskSample:
    """Keyed payload lines followed by a request to reproduce one payload.

    Keys are lowercase, payloads uppercase/digits; the target line is written
    ``repeats`` times.
    """
    if key_len < 1 or payload_len < 1 or distractors < 0 or repeats < 1:
        raise ValueError("gen_copy_task needs key_len, payload_len, repeats >= 1 and distractors >= 0")
    rng = np.random.default_rng(seed)
    n = distractors + 1
    while True:
        keys = ["".join(rng.choice(list(string.ascii_lowercase), key_len)) for _ in range(n)]
        payloads = ["".join(rng.choice(list(_PAYLOAD_CHARS), payload_len)) for _ in range(n)]
        if len(set(keys)) < n or len(set(payloads)) < n:
            continue
        target = payloads[0]
        if any(target in p for p in payloads[1:]) or any(keys[0] in k for k in keys[1:]):
            continue
        break
    lines = [f"key {k}: {p}\n" for k, p in zip(keys, payloads)]
    lines += [lines[0]] * (repeats - 1)
    order = rng.permutation(len(lines))
    body = "".join(lines[i] for i in order)
    prompt = body + f"repeat the payload for key {keys[0]}: "
    return TaskSample(prompt, target, [target], len(encode(prompt)),
                      {"task": "copy", "key": keys[0], "seed": seed})
