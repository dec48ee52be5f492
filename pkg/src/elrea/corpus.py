"""Instruction/response corpus handling: JSONL IO, synthetic task families,
char-level tokenization.

Sequence layout is BOS + instruction + SEP + response + EOS. Everything up to
and including SEP carries the instruction role; response chars and EOS carry
the response role. Loss masks and gradient-feature masks are both derived
from these roles downstream.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass

import numpy as np

PAD, BOS, EOS, SEP = 0, 1, 2, 3
SPECIALS = ["<pad>", "<bos>", "<eos>", "<sep>"]

ROLE_INSTR = 0
ROLE_RESP = 1

DEFAULT_MAX_LEN = 256


class CorpusError(ValueError):
    pass


class OverLengthError(ValueError):
    """Tokenized sequence would exceed the length budget; caller counts and skips."""


@dataclass
class Example:
    id: str
    instruction: str
    response: str
    source_tag: str = "unknown"


@dataclass
class TokenSequence:
    id: str
    tokens: np.ndarray  # int64, shape (T,)
    roles: np.ndarray  # uint8, shape (T,), ROLE_INSTR / ROLE_RESP

    def __len__(self):
        return int(self.tokens.shape[0])

    @property
    def sep_index(self):
        hits = np.nonzero(self.tokens == SEP)[0]
        if hits.size == 0:
            raise CorpusError(f"{self.id}: sequence has no separator token")
        return int(hits[0])


class Vocab:
    """Fixed char-level vocabulary: 4 specials + the 95 printable ASCII chars."""

    def __init__(self):
        self.symbols = SPECIALS + [chr(c) for c in range(32, 127)]
        self._index = {s: i for i, s in enumerate(self.symbols)}

    def __len__(self):
        return len(self.symbols)

    def encode_char(self, ch):
        try:
            return self._index[ch]
        except KeyError:
            raise KeyError(ch) from None

    def decode_id(self, i):
        return self.symbols[i]

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            for s in self.symbols:
                f.write(json.dumps(s, ensure_ascii=False) + "\n")

    @classmethod
    def load(cls, path):
        with open(path, "r", encoding="utf-8") as f:
            symbols = [json.loads(line) for line in f]
        v = cls()
        if symbols != v.symbols:
            raise CorpusError(f"{path}: symbol list does not match the fixed vocabulary")
        return v


def load_jsonl(path):
    """Read a JSONL instruction file. Errors name the offending 1-based line."""
    examples = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if line.strip() == "" and lineno > 1:
                # allow a single trailing blank line, nothing else
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise CorpusError(f"{path}:{lineno}: malformed JSON ({e.msg})") from None
            if not isinstance(obj, dict):
                raise CorpusError(f"{path}:{lineno}: expected an object")
            instruction = obj.get("instruction")
            if not instruction:
                raise CorpusError(f"{path}:{lineno}: missing or empty instruction")
            response = obj.get("response")
            if response is None:
                raise CorpusError(f"{path}:{lineno}: missing response")
            examples.append(
                Example(
                    id=str(obj.get("id", f"line-{lineno}")),
                    instruction=str(instruction),
                    response=str(response),
                    source_tag=str(obj.get("source_tag", "unknown")),
                )
            )
    if not examples:
        raise CorpusError(f"{path}: no examples")
    return examples


def save_jsonl(path, examples):
    with open(path, "w", encoding="utf-8") as f:
        for ex in examples:
            obj = {
                "id": ex.id,
                "instruction": ex.instruction,
                "response": ex.response,
                "source_tag": ex.source_tag,
            }
            f.write(json.dumps(obj, ensure_ascii=False) + "\n")


# --- synthetic task families ---------------------------------------------
#
# Four keyword-prefixed families over small alphabets, each answerable in a
# few characters and each ending with "= <answer>" so answer extraction is
# uniform. Small alphabets keep the tasks learnable by a tiny model in two
# epochs while the leading keyword keeps instruction gradients separable.

_LETTERS = "abcdefgh"


# Responses carry worked steps before the final "= answer" segment, the way
# instruction-tuned completions pad their answers; instructions stay short.


def _gen_add(rng, i, tag):
    a, b = int(rng.integers(1, 10)), int(rng.integers(1, 10))
    return Example(
        id=f"{tag}-{i:05d}",
        instruction=f"add {a} {b}",
        response=f"{a} + {b} : {b} + {a} : sum = {a + b}",
        source_tag=tag,
    )


def _word(rng, n=3):
    return "".join(_LETTERS[int(k)] for k in rng.integers(0, len(_LETTERS), size=n))


def _gen_reverse(rng, i, tag):
    w = _word(rng)
    r = w[::-1]
    return Example(
        id=f"{tag}-{i:05d}",
        instruction=f"reverse {w}",
        response=f"{w} is {' '.join(w)} reversed {' '.join(r)} = {r}",
        source_tag=tag,
    )


def _gen_sort(rng, i, tag):
    w = _word(rng)
    s = "".join(sorted(w))
    return Example(
        id=f"{tag}-{i:05d}",
        instruction=f"sort {w}",
        response=f"{w} is {' '.join(w)} sorted {' '.join(s)} = {s}",
        source_tag=tag,
    )


def _gen_copy(rng, i, tag):
    w = _word(rng)
    return Example(
        id=f"{tag}-{i:05d}",
        instruction=f"copy {w}",
        response=f"{w} is {' '.join(w)} again {' '.join(w)} = {w}",
        source_tag=tag,
    )


FAMILIES = {
    "add": _gen_add,
    "reverse": _gen_reverse,
    "sort": _gen_sort,
    "copy": _gen_copy,
}


def synth_generate(mix, seed):
    """Generate a synthetic corpus.

    mix is a list of (family, count) pairs or a dict family -> count. Each
    family draws from its own seeded stream, so changing one family's count
    leaves the others' examples unchanged.
    """
    if isinstance(mix, dict):
        mix = list(mix.items())
    out = []
    for tag, count in mix:
        if tag not in FAMILIES:
            raise CorpusError(f"unknown task family {tag!r}")
        gen = FAMILIES[tag]
        rng = np.random.default_rng([seed, zlib.crc32(tag.encode())])
        for i in range(int(count)):
            out.append(gen(rng, i, tag))
    if not out:
        raise CorpusError("empty task mix")
    return out


# --- tokenization --------------------------------------------------------


def _encode_text(vocab, text, example_id):
    ids = []
    for ch in text:
        try:
            ids.append(vocab.encode_char(ch))
        except KeyError:
            raise CorpusError(
                f"{example_id}: character {ch!r} is not in the vocabulary"
            ) from None
    return ids


def tokenize(example, vocab, max_len=DEFAULT_MAX_LEN):
    """Full train-style sequence: BOS + instruction + SEP + response + EOS."""
    instr = _encode_text(vocab, example.instruction, example.id)
    resp = _encode_text(vocab, example.response, example.id)
    n = 1 + len(instr) + 1 + len(resp) + 1
    if n > max_len:
        raise OverLengthError(f"{example.id}: {n} tokens exceeds the {max_len} budget")
    tokens = np.array([BOS] + instr + [SEP] + resp + [EOS], dtype=np.int64)
    roles = np.empty(n, dtype=np.uint8)
    roles[: 2 + len(instr)] = ROLE_INSTR
    roles[2 + len(instr) :] = ROLE_RESP
    return TokenSequence(id=example.id, tokens=tokens, roles=roles)


def tokenize_prompt(example, vocab, max_len=DEFAULT_MAX_LEN):
    """Generation prompt: BOS + instruction + SEP, every position instruction-role."""
    instr = _encode_text(vocab, example.instruction, example.id)
    n = 2 + len(instr)
    if n > max_len:
        raise OverLengthError(f"{example.id}: {n} tokens exceeds the {max_len} budget")
    tokens = np.array([BOS] + instr + [SEP], dtype=np.int64)
    roles = np.full(n, ROLE_INSTR, dtype=np.uint8)
    return TokenSequence(id=example.id, tokens=tokens, roles=roles)


def detokenize(vocab, token_ids):
    """Map generated ids back to text, dropping specials."""
    return "".join(
        vocab.decode_id(int(t)) for t in token_ids if int(t) >= len(SPECIALS)
    )


def extract_answer(text):
    """Answer = text after the final '='. None when no '=' is present."""
    if "=" not in text:
        return None
    return text.rsplit("=", 1)[1].strip()
