"""Closed word-level vocabulary for the synthetic tasks.

Special ids are fixed: ``<pad>`` 0, ``<bot>`` 1, ``<eot>`` 2, ``<eos>`` 3,
``<sys>`` 4, ``<round>`` 5, ``<unk>`` 6.  Template words (the answer prompt
``Answer :`` is ids 7 and 8) come next, then agent-role markers, so tiny
test vocabularies of 16 ids still contain every structural token.
"""
from __future__ import annotations

import json

from .errors import InputError

VOCAB_VERSION = 1
MAX_AGENTS = 8
NUM_ENTITIES = 32

SPECIALS = ["<pad>", "<bot>", "<eot>", "<eos>", "<sys>", "<round>", "<unk>"]
AGENT_MARKERS = [f"<agent{i}>" for i in range(MAX_AGENTS)]
TEMPLATE_WORDS = ["Answer", ":", "?", "hop", "sub"]
DIGITS = [str(i) for i in range(10)]
SYMBOLS = ["+", "-", "*", "=", ";", "->"]
ENTITIES = [f"E{i}" for i in range(NUM_ENTITIES)]


class VocabSpec:
    def __init__(self, tokens):
        if len(set(tokens)) != len(tokens):
            raise InputError("vocabulary tokens must be unique")
        self.tokens = list(tokens)
        self.ids = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    def __eq__(self, other):
        return isinstance(other, VocabSpec) and self.tokens == other.tokens

    def encode(self, words):
        try:
            return [self.ids[w] for w in words]
        except KeyError as exc:
            raise InputError(f"unknown token {exc.args[0]!r}") from None

    def decode(self, ids):
        return [self.tokens[i] for i in ids]

    def __getitem__(self, word):
        return self.ids[word]

    def to_json(self):
        return json.dumps({"format": "hylat-vocab", "version": VOCAB_VERSION,
                           "tokens": self.tokens}, indent=1)

    @classmethod
    def from_json(cls, text):
        obj = json.loads(text)
        if obj.get("format") != "hylat-vocab" or obj.get("version") != VOCAB_VERSION:
            raise InputError("not a hylat vocabulary file of a supported version")
        return cls(obj["tokens"])


VOCAB = VocabSpec(SPECIALS + TEMPLATE_WORDS + AGENT_MARKERS + DIGITS + SYMBOLS + ENTITIES)

PAD = VOCAB["<pad>"]
BOT = VOCAB["<bot>"]
EOT = VOCAB["<eot>"]
EOS = VOCAB["<eos>"]
SYS = VOCAB["<sys>"]
ROUND = VOCAB["<round>"]
DELIMITERS = (BOT, EOT)


def agent_marker(i):
    if not 0 <= i < MAX_AGENTS:
        raise InputError(f"agent index {i} has no role marker (max {MAX_AGENTS})")
    return VOCAB[f"<agent{i}>"]
