"""Deterministic synthetic datasets with machine-checkable answers.

Stage-1 samples pair a question ``x`` with a step-by-step elaboration ``e``
and a short answer ``y``.  Stage-2 dialogues come in two shapes:

* refinement: every agent answers the same question; round-1 labels are
  corrupted with probability ``error_rate`` and the last round is correct;
  the default corruption is a systematic off-by-one slip on the final value,
  so a weak agent errs the same way on the same question;
* decomposition: a two-hop lookup split into per-agent sub-questions, then
  synthesised in round 2.

All token sequences are lists of vocabulary ids.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError
from .vocab import VOCAB


@dataclass(frozen=True)
class ChainArithmetic:
    steps: int = 2
    modulus: int = 10
    ops: str = "+-*"

    @property
    def name(self):
        return "chain" if self.modulus == 10 else f"chain_m{self.modulus}"

    def __post_init__(self):
        if self.steps < 1 or not 2 <= self.modulus <= 10 or not set(self.ops) <= set("+-*"):
            raise InputError(f"invalid ChainArithmetic parameters: {self}")


@dataclass(frozen=True)
class MultiHopLookup:
    hops: int = 3
    kb_size: int = 32
    name = "multihop"

    def __post_init__(self):
        if self.hops < 1 or not 2 * (self.hops + 1) <= self.kb_size <= len(ENTITY_IDS):
            raise InputError(f"invalid MultiHopLookup parameters: {self}")


@dataclass
class Stage1Sample:
    x: list
    e: list
    y: list
    family: str = ""
    turns: list | None = None  # optional [(x, e, y), ...] for multi-turn dialogues

    def __post_init__(self):
        if not self.y:
            raise InputError("Stage1Sample.y must be nonempty")
        if not self.e:
            raise InputError("Stage1Sample.e must be nonempty")

    def turn_list(self):
        return self.turns if self.turns else [(self.x, self.e, self.y)]


@dataclass
class Stage2Dialogue:
    """labels[t][i] = (elaboration, answer) for round t, agent i."""

    x1: list
    num_agents: int
    num_turns: int
    labels: list
    agent_contexts: list | None = None  # per-agent round-1 context overriding x1
    family: str = ""
    question: list = field(default_factory=list)  # tokens the answer oracle checks against

    def __post_init__(self):
        if self.num_turns < 2:
            raise InputError("Stage2Dialogue needs at least two turns")
        if len(self.labels) != self.num_turns or any(len(r) != self.num_agents for r in self.labels):
            raise InputError("labels must be complete for every (turn, agent)")

    def context_for(self, agent):
        return self.agent_contexts[agent] if self.agent_contexts else self.x1


# --- token helpers -----------------------------------------------------------------
def _ids(*words):
    return VOCAB.encode(words)


DIGIT_IDS = _ids(*[str(i) for i in range(10)])
ENTITY_IDS = [VOCAB[f"E{i}"] for i in range(32)]
OP_IDS = {"+": VOCAB["+"], "-": VOCAB["-"], "*": VOCAB["*"]}
EQ, SEMI, ARROW, QMARK, HOP, SUB = _ids("=", ";", "->", "?", "hop", "sub")


def _apply(op, a, b, m):
    if op == "+":
        return (a + b) % m
    if op == "-":
        return (a - b) % m
    return (a * b) % m


# --- chain arithmetic -------------------------------------------------------------------
def _chain_question(fam, rng):
    nums = [int(rng.integers(fam.modulus)) for _ in range(fam.steps + 1)]
    ops = [fam.ops[int(rng.integers(len(fam.ops)))] for _ in range(fam.steps)]
    return nums, ops


def _chain_tokens(fam, nums, ops, wrong_last=None):
    x, e, acc = [DIGIT_IDS[nums[0]]], [], nums[0]
    for i, op in enumerate(ops):
        x += [OP_IDS[op], DIGIT_IDS[nums[i + 1]]]
        res = _apply(op, acc, nums[i + 1], fam.modulus)
        if wrong_last is not None and i == len(ops) - 1:
            res = wrong_last
        if e:
            e.append(SEMI)
        e += [DIGIT_IDS[acc], OP_IDS[op], DIGIT_IDS[nums[i + 1]], EQ, DIGIT_IDS[res]]
        acc = res
    return x + [QMARK], e, [DIGIT_IDS[acc]]


# --- multi-hop lookup -------------------------------------------------------------------
def _multihop_question(fam, rng):
    ents = rng.permutation(fam.kb_size)[: 2 * (fam.hops + 1)]
    chain = [int(v) for v in ents[: fam.hops + 1]]
    rest = [int(v) for v in ents[fam.hops + 1:]]
    facts = [(chain[i], chain[i + 1]) for i in range(fam.hops)]
    distract = [(rest[i], rest[i + 1]) for i in range(fam.hops)]
    order = rng.permutation(len(facts) + len(distract))
    all_facts = facts + distract
    return chain, [all_facts[int(i)] for i in order]


def _facts_tokens(facts):
    out = []
    for a, b in facts:
        if out:
            out.append(SEMI)
        out += [ENTITY_IDS[a], ARROW, ENTITY_IDS[b]]
    return out


def _multihop_tokens(fam, chain, facts, wrong_last=None):
    x = _facts_tokens(facts) + [QMARK, ENTITY_IDS[chain[0]], HOP, DIGIT_IDS[fam.hops]]
    path = list(chain)
    if wrong_last is not None:
        path[-1] = wrong_last
    e = _facts_tokens([(path[i], path[i + 1]) for i in range(fam.hops)])
    return x, e, [ENTITY_IDS[path[-1]]]


# --- generators ---------------------------------------------------------------------------
def _rng(seed, tag):
    digest = hashlib.sha256(f"{tag}:{seed}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def gen_stage1(family, seed, count):
    """``count`` deterministic (x, e, y) samples of ``family``."""
    rng = _rng(seed, f"stage1:{family}")
    out = []
    for _ in range(count):
        if isinstance(family, ChainArithmetic):
            x, e, y = _chain_tokens(family, *_chain_question(family, rng))
        elif isinstance(family, MultiHopLookup):
            x, e, y = _multihop_tokens(family, *_multihop_question(family, rng))
        else:
            raise InputError(f"unsupported stage-1 family {family!r}")
        out.append(Stage1Sample(x, e, y, family=family.name))
    return out


WRONG_VALUE_MODES = ("shift", "uniform")


def gen_refinement(family, seed, count, error_rate, num_agents=2, wrong_value="shift"):
    """Two-round dialogues; round-1 labels wrong w.p. ``error_rate`` per agent.

    ``wrong_value`` picks the corrupted final value: "shift" uses the next value
    modulo the answer range, "uniform" draws any wrong value.
    """
    if not 0.0 <= error_rate <= 1.0:
        raise InputError("error_rate must lie in [0, 1]")
    if wrong_value not in WRONG_VALUE_MODES:
        raise InputError(f"wrong_value must be one of {WRONG_VALUE_MODES}")
    rng = _rng(seed, f"refine:{family}:{error_rate}:{num_agents}")
    out = []
    for _ in range(count):
        if isinstance(family, ChainArithmetic):
            q = _chain_question(family, rng)
            x, e, y = _chain_tokens(family, *q)
            n_values = family.modulus
            true_last = DIGIT_IDS.index(y[0])
        elif isinstance(family, MultiHopLookup):
            q = _multihop_question(family, rng)
            x, e, y = _multihop_tokens(family, *q)
            n_values = family.kb_size
            true_last = q[0][-1]
        else:
            raise InputError(f"unsupported refinement family {family!r}")
        round1 = []
        for _i in range(num_agents):
            if rng.random() < error_rate:
                if wrong_value == "shift":
                    wrong = (true_last + 1) % n_values
                else:
                    wrong = int(rng.integers(n_values - 1))
                    wrong += wrong >= true_last
                build = _chain_tokens if isinstance(family, ChainArithmetic) else _multihop_tokens
                _, ew, yw = build(family, *q, wrong_last=wrong)
                round1.append((ew, yw))
            else:
                round1.append((list(e), list(y)))
        final = [(list(e), list(y)) for _ in range(num_agents)]
        out.append(Stage2Dialogue(x, num_agents, 2, [round1, final],
                                  family=family.name, question=list(x)))
    return out


def gen_decomposition(seed, count, kb_size=32):
    """Two agents split a 2-hop lookup: agent 0 resolves hop 1, agent 1 hop 2."""
    if kb_size < 7 or kb_size > len(ENTITY_IDS):
        raise InputError("kb_size must lie in [7, 32]")
    rng = _rng(seed, f"decomp:{kb_size}")
    out = []
    for _ in range(count):
        ents = [int(v) for v in rng.permutation(kb_size)[:7]]
        a, b, c = ents[:3]
        d1, d2, d3, d4 = ents[3:]
        hop1 = [(a, b), (d1, d2)]
        hop2 = [(b, c), (d3, d4)]
        if rng.random() < 0.5:
            hop1.reverse()
        if rng.random() < 0.5:
            hop2.reverse()
        main_q = [QMARK, ENTITY_IDS[a], HOP, DIGIT_IDS[2]]
        ctx0 = _facts_tokens(hop1) + main_q + [SUB, ENTITY_IDS[a]]
        ctx1 = _facts_tokens(hop2) + main_q + [SUB, ENTITY_IDS[b]]
        r1 = [(_facts_tokens([(a, b)]), [ENTITY_IDS[b]]),
              (_facts_tokens([(b, c)]), [ENTITY_IDS[c]])]
        r2 = [(_facts_tokens([(a, b), (b, c)]), [ENTITY_IDS[c]]) for _ in range(2)]
        question = _facts_tokens(hop1 + hop2) + main_q
        out.append(Stage2Dialogue(main_q, 2, 2, [r1, r2], agent_contexts=[ctx0, ctx1],
                                  family="decomposition", question=question))
    return out


# --- answer oracle ----------------------------------------------------------------------
def solve(family, question):
    """Recompute the answer tokens of a generated question from its tokens."""
    words = VOCAB.decode(question)
    try:
        if isinstance(family, ChainArithmetic) or str(family).startswith("chain"):
            if isinstance(family, ChainArithmetic):
                m = family.modulus
            else:
                m = int(family[len("chain_m"):]) if family != "chain" else 10
            body = words[: words.index("?")]
            acc = int(body[0])
            for op, num in zip(body[1::2], body[2::2]):
                acc = _apply(op, acc, int(num), m)
            if len(body) % 2 == 0:
                raise ValueError("dangling operator")
            return [DIGIT_IDS[acc]]
        if family in ("multihop", "decomposition") or isinstance(family, MultiHopLookup):
            q = words.index("?")
            graph = {}
            fact_words = words[:q]
            for i in range(0, len(fact_words), 4):
                src, arrow, dst = fact_words[i: i + 3]
                if arrow != "->":
                    raise ValueError("malformed fact")
                graph[src] = dst
            node, hops = words[q + 1], int(words[q + 3])
            for _ in range(hops):
                node = graph[node]
            return [VOCAB[node]]
    except (ValueError, IndexError, KeyError) as exc:
        raise LookupError(f"question not recognised for family {family!r}: {exc}") from None
    raise LookupError(f"unknown family {family!r}")


def evaluate_answer(family, question, answer):
    """Exact match of ``answer`` against the recomputed answer."""
    return list(answer) == solve(family, question)


# --- dataset files ------------------------------------------------------------------------
DATASET_VERSION = 1


def _words(ids):
    return VOCAB.decode(ids)


def sample_to_json(s):
    if isinstance(s, Stage1Sample):
        obj = {"x": _words(s.x), "e": _words(s.e), "y": _words(s.y), "family": s.family}
        if s.turns:
            obj["turns"] = [[_words(a), _words(b), _words(c)] for a, b, c in s.turns]
        return obj
    obj = {"x1": _words(s.x1), "num_agents": s.num_agents, "num_turns": s.num_turns,
           "labels": [[[_words(e), _words(y)] for e, y in row] for row in s.labels],
           "family": s.family, "question": _words(s.question)}
    if s.agent_contexts:
        obj["agent_contexts"] = [_words(c) for c in s.agent_contexts]
    return obj


def sample_from_json(obj):
    enc = VOCAB.encode
    if "x1" in obj:
        return Stage2Dialogue(
            enc(obj["x1"]), obj["num_agents"], obj["num_turns"],
            [[(enc(e), enc(y)) for e, y in row] for row in obj["labels"]],
            agent_contexts=[enc(c) for c in obj["agent_contexts"]] if obj.get("agent_contexts") else None,
            family=obj.get("family", ""), question=enc(obj.get("question", [])))
    turns = [(enc(a), enc(b), enc(c)) for a, b, c in obj["turns"]] if obj.get("turns") else None
    return Stage1Sample(enc(obj["x"]), enc(obj["e"]), enc(obj["y"]), obj.get("family", ""), turns)


def dumps_dataset(samples, header):
    """JSON-lines text: one header object, then one sample per line."""
    head = {"format": "hylat-dataset", "version": DATASET_VERSION, "count": len(samples)}
    head.update(header)
    lines = [json.dumps(head, sort_keys=True)]
    lines += [json.dumps(sample_to_json(s), sort_keys=True) for s in samples]
    return "\n".join(lines) + "\n"


def loads_dataset(text):
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise InputError("empty dataset file")
    header = json.loads(lines[0])
    if header.get("format") != "hylat-dataset" or header.get("version") != DATASET_VERSION:
        raise InputError("not a hylat dataset file of a supported version")
    return header, [sample_from_json(json.loads(ln)) for ln in lines[1:]]


def family_from_spec(name, **params):
    if name == "chain":
        return ChainArithmetic(**params)
    if name == "multihop":
        return MultiHopLookup(**params)
    raise InputError(f"unknown task family {name!r}")
