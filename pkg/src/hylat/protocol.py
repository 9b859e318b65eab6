"""Dual-channel message format, per-round context assembly and wire codec.

A hybrid message renders as ``<bot> z_1 .. z_k <eot> y_1 .. y_m``.  Text-only
messages carry no latent block and render as their tokens alone.

Context template (all constant):

* an agent's round-1 context is ``<sys>`` followed by its question tokens;
* each later round appends ``<round>``, then for every peer in ascending
  sender order ``<agentJ>`` followed by the peer's rendered message.

So assembling ``P`` peer messages adds ``1 + P`` template tokens.
"""
from __future__ import annotations

import base64
import enum
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import CapacityError, CodecError, InputError, ProtocolError
from .vocab import BOT, EOT, ROUND, SYS, VOCAB, agent_marker

ANSWER_PROMPT = (VOCAB["Answer"], VOCAB[":"])
SYSTEM_HEADER = (SYS,)
ROUND_SEPARATOR = (ROUND,)


def template_overhead(num_peers):
    """Template tokens added by :func:`assemble_input` for ``num_peers`` peers."""
    return len(ROUND_SEPARATOR) + num_peers


class ChannelMode(enum.Enum):
    HYBRID = "hybrid"
    TEXT_ONLY = "text"
    LATENT_ONLY_UNTIL_FINAL = "latent_until_final"


class Source(enum.Enum):
    """Where a context position came from, relative to the context's owner."""

    INSTRUCTION = "instruction_or_question"
    TEMPLATE = "template"
    OWN_LATENT = "own_latent"
    OWN_TEXT = "own_text"
    PEER_LATENT = "peer_latent"
    PEER_TEXT = "peer_text"


@dataclass(frozen=True, eq=False)
class LatentBlock:
    vectors: np.ndarray  # (k, d) float32

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float32)
        if v.ndim != 2:
            raise InputError("latent block must be a (k, d) array")
        if not np.all(np.isfinite(v)):
            raise InputError("latent block values must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "vectors", v)

    @property
    def k(self):
        return self.vectors.shape[0]

    def __eq__(self, other):
        return (isinstance(other, LatentBlock) and self.vectors.shape == other.vectors.shape
                and self.vectors.tobytes() == other.vectors.tobytes())


@dataclass(frozen=True)
class TextBlock:
    tokens: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        if any(t in (BOT, EOT) for t in self.tokens):
            raise InputError("text block may not contain <bot>/<eot>")

    @property
    def m(self):
        return len(self.tokens)


@dataclass(frozen=True)
class HybridMessage:
    sender_id: int
    round: int
    latent: LatentBlock | None  # None: text-only message, no delimiters
    text: TextBlock = field(default_factory=TextBlock)

    @property
    def k(self):
        return self.latent.k if self.latent is not None else 0

    def items(self):
        """The message as model input items."""
        if self.latent is None:
            return list(self.text.tokens)
        return [BOT] + list(self.latent.vectors) + [EOT] + list(self.text.tokens)


@dataclass(frozen=True)
class AgentContext:
    agent_id: int
    items: tuple = ()
    sources: tuple = ()
    max_seq_len: int | None = None

    def __len__(self):
        return len(self.items)

    def extend(self, items, sources):
        if len(items) != len(sources):
            raise InputError("items and sources must align")
        n = len(self.items) + len(items)
        if self.max_seq_len is not None and n > self.max_seq_len:
            raise CapacityError(f"context length {n} exceeds max_seq_len {self.max_seq_len}")
        return AgentContext(self.agent_id, self.items + tuple(items),
                            self.sources + tuple(sources), self.max_seq_len)

    def num_latents(self):
        return sum(1 for s in self.sources if s in (Source.OWN_LATENT, Source.PEER_LATENT))


def initial_context(agent_id, question, max_seq_len=None):
    ctx = AgentContext(agent_id, max_seq_len=max_seq_len)
    return ctx.extend(list(SYSTEM_HEADER) + list(question),
                      [Source.TEMPLATE] * len(SYSTEM_HEADER) + [Source.INSTRUCTION] * len(question))


def render(msg, recipient_mode=ChannelMode.HYBRID, own=False):
    """Items and source tags for ``msg`` as seen by a recipient.

    The forced answer prompt opening a hybrid message's text is tagged as
    template, like the delimiters.
    """
    lat = Source.OWN_LATENT if own else Source.PEER_LATENT
    txt = Source.OWN_TEXT if own else Source.PEER_TEXT
    tokens = list(msg.text.tokens)
    if msg.latent is None or recipient_mode is ChannelMode.TEXT_ONLY:
        return tokens, [txt] * len(tokens)
    vecs = list(msg.latent.vectors)
    items = [BOT] + vecs + [EOT] + tokens
    n_prompt = len(ANSWER_PROMPT) if tuple(tokens[:len(ANSWER_PROMPT)]) == ANSWER_PROMPT else 0
    sources = ([Source.TEMPLATE] + [lat] * len(vecs) + [Source.TEMPLATE] * (1 + n_prompt)
               + [txt] * (len(tokens) - n_prompt))
    return items, sources


def append_own(ctx, msg):
    """Record an agent's own generated message in its context."""
    if msg.sender_id != ctx.agent_id:
        raise ProtocolError("own message sender does not match context owner")
    items, sources = render(msg, ChannelMode.HYBRID, own=True)
    return ctx.extend(items, sources)


def assemble_input(ctx, peer_messages, recipient_mode=ChannelMode.HYBRID):
    """Append the previous round's peer messages to ``ctx``.

    Peers are appended in ascending sender order regardless of the order
    given.  Text-only recipients see only the peers' text tokens.
    """
    senders = [m.sender_id for m in peer_messages]
    if len(set(senders)) != len(senders):
        raise ProtocolError(f"duplicate sender in peer messages: {senders}")
    if ctx.agent_id in senders:
        raise ProtocolError("an agent's own message cannot be a peer message")
    if len({m.round for m in peer_messages}) > 1:
        raise ProtocolError("peer messages must come from the same round")
    items, sources = list(ROUND_SEPARATOR), [Source.TEMPLATE] * len(ROUND_SEPARATOR)
    for msg in sorted(peer_messages, key=lambda m: m.sender_id):
        items.append(agent_marker(msg.sender_id))
        sources.append(Source.TEMPLATE)
        it, so = render(msg, recipient_mode)
        items += it
        sources += so
    return ctx.extend(items, sources)


def count_comm_tokens(msg):
    """Communication units: each latent vector, each text token, both delimiters."""
    if msg.latent is None:
        return msg.text.m
    return msg.latent.k + msg.text.m + 2


# --- wire codec -----------------------------------------------------------------------
MSG_MAGIC = b"HYMS"
MSG_VERSION = 1
NO_LATENT = 0xFFFFFFFF
_HEADER = struct.Struct("<4sHHHII")  # 18 bytes


def serialize(msg: HybridMessage) -> bytes:
    """Little-endian layout: magic, version u16, sender u16, round u16,
    k u32, d_model u32, k*d float32, m u32, m token ids u32.

    A text-only message is written with k = 0xFFFFFFFF and d_model = 0.
    """
    if msg.latent is None:
        k, d, payload = NO_LATENT, 0, b""
    else:
        k, d = msg.latent.vectors.shape
        payload = np.ascontiguousarray(msg.latent.vectors, dtype="<f4").tobytes()
    out = _HEADER.pack(MSG_MAGIC, MSG_VERSION, msg.sender_id, msg.round, k, d) + payload
    toks = msg.text.tokens
    return out + struct.pack(f"<I{len(toks)}I", len(toks), *toks)


def deserialize(buf: bytes) -> HybridMessage:
    buf = bytes(buf)
    if len(buf) < 4 or buf[:4] != MSG_MAGIC:
        raise CodecError("bad magic", 0)
    if len(buf) < _HEADER.size:
        raise CodecError("truncated header", len(buf))
    _, version, sender, rnd, k, d = _HEADER.unpack_from(buf, 0)
    if version != MSG_VERSION:
        raise CodecError(f"unsupported version {version}", 4)
    off = _HEADER.size
    latent = None
    if k != NO_LATENT:
        nbytes = 4 * k * d
        if off + nbytes > len(buf):
            raise CodecError("truncated latent payload", len(buf))
        vecs = np.frombuffer(buf, dtype="<f4", count=k * d, offset=off).reshape(k, d)
        if not np.all(np.isfinite(vecs)):
            raise CodecError("non-finite latent value", off)
        latent = LatentBlock(vecs.astype(np.float32))
        off += nbytes
    elif d != 0:
        raise CodecError("text-only message must declare d_model 0", 14)
    if off + 4 > len(buf):
        raise CodecError("truncated token count", len(buf))
    (m,) = struct.unpack_from("<I", buf, off)
    off += 4
    if off + 4 * m > len(buf):
        raise CodecError("truncated token ids", len(buf))
    toks = struct.unpack_from(f"<{m}I", buf, off)
    off += 4 * m
    if off != len(buf):
        raise CodecError("trailing bytes after message", off)
    try:
        text = TextBlock(toks)
    except InputError as exc:
        raise CodecError(str(exc), off - 4 * m) from None
    return HybridMessage(sender, rnd, latent, text)


# --- format validation -------------------------------------------------------------------
class FormatErrorKind(enum.Enum):
    MISSING_BOT = "missing_bot"
    MISSING_EOT = "missing_eot"
    TEXT_BEFORE_BOT = "text_before_bot"
    TOKEN_IN_LATENT_BLOCK = "token_in_latent_block"
    LATENT_OUTSIDE_BLOCK = "latent_outside_block"
    EXTRA_DELIMITER = "extra_delimiter"
    EMPTY_TEXT = "empty_text"
    MISSING_ANSWER = "missing_answer"


@dataclass(frozen=True)
class FormatError:
    kind: FormatErrorKind
    position: int

    def __str__(self):
        return f"{self.kind.value} at item {self.position}"


def _is_token(item):
    return isinstance(item, (int, np.integer)) and not isinstance(item, bool)


def validate_format(items, sender_id=0, round=0, mode=ChannelMode.HYBRID,
                    allow_empty_text=False, answer_prompt=None):
    """Parse a raw generated item sequence into a message.

    Returns a :class:`HybridMessage`, or a :class:`FormatError` (returned, not
    raised) so failure rates can be aggregated.  With ``answer_prompt`` set,
    a text block holding only the prompt counts as empty.
    """
    items = list(items)
    if mode is ChannelMode.TEXT_ONLY:
        for pos, it in enumerate(items):
            if not _is_token(it):
                return FormatError(FormatErrorKind.LATENT_OUTSIDE_BLOCK, pos)
            if it in (BOT, EOT):
                return FormatError(FormatErrorKind.EXTRA_DELIMITER, pos)
        if not items:
            return FormatError(FormatErrorKind.EMPTY_TEXT, 0)
        return HybridMessage(sender_id, round, None, TextBlock(items))

    if not items:
        return FormatError(FormatErrorKind.MISSING_BOT, 0)
    first = items[0]
    if not _is_token(first):
        return FormatError(FormatErrorKind.LATENT_OUTSIDE_BLOCK, 0)
    if first != BOT:
        if first == EOT:
            return FormatError(FormatErrorKind.MISSING_BOT, 0)
        return FormatError(FormatErrorKind.TEXT_BEFORE_BOT, 0)
    eot = next((i for i, it in enumerate(items) if _is_token(it) and it == EOT), None)
    if eot is None:
        return FormatError(FormatErrorKind.MISSING_EOT, len(items))
    for pos in range(1, eot):
        if _is_token(items[pos]):
            kind = (FormatErrorKind.EXTRA_DELIMITER if items[pos] == BOT
                    else FormatErrorKind.TOKEN_IN_LATENT_BLOCK)
            return FormatError(kind, pos)
    text = items[eot + 1:]
    for j, it in enumerate(text):
        if not _is_token(it):
            return FormatError(FormatErrorKind.LATENT_OUTSIDE_BLOCK, eot + 1 + j)
        if it in (BOT, EOT):
            return FormatError(FormatErrorKind.EXTRA_DELIMITER, eot + 1 + j)
    body = text
    if answer_prompt is not None and tuple(text[: len(answer_prompt)]) == tuple(answer_prompt):
        body = text[len(answer_prompt):]
    if not body and not (allow_empty_text or mode is ChannelMode.LATENT_ONLY_UNTIL_FINAL):
        return FormatError(FormatErrorKind.EMPTY_TEXT, len(items))
    vecs = [np.asarray(v, dtype=np.float32) for v in items[1:eot]]
    width = {v.shape for v in vecs}
    if len(width) > 1:
        return FormatError(FormatErrorKind.LATENT_OUTSIDE_BLOCK, 1)
    block = np.stack(vecs) if vecs else np.zeros((0, 0), dtype=np.float32)
    return HybridMessage(sender_id, round, LatentBlock(block), TextBlock(text))


def format_error_rate(results):
    """Share of validation results that are :class:`FormatError`."""
    results = list(results)
    if not results:
        return 0.0
    return sum(isinstance(r, FormatError) for r in results) / len(results)


# --- transcript log -------------------------------------------------------------------------
def message_record(msg, include_latent=False, **extra):
    rec = {"sender": msg.sender_id, "round": msg.round, "k": msg.k, "m": msg.text.m,
           "has_latent_block": msg.latent is not None, "tokens": list(msg.text.tokens)}
    if include_latent and msg.latent is not None:
        rec["d_model"] = int(msg.latent.vectors.shape[1])
        rec["latent_b64"] = base64.b64encode(
            np.ascontiguousarray(msg.latent.vectors, dtype="<f4").tobytes()).decode("ascii")
    rec.update(extra)
    return rec


def message_from_record(rec):
    latent = None
    if rec.get("has_latent_block", True):
        if "latent_b64" in rec:
            raw = base64.b64decode(rec["latent_b64"])
            vecs = np.frombuffer(raw, dtype="<f4").reshape(rec["k"], rec["d_model"])
        else:
            vecs = np.zeros((rec["k"], 0), dtype=np.float32)
        latent = LatentBlock(vecs.copy())
    return HybridMessage(rec["sender"], rec["round"], latent, TextBlock(rec["tokens"]))


def write_transcript(path, records):
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_transcript(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
