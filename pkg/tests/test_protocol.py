import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from hylat.errors import CapacityError, CodecError, InputError, ProtocolError
from hylat.protocol import (ANSWER_PROMPT, ChannelMode, FormatError, FormatErrorKind,
                            HybridMessage, LatentBlock, Source, TextBlock, append_own,
                            assemble_input, count_comm_tokens, deserialize, format_error_rate,
                            initial_context, message_from_record, message_record, read_transcript,
                            render, serialize, template_overhead, validate_format,
                            write_transcript)
from hylat.vocab import BOT, EOT, ROUND, SYS, agent_marker

D = 4
finite = st.floats(-1e6, 1e6, allow_nan=False, width=32)
text_tokens = st.lists(st.integers(3, 67), max_size=10)


@st.composite
def messages(draw, d=None):
    text = TextBlock(draw(text_tokens))
    if draw(st.booleans()):
        k = draw(st.integers(0, 6))
        width = d if d is not None else draw(st.integers(1, 8))
        lat = LatentBlock(draw(arrays(np.float32, (k, width), elements=finite)))
    else:
        lat = None
    return HybridMessage(draw(st.integers(0, 7)), draw(st.integers(0, 5)), lat, text)


def vec(x):
    return np.full(D, x, dtype=np.float32)


def msg(sender, k=2, text=(7, 8, 30), rnd=0):
    return HybridMessage(sender, rnd, LatentBlock(np.ones((k, D)) * sender), TextBlock(text))


def test_blocks_validate():
    with pytest.raises(InputError):
        LatentBlock(np.array([np.nan, 1.0])[None])
    with pytest.raises(InputError):
        LatentBlock(np.ones(3))
    with pytest.raises(InputError):
        TextBlock((1, 30))
    b = LatentBlock(np.ones((2, 3)))
    assert b.vectors.dtype == np.float32 and not b.vectors.flags.writeable


@settings(max_examples=300, deadline=None)
@given(messages())
def test_codec_round_trip(m):
    raw = serialize(m)
    assert deserialize(raw) == m
    k, dm = (m.latent.vectors.shape if m.latent is not None else (0, 0))
    assert len(raw) == 18 + 4 * k * dm + 4 + 4 * m.text.m


def test_codec_layout():
    m = HybridMessage(3, 1, LatentBlock(np.array([[1.5, -2.0]])), TextBlock((9,)))
    raw = serialize(m)
    assert raw[:4] == b"HYMS"
    assert struct.unpack_from("<HHHII", raw, 4) == (1, 3, 1, 1, 2)
    assert struct.unpack_from("<2f", raw, 18) == (1.5, -2.0)
    assert struct.unpack_from("<II", raw, 26) == (1, 9)
    t = serialize(HybridMessage(0, 0, None, TextBlock((5,))))
    assert struct.unpack_from("<II", t, 10) == (0xFFFFFFFF, 0)


def test_codec_errors_carry_offsets():
    raw = serialize(msg(1))
    cases = [
        (b"XXXX" + raw[4:], 0),
        (raw[:4] + struct.pack("<H", 2) + raw[6:], 4),
        (raw[:10], 10),
        (raw[:-2], len(raw) - 2),
        (raw + b"\x00", len(raw)),
    ]
    for bad, off in cases:
        with pytest.raises(CodecError) as ei:
            deserialize(bad)
        assert ei.value.offset == off
    nan = bytearray(raw)
    struct.pack_into("<f", nan, 18, float("nan"))
    with pytest.raises(CodecError):
        deserialize(bytes(nan))


def test_count_comm_tokens():
    assert count_comm_tokens(msg(0, k=6, text=(7, 8, 30))) == 6 + 3 + 2
    assert count_comm_tokens(HybridMessage(0, 0, None, TextBlock((7, 8, 30)))) == 3
    assert count_comm_tokens(msg(0, k=0, text=())) == 2


def test_assemble_orders_peers_and_tags_sources():
    ctx = initial_context(1, [30, 31])
    out = assemble_input(ctx, [msg(3), msg(0)])
    items = list(out.items)
    assert items[:3] == [SYS, 30, 31]
    assert items[3] == ROUND and items[4] == agent_marker(0)
    # marker, BOT, k latents, EOT, prompt, answer for each peer
    assert items[4 + 8] == agent_marker(3)
    assert len(out) == 3 + template_overhead(2) + 2 * (2 + 2 + 3)
    src = out.sources
    assert src[:3] == (Source.TEMPLATE, Source.INSTRUCTION, Source.INSTRUCTION)
    assert src[5:11] == (Source.TEMPLATE, Source.PEER_LATENT, Source.PEER_LATENT, Source.TEMPLATE,
                         Source.TEMPLATE, Source.TEMPLATE)
    assert src[11] == Source.PEER_TEXT
    assert out.num_latents() == 4


def test_text_only_recipient_sees_no_latents():
    ctx = initial_context(0, [30])
    out = assemble_input(ctx, [msg(1, k=6), msg(2, k=6)], ChannelMode.TEXT_ONLY)
    assert out.num_latents() == 0
    assert all(isinstance(i, int) for i in out.items)
    assert BOT not in out.items and EOT not in out.items


def test_assemble_rejects_bad_peer_sets():
    ctx = initial_context(0, [30], max_seq_len=12)
    with pytest.raises(ProtocolError):
        assemble_input(ctx, [msg(1), msg(1)])
    with pytest.raises(ProtocolError):
        assemble_input(ctx, [msg(0)])
    with pytest.raises(ProtocolError):
        assemble_input(ctx, [msg(1, rnd=0), msg(2, rnd=1)])
    with pytest.raises(CapacityError):
        assemble_input(ctx, [msg(1), msg(2)])
    with pytest.raises(ProtocolError):
        append_own(ctx, msg(2))


def test_render_own_message():
    items, sources = render(msg(0, k=1), own=True)
    assert sources == [Source.TEMPLATE, Source.OWN_LATENT, Source.TEMPLATE, Source.TEMPLATE,
                       Source.TEMPLATE, Source.OWN_TEXT]
    assert items[0] == BOT and items[2] == EOT


@pytest.mark.parametrize("items,kind", [
    ([vec(0), EOT, 30], FormatErrorKind.LATENT_OUTSIDE_BLOCK),
    ([BOT, vec(0), vec(1)], FormatErrorKind.MISSING_EOT),
    ([30, BOT, vec(0), EOT, 31], FormatErrorKind.TEXT_BEFORE_BOT),
    ([BOT, vec(0), 30, EOT, 31], FormatErrorKind.TOKEN_IN_LATENT_BLOCK),
    ([BOT, vec(0), EOT, 31, vec(1)], FormatErrorKind.LATENT_OUTSIDE_BLOCK),
    ([BOT, vec(0), EOT, 31, EOT], FormatErrorKind.EXTRA_DELIMITER),
    ([BOT, BOT, vec(0), EOT, 31], FormatErrorKind.EXTRA_DELIMITER),
    ([EOT, 31], FormatErrorKind.MISSING_BOT),
    ([BOT, vec(0), EOT], FormatErrorKind.EMPTY_TEXT),
])
def test_validate_classifies_malformed(items, kind):
    r = validate_format(items)
    assert isinstance(r, FormatError) and r.kind is kind


def test_validate_accepts_and_prompt_only_is_empty():
    r = validate_format([BOT, vec(1), vec(2), EOT, *ANSWER_PROMPT, 30], sender_id=2, round=1)
    assert isinstance(r, HybridMessage) and r.k == 2 and r.sender_id == 2
    r = validate_format([BOT, vec(1), EOT, *ANSWER_PROMPT], answer_prompt=ANSWER_PROMPT)
    assert r.kind is FormatErrorKind.EMPTY_TEXT
    r = validate_format([BOT, vec(1), EOT], mode=ChannelMode.LATENT_ONLY_UNTIL_FINAL)
    assert isinstance(r, HybridMessage) and r.text.m == 0
    assert isinstance(validate_format([30, 31], mode=ChannelMode.TEXT_ONLY), HybridMessage)
    assert validate_format([30, BOT], mode=ChannelMode.TEXT_ONLY).kind is FormatErrorKind.EXTRA_DELIMITER
    assert format_error_rate([r, FormatError(FormatErrorKind.EMPTY_TEXT, 0)]) == 0.5
    assert format_error_rate([]) == 0.0


@settings(max_examples=100, deadline=None)
@given(messages(d=D))
def test_validate_inverts_items(m):
    if m.latent is None or m.k == 0 or m.text.m == 0:
        return
    assert validate_format(m.items(), m.sender_id, m.round) == m


@settings(max_examples=50, deadline=None)
@given(st.lists(messages(), max_size=5))
def test_transcript_round_trip(tmp_path_factory, msgs):
    path = tmp_path_factory.mktemp("t") / "log.jsonl"
    write_transcript(path, [message_record(m, include_latent=True, q=i) for i, m in enumerate(msgs)])
    recs = read_transcript(path)
    assert [message_from_record(r) for r in recs] == msgs
    assert [r["q"] for r in recs] == list(range(len(msgs)))
