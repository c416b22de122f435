import random
import struct

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from storepush import wire
from storepush.wire import (MAX_FRAME, MAX_SCRATCH, DecodeError, PushdownCapsule,
                            PushdownResponse, ReadCapsule, ReadResponse, Status, Truncated)

from .strategies import messages


def test_minimal_capsule_roundtrip_and_layout():
    cap = PushdownCapsule(7, 1, ((3, 2),), 0, 512, 512, bytes(range(16)))
    raw = wire.encode(cap)
    # u32 len | u8 type | u64 rid u32 fid u8 count | (u64,u64) | u8 idx u64 off u32 len u32 slen
    assert raw.hex() == (
        "3f000000" "03"
        "0700000000000000" "01000000" "01"
        "0300000000000000" "0200000000000000"
        "00" "0002000000000000" "00020000" "10000000"
        + bytes(range(16)).hex())
    assert wire.decode(raw) == (cap, len(raw))
    assert cap.fd_count == 1


def test_read_frames_hex():
    raw = wire.encode(ReadCapsule(1, 2, 3, 1024, 512))
    assert raw.hex() == ("25000000" "01" "0100000000000000" "0200000000000000"
                         "0300000000000000" "0004000000000000" "00020000")
    resp = wire.encode(ReadResponse(1, Status.OK, b"ab"))
    assert resp.hex() == "10000000" "02" "0100000000000000" "00" "02000000" "6162"


@settings(max_examples=300, deadline=None)
@given(messages)
def test_roundtrip(msg):
    raw = wire.encode(msg)
    assert wire.decode(raw) == (msg, len(raw))
    # prefix safety: trailing bytes are left alone
    assert wire.decode(raw + b"\xff\x00")[1] == len(raw)


@settings(max_examples=200, deadline=None)
@given(messages, st.data())
def test_every_truncation_is_a_clean_error(msg, data):
    raw = wire.encode(msg)
    cut = data.draw(st.integers(0, len(raw) - 1))
    with pytest.raises(Truncated):
        wire.decode(raw[:cut])


def test_length_field_exceeding_buffer():
    raw = bytearray(wire.encode(ReadCapsule(1, 2, 3, 0, 512)))
    struct.pack_into("<I", raw, 0, 1000)
    with pytest.raises(Truncated):
        wire.decode(bytes(raw))
    struct.pack_into("<I", raw, 0, MAX_FRAME + 1)
    with pytest.raises(DecodeError):
        wire.decode(bytes(raw))


def test_rejects_bad_fields():
    good = wire.encode(PushdownCapsule(1, 1, ((1, 1),), 0, 0, 512, b""))
    bad_count = bytearray(good)
    bad_count[5 + 12] = 17
    with pytest.raises(DecodeError):
        wire.decode(bytes(bad_count))
    bad_type = bytearray(good)
    bad_type[4] = 0x09
    with pytest.raises(DecodeError):
        wire.decode(bytes(bad_type))
    # scratch length field above the cap
    body = struct.pack("<QIB", 1, 1, 1) + struct.pack("<QQ", 1, 1) + struct.pack(
        "<BQII", 0, 0, 512, MAX_SCRATCH + 1)
    frame = struct.pack("<I", len(body) + 1) + b"\x03" + body
    with pytest.raises(DecodeError):
        wire.decode(frame)
    with pytest.raises(ValueError):
        wire.encode(PushdownCapsule(1, 1, ((1, 1),) * 17, 0, 0, 512, b""))
    with pytest.raises(ValueError):
        wire.encode(PushdownCapsule(1, 1, ((1, 1),), 0, 0, 512, bytes(MAX_SCRATCH + 1)))
    with pytest.raises(ValueError):
        wire.encode(PushdownResponse(1, Status.VERSION_MISMATCH, scratch=b"x"))


def test_error_response_carries_no_scratch():
    raw = wire.encode(PushdownResponse(9, Status.LIMIT_EXCEEDED, 64, 65))
    msg, _ = wire.decode(raw)
    assert msg.scratch is None and msg.resubmission_count == 64


def test_read_frame_validates_before_reading_body():
    asked = []
    header = struct.pack("<I", MAX_FRAME + 5)

    def recv(n):
        asked.append(n)
        return header
    with pytest.raises(DecodeError):
        wire.read_frame(recv)
    assert asked == [4]


def test_random_bytes_never_crash():
    rng = random.Random(5)
    for _ in range(20000):
        n = rng.randrange(0, 64)
        buf = bytes(rng.getrandbits(8) for _ in range(n))
        if n >= 5 and rng.random() < 0.7:
            buf = struct.pack("<I", n - 4) + bytes([rng.randint(1, 4)]) + buf[5:]
        try:
            _, used = wire.decode(buf)
            assert used <= len(buf)
        except DecodeError:
            pass
