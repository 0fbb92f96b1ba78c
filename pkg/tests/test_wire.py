import random
import time
from dataclasses import replace

import pytest
from hypothesis import given, settings, strategies as st

from safemail import keystore as ks
from safemail import wire
from safemail.keystore import Address
from safemail.wire import Kind

pubkeys = st.sampled_from([ks.generate_keypair(ks.SeededEntropy(i)).public_key
                           for i in range(8)])
ascii_label = st.text(alphabet="abcdefghijklmnopqrstuvwxyz0234567.-", min_size=1, max_size=40)
addresses = st.builds(Address, ascii_label, ascii_label)
codes = st.text(alphabet=[chr(c) for c in range(0x21, 0x7F)], min_size=1, max_size=64)
u64 = st.integers(min_value=0, max_value=2 ** 64 - 1)
sigs = st.binary(min_size=64, max_size=64)
ids = st.binary(min_size=16, max_size=16)
hints = st.none() | st.text(min_size=1, max_size=60)

notes = st.builds(wire.InboxNote, ids, pubkeys, codes, st.binary(min_size=32, max_size=32),
                  hints, u64)
grants = st.builds(wire.AuthorizationGrant, addresses, pubkeys, u64, sigs)
boxes = st.builds(wire.SealedBoxMsg, pubkeys, st.binary(min_size=12, max_size=12),
                  st.binary(max_size=300), st.binary(min_size=16, max_size=16))
deposits = st.builds(wire.MailDeposit, ids, pubkeys, codes, boxes, u64)
pickups = st.builds(wire.Pickup, pubkeys, codes, sigs)
post_notes = st.builds(wire.PostNote, addresses, notes, sigs)
messages = st.one_of(notes, grants, boxes, deposits, pickups, post_notes,
                     st.builds(wire.AckNote, ids), st.builds(wire.RevokeGrant, pubkeys),
                     st.builds(wire.NoteList, st.lists(notes, max_size=3).map(tuple)))


def _note(**kw):
    base = dict(note_id=b"\x01" * 16, sender_minor_pubkey=ks.generate_keypair(
        ks.SeededEntropy(1)).public_key, extraction_code="123456", body_digest=b"\x00" * 32,
        depot_hint=None, posted_at=1_700_000_000)
    base.update(kw)
    return wire.InboxNote(**base)


def _note_of_size(size):
    overhead = wire.encoded_size(_note(depot_hint="x"))
    return _note(depot_hint="x" * (size - overhead + 1))


@settings(max_examples=2000, deadline=None)
@given(messages)
def test_roundtrip(msg):
    data = wire.encode(msg)
    assert wire.decode(type(msg), data) == msg
    assert wire.encode(wire.decode(type(msg), data)) == data
    assert data[0] == wire.VERSION


@settings(max_examples=300, deadline=None)
@given(notes, u64)
def test_posted_at_changes_encoding(note, t):
    other = replace(note, posted_at=t)
    assert (wire.encode(other) == wire.encode(note)) == (t == note.posted_at)


def test_injectivity_over_ten_thousand_messages():
    rng = random.Random(11)
    pubs = [ks.generate_keypair(ks.SeededEntropy(i)).public_key for i in range(4)]
    corpus = set()
    for i in range(10_000):
        choice = i % 4
        if choice == 0:
            msg = _note(note_id=rng.randbytes(16), sender_minor_pubkey=rng.choice(pubs),
                        extraction_code=rng.randbytes(rng.randint(1, 20)).hex()[:rng.randint(1, 40)],
                        depot_hint=rng.choice([None, "p0", "p0:1", ""]) or None,
                        posted_at=rng.randrange(2 ** 64))
        elif choice == 1:
            msg = wire.AuthorizationGrant(Address(rng.randbytes(4).hex(), "d"),
                                          rng.choice(pubs), rng.randrange(2 ** 64),
                                          rng.randbytes(64))
        elif choice == 2:
            msg = wire.Pickup(rng.choice(pubs), rng.randbytes(8).hex(), rng.randbytes(64))
        else:
            msg = wire.AckNote(rng.randbytes(16))
        corpus.add((msg, wire.encode(msg)))
    encodings = {data for _, data in corpus}
    assert len(encodings) == len({msg for msg, _ in corpus})
    assert len(corpus) == 10_000


def test_note_bound_encode():
    assert len(wire.encode(_note_of_size(1024))) == 1024
    with pytest.raises(wire.NoteTooLarge):
        wire.encode(_note_of_size(1025))


def test_note_bound_decode():
    fits = wire.encode(_note_of_size(1024))
    assert wire.decode(wire.InboxNote, fits) == _note_of_size(1024)
    too_big = wire._encode_raw(_note_of_size(1025))
    assert len(too_big) == 1025
    with pytest.raises(wire.NoteTooLarge) as info:
        wire.decode(wire.InboxNote, too_big)
    assert info.value.code == "note-too-large"


def test_decode_error_codes_are_distinct():
    good = wire.encode(_note())
    cases = {
        "truncated": good[:-3],
        "trailing-bytes": good + b"\x00",
        "bad-version": b"\x02" + good[1:],
        "bad-tag": wire.encode(wire.AckNote(b"\x00" * 16)),
        "note-too-large": wire._encode_raw(_note_of_size(1025)),
    }
    codes = {}
    for expected, data in cases.items():
        with pytest.raises(wire.DecodeError) as info:
            wire.decode(wire.InboxNote, data)
        assert info.value.code == expected
        codes[expected] = type(info.value)
    # an extraction code that is too long is a bound violation
    data = bytearray(wire._encode_raw(_note()))
    idx = data.index(b"123456") - 4
    data[idx:idx + 4] = (65).to_bytes(4, "big")
    with pytest.raises(wire.BoundViolation) as info:
        wire.decode(wire.InboxNote, bytes(data))
    assert info.value.code == "bound"
    # invalid presence byte
    data = bytearray(good)
    data[-9] = 7
    with pytest.raises(wire.InvalidField):
        wire.decode(wire.InboxNote, bytes(data))
    assert len(set(codes.values())) == len(codes)


def test_encode_rejects_out_of_bounds():
    for bad in (_note(extraction_code=""), _note(extraction_code="x" * 65),
                _note(extraction_code="has space"), _note(note_id=b"\x00" * 15),
                _note(posted_at=-1)):
        with pytest.raises(wire.EncodeError):
            wire.encode(bad)


@pytest.mark.parametrize("kind", sorted(wire.AUTHENTICATED_KINDS))
def test_authenticated_kinds_require_auth(kind):
    env = wire.RequestEnvelope(int(kind), b"", None, None, None)
    with pytest.raises(wire.EncodeError):
        wire.encode(env)
    with pytest.raises(wire.MissingAuth):
        wire.decode(wire.RequestEnvelope, wire._encode_raw(env))


@pytest.mark.parametrize("kind", [Kind.POST_NOTE, Kind.PICKUP, Kind.REGISTER_CHALLENGE])
def test_self_proving_kinds_carry_no_auth(kind):
    env = wire.RequestEnvelope(int(kind), b"", b"\x00" * 32, b"\x02" * 33, b"\x00" * 64)
    with pytest.raises(wire.EncodeError):
        wire.encode(env)
    assert wire.encode(wire.RequestEnvelope(int(kind), b"", None, None, None))


def test_pickup_payload_is_tagged_and_injective():
    p = wire.pickup_signing_payload("123456")
    assert p.startswith(b"safemail/pickup/v1")
    assert p != wire.pickup_signing_payload("1234567")


def test_signing_tags_are_prefix_free():
    tags = wire.SIGNING_TAGS
    for a in tags:
        for b in tags:
            if a != b:
                assert not a.startswith(b)


def test_signature_for_one_kind_verifies_for_no_other():
    """Sign each payload class over shared inner bytes; cross-verify every pair."""
    kp = ks.generate_keypair(ks.SeededEntropy(3))
    rng = random.Random(3)
    for _ in range(50):
        raw = rng.randbytes(8).hex()
        address = Address(raw, "gogo")
        note = _note(extraction_code=raw)
        payloads = {
            "grant": wire.grant_signing_payload(address, kp.public_key, 5),
            "pickup": wire.pickup_signing_payload(raw),
            "note": wire.note_signing_payload(address, note),
        }
        for kind in Kind:
            payloads[f"request-{kind.name}"] = wire.request_signing_payload(
                kind, raw.encode(), b"\x00" * 32)
        assert len(set(payloads.values())) == len(payloads)
        sigs = {name: ks.sign(kp.private_key, p) for name, p in payloads.items()}
        for signed, sig in sigs.items():
            for other, payload in payloads.items():
                assert ks.verify(kp.public_key, payload, sig) == (signed == other)


def test_grant_and_pickup_payload_differ_over_identical_bytes():
    rng = random.Random(4)
    for _ in range(1000):
        raw = rng.randbytes(rng.randint(1, 40)).hex()
        grant = wire.grant_signing_payload(Address(raw, "d"), b"\x02" * 33, 0)
        assert grant != wire.pickup_signing_payload(raw)
        assert not grant.startswith(wire.PICKUP_TAG)


def test_grant_signature_validity():
    major = ks.generate_keypair(ks.SeededEntropy(10))
    sender = ks.generate_keypair(ks.SeededEntropy(11))
    address = ks.derive_address(major.public_key, "gogo.com")
    grant = wire.sign_grant(major.private_key, address, sender.public_key, 100)
    assert wire.grant_is_valid(grant, major.public_key)
    assert not wire.grant_is_valid(replace(grant, issued_at=101), major.public_key)
    assert not wire.grant_is_valid(grant, sender.public_key)


def test_fuzz_million_random_strings():
    """Random input must produce a decoded message or a DecodeError, never anything else."""
    rng = random.Random(2024)
    classes = [cls for cls in wire._BY_TAG.values()]
    headers = [bytes((wire.VERSION, cls._wire_tag)) for cls in classes]
    accepted = 0
    start = time.perf_counter()
    for i in range(1_000_000):
        cls = classes[i % len(classes)]
        body = rng.randbytes(rng.randint(0, 48))
        # most inputs get a valid header so the field decoders see them
        data = body if i % 4 == 0 else headers[i % len(classes)] + body
        try:
            msg = wire.decode(cls, data)
        except wire.DecodeError:
            continue
        accepted += 1
        assert wire.encode(msg) == data
    elapsed = time.perf_counter() - start
    print(f"fuzz: 10^6 inputs in {elapsed:.1f}s, {accepted} decoded")


@settings(max_examples=3000, deadline=None)
@given(messages, st.data())
def test_fuzz_mutated_valid_encodings(msg, data):
    raw = bytearray(wire.encode(msg))
    pos = data.draw(st.integers(min_value=0, max_value=len(raw) - 1))
    raw[pos] = data.draw(st.integers(min_value=0, max_value=255))
    cut = data.draw(st.integers(min_value=0, max_value=len(raw)))
    for candidate in (bytes(raw), bytes(raw[:cut])):
        try:
            decoded = wire.decode(type(msg), candidate)
        except wire.DecodeError:
            continue
        assert wire.encode(decoded) == candidate


def test_frames():
    payload = b"hello"
    assert wire.unframe(wire.frame(payload)) == payload
    chunks = iter([wire.frame(payload)[:4], payload])
    assert wire.read_frame(lambda n: next(chunks)) == payload


def test_json_presentation():
    env = wire.RequestEnvelope(int(Kind.ACK_NOTE), wire.encode(wire.AckNote(b"\xab" * 16)),
                               b"\x00" * 32, b"\x02" * 33, b"\x01" * 64)
    out = wire.envelope_to_json(env)
    assert out["kind"] == "ACK_NOTE"
    assert out["payload"]["note_id"] == "ab" * 16
    schema = wire.schema_description()
    assert "InboxNote" in str(schema)
