"""Canonical binary encoding for every protocol message.

Each top-level encoding is ``version(1) || tag(1) || fields``. Field order is
the dataclass declaration order. Integers are fixed-width big-endian, byte and
string fields carry a u32 length prefix, optional fields a presence byte, and
nested messages are embedded as length-prefixed full encodings. Every field
has explicit bounds that are checked both when encoding and when decoding.

Signatures never cover JSON. They cover the ``*_signing_payload`` byte
strings below, each starting with its own domain tag.
"""

from __future__ import annotations

import dataclasses
import enum
import json
import struct
from dataclasses import dataclass, field
from typing import Any, Optional

from . import keystore
from .keystore import Address, SealedBox

VERSION = 0x01
MAX_NOTE_BYTES = 1024
MAX_CODE_LENGTH = 64
MAX_HINT_LENGTH = MAX_NOTE_BYTES
MAX_ERROR_LENGTH = 512
MAX_FRAME_BYTES = 16 * 1024 * 1024
# bodies are bounded by provider config; this is only the decoder's hard cap
MAX_WIRE_BODY = keystore.MAX_BODY_BYTES + 1024 * 1024

GRANT_TAG = b"safemail/grant/v1"
NOTE_TAG = b"safemail/note/v1"
PICKUP_TAG = b"safemail/pickup/v1"
REQUEST_TAG = b"safemail/request/v1"
SIGNING_TAGS = (GRANT_TAG, NOTE_TAG, PICKUP_TAG, REQUEST_TAG)


class WireError(ValueError):
    code = "wire"


class EncodeError(WireError):
    code = "encode-bound"


class DecodeError(WireError):
    code = "decode"


class Truncated(DecodeError):
    code = "truncated"


class TrailingBytes(DecodeError):
    code = "trailing-bytes"


class BoundViolation(DecodeError):
    code = "bound"


class BadVersion(DecodeError):
    code = "bad-version"


class BadTag(DecodeError):
    code = "bad-tag"


class InvalidField(DecodeError):
    code = "invalid-field"


class MissingAuth(DecodeError):
    code = "missing-auth"


class NoteTooLarge(EncodeError, BoundViolation):
    code = "note-too-large"


# -- field codecs -------------------------------------------------------------

class _Reader:
    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise Truncated(f"need {n} bytes at offset {self.pos}")
        out = bytes(self.data[self.pos:self.pos + n])
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u32(self) -> int:
        return struct.unpack(">I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack(">Q", self.take(8))[0]

    def done(self) -> None:
        if self.pos != len(self.data):
            raise TrailingBytes(f"{len(self.data) - self.pos} trailing bytes")


class U8:
    def write(self, out: bytearray, value: int) -> None:
        if not isinstance(value, int) or not 0 <= value < 256:
            raise EncodeError(f"u8 out of range: {value!r}")
        out.append(value)

    def read(self, r: _Reader) -> int:
        return r.u8()


class U64:
    def write(self, out: bytearray, value: int) -> None:
        if not isinstance(value, int) or not 0 <= value < 2 ** 64:
            raise EncodeError(f"u64 out of range: {value!r}")
        out += struct.pack(">Q", value)

    def read(self, r: _Reader) -> int:
        return r.u64()


class Blob:
    """Length-prefixed bytes with an exact size or a size range."""

    def __init__(self, exact: Optional[int] = None, max_len: int = 0, min_len: int = 0):
        self.exact = exact
        self.max_len = exact if exact is not None else max_len
        self.min_len = exact if exact is not None else min_len

    def _check(self, n: int, err: type) -> None:
        if not self.min_len <= n <= self.max_len:
            if self.exact is not None:
                raise err(f"expected {self.exact} bytes, got {n}")
            raise err(f"length {n} outside [{self.min_len}, {self.max_len}]")

    def write(self, out: bytearray, value: bytes) -> None:
        if not isinstance(value, (bytes, bytearray)):
            raise EncodeError(f"expected bytes, got {type(value).__name__}")
        self._check(len(value), EncodeError)
        out += struct.pack(">I", len(value))
        out += value

    def read(self, r: _Reader) -> bytes:
        n = r.u32()
        self._check(n, BoundViolation)
        return r.take(n)


class Text(Blob):
    """Length-prefixed UTF-8; the bound is on encoded bytes."""

    def __init__(self, max_len: int, min_len: int = 0, printable: bool = False):
        super().__init__(max_len=max_len, min_len=min_len)
        self.printable = printable

    def _valid(self, s: str) -> bool:
        return not self.printable or all(0x21 <= ord(c) <= 0x7E for c in s)

    def write(self, out: bytearray, value: str) -> None:
        if not isinstance(value, str) or not self._valid(value):
            raise EncodeError(f"invalid text field: {value!r}")
        super().write(out, value.encode("utf-8"))

    def read(self, r: _Reader) -> str:
        raw = super().read(r)
        try:
            s = raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise InvalidField("text is not UTF-8") from exc
        if not self._valid(s):
            raise InvalidField("text outside printable subset")
        return s


class AddressField:
    _text = Text(max_len=keystore.MAX_ADDRESS_LENGTH, min_len=3)

    def write(self, out: bytearray, value: Address) -> None:
        if not isinstance(value, Address):
            raise EncodeError("expected Address")
        rendered = str(value)
        if rendered.count("@") != 1 or not value.local_part or not value.domain:
            raise EncodeError(f"malformed address {rendered!r}")
        self._text.write(out, rendered)

    def read(self, r: _Reader) -> Address:
        try:
            return Address.parse(self._text.read(r))
        except ValueError as exc:
            if isinstance(exc, DecodeError):
                raise
            raise InvalidField(str(exc)) from exc


class Opt:
    def __init__(self, inner):
        self.inner = inner

    def write(self, out: bytearray, value) -> None:
        if value is None:
            out.append(0)
        else:
            out.append(1)
            self.inner.write(out, value)

    def read(self, r: _Reader):
        flag = r.u8()
        if flag == 0:
            return None
        if flag != 1:
            raise InvalidField(f"presence byte {flag}")
        return self.inner.read(r)


class Nested:
    def __init__(self, cls, max_len: int = MAX_FRAME_BYTES):
        self.cls = cls
        self.blob = Blob(max_len=max_len)

    def write(self, out: bytearray, value) -> None:
        if not isinstance(value, self.cls):
            raise EncodeError(f"expected {self.cls.__name__}")
        self.blob.write(out, encode(value))

    def read(self, r: _Reader):
        return decode(self.cls, self.blob.read(r))


class Seq:
    def __init__(self, inner, max_items: int = 100_000):
        self.inner = inner
        self.max_items = max_items

    def write(self, out: bytearray, value) -> None:
        if len(value) > self.max_items:
            raise EncodeError("too many items")
        out += struct.pack(">I", len(value))
        for item in value:
            self.inner.write(out, item)

    def read(self, r: _Reader) -> tuple:
        n = r.u32()
        if n > self.max_items:
            raise BoundViolation(f"{n} items")
        return tuple(self.inner.read(r) for _ in range(n))


PUBKEY = Blob(exact=keystore.PUBLIC_KEY_SIZE)
SIG = Blob(exact=keystore.SIGNATURE_SIZE)
ID16 = Blob(exact=16)
NONCE32 = Blob(exact=32)
CODE = Text(max_len=MAX_CODE_LENGTH, min_len=1, printable=True)
DIGEST = Blob(exact=32)


def _w(codec) -> Any:
    return field(metadata={"wire": codec})


# -- message registry -----------------------------------------------------------

_BY_TAG: dict[int, type] = {}


def message(tag: int, max_size: Optional[int] = None):
    def wrap(cls):
        if tag in _BY_TAG:
            raise RuntimeError(f"duplicate wire tag {tag:#x}")
        cls._wire_tag = tag
        cls._wire_max = max_size
        cls._wire_fields = [(f.name, f.metadata["wire"]) for f in dataclasses.fields(cls)]
        _BY_TAG[tag] = cls
        return cls
    return wrap


def _encode_raw(msg) -> bytes:
    cls = type(msg)
    if not hasattr(cls, "_wire_tag"):
        raise EncodeError(f"{cls.__name__} is not a wire message")
    out = bytearray((VERSION, cls._wire_tag))
    for name, codec in cls._wire_fields:
        codec.write(out, getattr(msg, name))
    return bytes(out)


def encode(msg) -> bytes:
    data = _encode_raw(msg)
    limit = type(msg)._wire_max
    if limit is not None and len(data) > limit:
        raise NoteTooLarge(f"{type(msg).__name__} encodes to {len(data)} > {limit} bytes")
    if hasattr(msg, "validate"):
        msg.validate(EncodeError)
    return data


canonical_encode = encode


def encoded_size(msg) -> int:
    """Size of the encoding, without enforcing the per-message size cap."""
    return len(_encode_raw(msg))


def decode(cls, data: bytes):
    """Decode ``data`` as a ``cls`` message.

    Raises only ``DecodeError`` subclasses, whatever the input.
    """
    if not isinstance(data, (bytes, bytearray, memoryview)):
        raise InvalidField("input is not bytes")
    data = bytes(data)
    if cls._wire_max is not None and len(data) > cls._wire_max:
        raise NoteTooLarge(f"{len(data)} bytes exceeds {cls._wire_max}")
    r = _Reader(data)
    if r.u8() != VERSION:
        raise BadVersion("unsupported schema version")
    tag = r.u8()
    if tag != cls._wire_tag:
        raise BadTag(f"tag {tag:#x} is not {cls.__name__}")
    values = {name: codec.read(r) for name, codec in cls._wire_fields}
    r.done()
    msg = cls(**values)
    if hasattr(msg, "validate"):
        msg.validate(InvalidField)
    return msg


# -- protocol messages ------------------------------------------------------------

class Kind(enum.IntEnum):
    REGISTER_CHALLENGE = 1
    REGISTER = 2
    SUBMIT_GRANT = 3
    POST_NOTE = 4
    LIST_NOTES = 5
    ACK_NOTE = 6
    DEPOSIT = 7
    PICKUP = 8
    REVOKE_GRANT = 9


AUTHENTICATED_KINDS = frozenset({
    Kind.REGISTER, Kind.SUBMIT_GRANT, Kind.REVOKE_GRANT,
    Kind.LIST_NOTES, Kind.ACK_NOTE, Kind.DEPOSIT,
})


class Status(enum.IntEnum):
    OK = 0
    ACCEPTED = 1
    DROPPED = 2
    ERROR = 3


@message(0x10)
@dataclass(frozen=True)
class SealedBoxMsg:
    ephemeral_pubkey: bytes = _w(PUBKEY)
    nonce: bytes = _w(Blob(exact=keystore.NONCE_SIZE))
    ciphertext: bytes = _w(Blob(max_len=MAX_WIRE_BODY))
    tag: bytes = _w(Blob(exact=keystore.TAG_SIZE))

    @classmethod
    def of(cls, box: SealedBox) -> "SealedBoxMsg":
        return cls(box.ephemeral_pubkey, box.nonce, box.ciphertext, box.tag)

    def box(self) -> SealedBox:
        return SealedBox(self.ephemeral_pubkey, self.nonce, self.ciphertext, self.tag)


@message(0x11)
@dataclass(frozen=True)
class AuthorizationGrant:
    recipient_address: Address = _w(AddressField())
    sender_minor_pubkey: bytes = _w(PUBKEY)
    issued_at: int = _w(U64())
    grant_signature: bytes = _w(SIG)


@message(0x12, max_size=MAX_NOTE_BYTES)
@dataclass(frozen=True)
class InboxNote:
    note_id: bytes = _w(ID16)
    sender_minor_pubkey: bytes = _w(PUBKEY)
    extraction_code: str = _w(CODE)
    body_digest: bytes = _w(DIGEST)
    depot_hint: Optional[str] = _w(Opt(Text(max_len=MAX_HINT_LENGTH, min_len=1)))
    posted_at: int = _w(U64())


@message(0x13)
@dataclass(frozen=True)
class MailDeposit:
    deposit_id: bytes = _w(ID16)
    recipient_minor_pubkey: bytes = _w(PUBKEY)
    extraction_code: str = _w(CODE)
    body: SealedBoxMsg = _w(Nested(SealedBoxMsg))
    created_at: int = _w(U64())


@message(0x14)
@dataclass(frozen=True)
class Empty:
    pass


@message(0x15)
@dataclass(frozen=True)
class RevokeGrant:
    sender_minor_pubkey: bytes = _w(PUBKEY)


@message(0x16)
@dataclass(frozen=True)
class PostNote:
    recipient_address: Address = _w(AddressField())
    note: InboxNote = _w(Nested(InboxNote))
    sender_signature: bytes = _w(SIG)


@message(0x17)
@dataclass(frozen=True)
class AckNote:
    note_id: bytes = _w(ID16)


@message(0x18)
@dataclass(frozen=True)
class Pickup:
    recipient_minor_pubkey: bytes = _w(PUBKEY)
    extraction_code: str = _w(CODE)
    signature: bytes = _w(SIG)


PAYLOAD_TYPES = {
    Kind.REGISTER_CHALLENGE: Empty,
    Kind.REGISTER: Empty,
    Kind.SUBMIT_GRANT: AuthorizationGrant,
    Kind.REVOKE_GRANT: RevokeGrant,
    Kind.POST_NOTE: PostNote,
    Kind.LIST_NOTES: Empty,
    Kind.ACK_NOTE: AckNote,
    Kind.DEPOSIT: MailDeposit,
    Kind.PICKUP: Pickup,
}


@message(0x20)
@dataclass(frozen=True)
class RequestEnvelope:
    kind: int = _w(U8())
    payload: bytes = _w(Blob(max_len=MAX_FRAME_BYTES))
    nonce: Optional[bytes] = _w(Opt(NONCE32))
    auth_pubkey: Optional[bytes] = _w(Opt(PUBKEY))
    auth_signature: Optional[bytes] = _w(Opt(SIG))

    def validate(self, err) -> None:
        if self.kind not in Kind.__members__.values():
            raise err(f"unknown request kind {self.kind}")
        authed = (self.nonce, self.auth_pubkey, self.auth_signature)
        if Kind(self.kind) in AUTHENTICATED_KINDS:
            if any(x is None for x in authed):
                raise (MissingAuth if err is InvalidField else err)(
                    f"{Kind(self.kind).name} requires auth fields")
        elif any(x is not None for x in authed):
            raise err(f"{Kind(self.kind).name} carries its proof in the payload")

    def decode_payload(self):
        return decode(PAYLOAD_TYPES[Kind(self.kind)], self.payload)


@message(0x21)
@dataclass(frozen=True)
class Response:
    status: int = _w(U8())
    error: str = _w(Text(max_len=MAX_ERROR_LENGTH))
    body: bytes = _w(Blob(max_len=MAX_FRAME_BYTES))

    def validate(self, err) -> None:
        if self.status not in Status.__members__.values():
            raise err(f"unknown status {self.status}")


@message(0x22)
@dataclass(frozen=True)
class NoteList:
    notes: tuple = _w(Seq(Nested(InboxNote)))


@message(0x23)
@dataclass(frozen=True)
class Challenge:
    nonce: bytes = _w(NONCE32)


@message(0x24)
@dataclass(frozen=True)
class Registered:
    address: Address = _w(AddressField())


@message(0x25)
@dataclass(frozen=True)
class Receipt:
    deposit_id: bytes = _w(ID16)


def decode_payload(kind: Kind, data: bytes):
    return decode(PAYLOAD_TYPES[Kind(kind)], data)


# -- signing payloads -------------------------------------------------------------

def grant_signing_payload(recipient_address: Address, sender_minor_pubkey: bytes,
                          issued_at: int) -> bytes:
    out = bytearray(GRANT_TAG)
    AddressField().write(out, recipient_address)
    PUBKEY.write(out, sender_minor_pubkey)
    U64().write(out, issued_at)
    return bytes(out)


def pickup_signing_payload(extraction_code: str) -> bytes:
    return PICKUP_TAG + extraction_code.encode("utf-8")


def note_signing_payload(recipient_address: Address, note: InboxNote) -> bytes:
    # binding the recipient stops a note for one inbox being replayed into another
    out = bytearray(NOTE_TAG)
    AddressField().write(out, recipient_address)
    out += _encode_raw(note)
    return bytes(out)


def request_signing_payload(kind: int, payload: bytes, nonce: bytes) -> bytes:
    out = bytearray(REQUEST_TAG)
    out.append(int(kind))
    Blob(max_len=MAX_FRAME_BYTES).write(out, payload)
    NONCE32.write(out, nonce)
    return bytes(out)


def sign_grant(major_private_key: bytes, recipient_address: Address,
               sender_minor_pubkey: bytes, issued_at: int) -> AuthorizationGrant:
    sig = keystore.sign(major_private_key,
                        grant_signing_payload(recipient_address, sender_minor_pubkey, issued_at))
    return AuthorizationGrant(recipient_address, sender_minor_pubkey, issued_at, sig)


def grant_is_valid(grant: AuthorizationGrant, recipient_major_pubkey: bytes) -> bool:
    payload = grant_signing_payload(grant.recipient_address, grant.sender_minor_pubkey,
                                    grant.issued_at)
    return keystore.verify(recipient_major_pubkey, payload, grant.grant_signature)


# -- framing --------------------------------------------------------------------

def frame(data: bytes) -> bytes:
    if len(data) > MAX_FRAME_BYTES:
        raise EncodeError("frame too large")
    return struct.pack(">I", len(data)) + data


def unframe(data: bytes) -> bytes:
    if len(data) < 4:
        raise Truncated("frame header")
    n = struct.unpack(">I", data[:4])[0]
    if n > MAX_FRAME_BYTES:
        raise BoundViolation("frame too large")
    if len(data) != 4 + n:
        raise (Truncated if len(data) < 4 + n else TrailingBytes)("frame length mismatch")
    return data[4:]


def read_frame(recv_exact) -> Optional[bytes]:
    """Read one frame using ``recv_exact(n)``; None on clean EOF."""
    header = recv_exact(4)
    if not header:
        return None
    if len(header) != 4:
        raise Truncated("frame header")
    n = struct.unpack(">I", header)[0]
    if n > MAX_FRAME_BYTES:
        raise BoundViolation("frame too large")
    body = recv_exact(n)
    if len(body) != n:
        raise Truncated("frame body")
    return body


# -- JSON presentation --------------------------------------------------------------

def to_jsonable(value):
    if isinstance(value, (bytes, bytearray)):
        return value.hex()
    if isinstance(value, Address):
        return str(value)
    if isinstance(value, enum.Enum):
        return value.name
    if dataclasses.is_dataclass(value):
        out = {"type": type(value).__name__}
        for f in dataclasses.fields(value):
            out[f.name] = to_jsonable(getattr(value, f.name))
        return out
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    return value


def envelope_to_json(env: RequestEnvelope) -> dict:
    out = to_jsonable(env)
    out["kind"] = Kind(env.kind).name
    try:
        out["payload"] = to_jsonable(env.decode_payload())
    except DecodeError as exc:
        out["payload_error"] = exc.code
    return out


def schema_description() -> dict:
    """Human-readable listing of every wire schema, served on the debug port."""
    def codec_name(codec) -> str:
        if isinstance(codec, Opt):
            return f"optional {codec_name(codec.inner)}"
        if isinstance(codec, Nested):
            return codec.cls.__name__
        if isinstance(codec, Seq):
            return f"list of {codec_name(codec.inner)}"
        if isinstance(codec, Text):
            return f"utf8[{codec.min_len}..{codec.max_len}]"
        if isinstance(codec, Blob):
            if codec.exact is not None:
                return f"bytes[{codec.exact}]"
            return f"bytes[{codec.min_len}..{codec.max_len}]"
        return type(codec).__name__.lower()

    schemas = {}
    for tag, cls in sorted(_BY_TAG.items()):
        schemas[cls.__name__] = {
            "tag": tag,
            "max_size": cls._wire_max,
            "fields": [[name, codec_name(codec)] for name, codec in cls._wire_fields],
        }
    return {
        "version": VERSION,
        "kinds": {k.name: int(k) for k in Kind},
        "statuses": {s.name: int(s) for s in Status},
        "schemas": schemas,
    }


def dumps(value) -> str:
    return json.dumps(to_jsonable(value), sort_keys=True)
