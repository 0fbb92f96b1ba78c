"""User agent: holds the key pair set and contact book and drives the send and receive flows.

Sending is two requests to two providers: deposit the sealed body at our own
provider, then leave a note on the recipient's board. Receiving is the
reverse: read notes at home, then sign each extraction code with the minor
key and collect the body from the sender's provider.
"""

from __future__ import annotations

import contextlib
import fcntl
import hashlib
import logging
import os
import socket
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Optional, Protocol

from . import keystore, wire
from .errors import CollisionError, NotFound, ProviderError, TransportError, error_for_code
from .keystore import Address, Entropy, KeyPairSet, OpenError
from .wire import Kind, Status

log = logging.getLogger(__name__)

CODE_BYTES = 16


@dataclass(frozen=True)
class ContactEntry:
    label: str
    minor_pubkey: bytes
    depot_endpoint: str
    address: Optional[Address] = None

    def __post_init__(self):
        if not self.label or any(c in self.label for c in "\t\n"):
            raise ValueError(f"bad contact label {self.label!r}")
        if not keystore.is_valid_public_key(self.minor_pubkey):
            raise ValueError("contact key is not a valid public key")


class ContactBook:
    """Contacts stored one per line: ``label<TAB>hexpubkey<TAB>endpoint[<TAB>address]``."""

    def __init__(self, entries=()):
        self._entries: dict[str, ContactEntry] = {}
        for e in entries:
            self.add(e)

    def add(self, entry: ContactEntry) -> None:
        other = self.by_pubkey(entry.minor_pubkey)
        if other is not None and other.label != entry.label:
            raise ValueError(f"key already belongs to contact {other.label!r}")
        self._entries[entry.label] = entry

    def remove(self, label: str) -> ContactEntry:
        return self._entries.pop(label)

    def get(self, label: str) -> Optional[ContactEntry]:
        return self._entries.get(label)

    def by_pubkey(self, pubkey: bytes) -> Optional[ContactEntry]:
        for e in self._entries.values():
            if e.minor_pubkey == pubkey:
                return e
        return None

    def __iter__(self) -> Iterator[ContactEntry]:
        return iter(sorted(self._entries.values(), key=lambda e: e.label))

    def __len__(self) -> int:
        return len(self._entries)

    def dumps(self) -> str:
        lines = []
        for e in self:
            cols = [e.label, e.minor_pubkey.hex(), e.depot_endpoint]
            if e.address is not None:
                cols.append(str(e.address))
            lines.append("\t".join(cols) + "\n")
        return "".join(lines)

    @classmethod
    def loads(cls, text: str) -> "ContactBook":
        book = cls()
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip() or line.startswith("#"):
                continue
            cols = line.split("\t")
            if len(cols) not in (3, 4):
                raise ValueError(f"contacts line {lineno}: expected 3 or 4 columns")
            address = Address.parse(cols[3]) if len(cols) == 4 else None
            book.add(ContactEntry(cols[0], bytes.fromhex(cols[1]), cols[2], address))
        return book


@dataclass
class OutgoingMail:
    to: ContactEntry
    body: bytes
    extraction_code: Optional[str] = None


@dataclass
class ReceivedMail:
    from_pubkey: bytes
    from_label: Optional[str]
    body: bytes
    fetched_at: int
    note_id: bytes = b""
    verified: bool = True


@dataclass
class SendResult:
    status: str
    extraction_code: str
    deposit_id: bytes
    note_id: bytes


@dataclass
class Alert:
    kind: str  # "unresolved", "expired", "tamper", "pickup-failed"
    note_id: bytes
    detail: str = ""


class Transport(Protocol):
    def roundtrip(self, endpoint: str, request: bytes) -> bytes: ...


def parse_endpoint(endpoint: str) -> tuple[str, int]:
    host, sep, port = endpoint.rpartition(":")
    if not sep or not host or not port.isdigit():
        raise ValueError(f"endpoint must be host:port, got {endpoint!r}")
    return host, int(port)


class TcpTransport:
    """One TCP connection per request, length-prefixed frames both ways."""

    def __init__(self, timeout: float = 30.0):
        self.timeout = timeout

    def roundtrip(self, endpoint: str, request: bytes) -> bytes:
        try:
            with socket.create_connection(parse_endpoint(endpoint), timeout=self.timeout) as sock:
                sock.sendall(wire.frame(request))
                response = wire.read_frame(lambda n: _recv_exact(sock, n))
        except (OSError, ValueError) as exc:
            raise TransportError(f"{endpoint}: {exc}") from exc
        if response is None:
            raise TransportError(f"{endpoint}: connection closed")
        return response


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    remaining = n
    while remaining:
        chunk = sock.recv(min(remaining, 1 << 20))
        if not chunk:
            break
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


class Client:
    def __init__(self, keys: KeyPairSet, transport: Transport,
                 entropy: Optional[Entropy] = None,
                 clock: Callable[[], float] = time.time,
                 contacts: Optional[ContactBook] = None,
                 home: Optional[str] = None, address: Optional[Address] = None,
                 max_body_bytes: int = keystore.MAX_BODY_BYTES):
        self.keys = keys
        self.transport = transport
        self.entropy = entropy or keystore.system_entropy
        self.clock = clock
        self.contacts = contacts if contacts is not None else ContactBook()
        self.home = home
        self.address = address
        self.max_body_bytes = max_body_bytes
        self.alerts: list[Alert] = []

    # -- plumbing ------------------------------------------------------------

    def _now(self) -> int:
        return int(self.clock())

    def new_code(self) -> str:
        return self.entropy(CODE_BYTES).hex()

    def _send(self, endpoint: str, env: wire.RequestEnvelope) -> wire.Response:
        raw = self.transport.roundtrip(endpoint, wire.encode(env))
        try:
            resp = wire.decode(wire.Response, raw)
        except wire.DecodeError as exc:
            raise TransportError(f"{endpoint}: malformed response ({exc.code})") from exc
        if resp.status == Status.ERROR:
            raise error_for_code(resp.error, f"{resp.error} from {endpoint}")
        return resp

    def _challenge(self, endpoint: str) -> bytes:
        env = wire.RequestEnvelope(Kind.REGISTER_CHALLENGE, wire.encode(wire.Empty()),
                                   None, None, None)
        return wire.decode(wire.Challenge, self._send(endpoint, env).body).nonce

    def signed_request(self, endpoint: str, kind: Kind, payload_msg) -> wire.RequestEnvelope:
        """Build an owner-authenticated envelope bound to a fresh server nonce."""
        payload = wire.encode(payload_msg)
        nonce = self._challenge(endpoint)
        sig = keystore.sign(self.keys.major.private_key,
                            wire.request_signing_payload(kind, payload, nonce))
        return wire.RequestEnvelope(int(kind), payload, nonce,
                                    self.keys.major.public_key, sig)

    def _authed(self, kind: Kind, payload_msg, endpoint: Optional[str] = None) -> wire.Response:
        endpoint = endpoint or self._require_home()
        return self._send(endpoint, self.signed_request(endpoint, kind, payload_msg))

    def _open(self, endpoint: str, kind: Kind, payload_msg) -> wire.Response:
        env = wire.RequestEnvelope(int(kind), wire.encode(payload_msg), None, None, None)
        return self._send(endpoint, env)

    def _require_home(self) -> str:
        if self.home is None or self.address is None:
            raise ProviderError("not enrolled with a provider")
        return self.home

    # -- enrollment and grants -----------------------------------------------

    def enroll(self, provider_endpoint: str) -> Address:
        resp = self._authed(Kind.REGISTER, wire.Empty(), endpoint=provider_endpoint)
        address = wire.decode(wire.Registered, resp.body).address
        self.home, self.address = provider_endpoint, address
        return address

    def make_grant(self, sender_minor_pubkey: bytes) -> wire.AuthorizationGrant:
        self._require_home()
        return wire.sign_grant(self.keys.major.private_key, self.address,
                               sender_minor_pubkey, self._now())

    def authorize(self, contact: ContactEntry) -> None:
        """Let ``contact`` leave notes in our inbox."""
        self._authed(Kind.SUBMIT_GRANT, self.make_grant(contact.minor_pubkey))
        if self.contacts.get(contact.label) is None:
            self.contacts.add(contact)

    def revoke(self, contact: ContactEntry) -> None:
        self._authed(Kind.REVOKE_GRANT, wire.RevokeGrant(contact.minor_pubkey))

    # -- sending -------------------------------------------------------------

    def send(self, mail: OutgoingMail) -> SendResult:
        home = self._require_home()
        to = mail.to
        if to.address is None:
            raise ValueError(f"contact {to.label!r} has no inbox address")
        box = wire.SealedBoxMsg.of(keystore.seal(to.minor_pubkey, mail.body, self.entropy,
                                                 self.max_body_bytes))
        code = mail.extraction_code or self.new_code()
        for attempt in range(2):
            deposit = wire.MailDeposit(self.entropy(16), to.minor_pubkey, code, box, self._now())
            try:
                receipt = self._authed(Kind.DEPOSIT, deposit, endpoint=home)
                break
            except CollisionError:
                if attempt:
                    raise
                log.info("extraction code collided, retrying with a fresh one")
                code = self.new_code()
        deposit_id = wire.decode(wire.Receipt, receipt.body).deposit_id

        note = wire.InboxNote(self.entropy(16), self.keys.minor.public_key, code,
                              hashlib.sha256(wire.encode(box)).digest(), home, self._now())
        sig = keystore.sign(self.keys.minor.private_key,
                            wire.note_signing_payload(to.address, note))
        # the deposit is left to expire if this step fails
        resp = self._open(to.depot_endpoint, Kind.POST_NOTE, wire.PostNote(to.address, note, sig))
        status = "accepted" if resp.status == Status.ACCEPTED else "dropped"
        return SendResult(status, code, deposit_id, note.note_id)

    # -- receiving -----------------------------------------------------------

    def list_notes(self) -> list[wire.InboxNote]:
        resp = self._authed(Kind.LIST_NOTES, wire.Empty())
        return list(wire.decode(wire.NoteList, resp.body).notes)

    def ack(self, note_id: bytes) -> None:
        self._authed(Kind.ACK_NOTE, wire.AckNote(note_id))

    def pickup(self, endpoint: str, code: str) -> wire.SealedBoxMsg:
        sig = keystore.sign(self.keys.minor.private_key, wire.pickup_signing_payload(code))
        resp = self._open(endpoint, Kind.PICKUP,
                          wire.Pickup(self.keys.minor.public_key, code, sig))
        return wire.decode(wire.SealedBoxMsg, resp.body)

    def _alert(self, kind: str, note: wire.InboxNote, detail: str) -> None:
        log.warning("note %s: %s (%s)", note.note_id.hex(), kind, detail)
        self.alerts.append(Alert(kind, note.note_id, detail))

    def fetch_all(self) -> list[ReceivedMail]:
        """Collect every pending mail; problems land in ``self.alerts``."""
        received = []
        for note in self.list_notes():
            contact = self.contacts.by_pubkey(note.sender_minor_pubkey)
            if contact is not None:
                endpoint, verified = contact.depot_endpoint, True
            elif note.depot_hint:
                endpoint, verified = note.depot_hint, False
            else:
                self._alert("unresolved", note, "unknown sender and no depot hint")
                continue
            try:
                box = self.pickup(endpoint, note.extraction_code)
            except NotFound:
                self._alert("expired", note, "deposit no longer available")
                self.ack(note.note_id)
                continue
            except (ProviderError, TransportError) as exc:
                self._alert("pickup-failed", note, str(exc))
                continue
            if hashlib.sha256(wire.encode(box)).digest() != note.body_digest:
                self._alert("tamper", note, "body does not match the sender's digest")
                continue
            try:
                body = keystore.open_box(self.keys.minor.private_key, box.box())
            except OpenError:
                self._alert("tamper", note, "sealed body failed authentication")
                continue
            received.append(ReceivedMail(note.sender_minor_pubkey,
                                         contact.label if contact else None, body,
                                         self._now(), note.note_id, verified))
            self.ack(note.note_id)
        return received


# -- state directory ---------------------------------------------------------------

def default_state_dir() -> Path:
    env = os.environ.get("SAFEMAIL_STATE_DIR")
    return Path(env) if env else Path.home() / ".safemail"


@contextlib.contextmanager
def state_lock(state_dir: Path):
    state_dir.mkdir(parents=True, exist_ok=True, mode=0o700)
    with open(state_dir / ".lock", "w") as f:
        fcntl.flock(f, fcntl.LOCK_EX)
        try:
            yield
        finally:
            fcntl.flock(f, fcntl.LOCK_UN)


@dataclass
class ClientState:
    """Files under the state dir: ``keys``, ``contacts``, ``home_provider``, ``inbox_cache/``."""
    root: Path
    keys: Optional[KeyPairSet] = None
    contacts: ContactBook = field(default_factory=ContactBook)
    home: Optional[str] = None
    address: Optional[Address] = None

    @classmethod
    def load(cls, root: Path) -> "ClientState":
        root = Path(root)
        state = cls(root)
        if (root / "keys").exists():
            state.keys = keystore.read_key_file(root / "keys")
        if (root / "contacts").exists():
            state.contacts = ContactBook.loads((root / "contacts").read_text())
        if (root / "home_provider").exists():
            values = dict(line.split("=", 1) for line in
                          (root / "home_provider").read_text().splitlines() if "=" in line)
            state.home = values.get("endpoint")
            if values.get("address"):
                state.address = Address.parse(values["address"])
        return state

    def save(self) -> None:
        self.root.mkdir(parents=True, exist_ok=True, mode=0o700)
        if self.keys is not None and not (self.root / "keys").exists():
            keystore.write_key_file(self.root / "keys", self.keys)
        (self.root / "contacts").write_text(self.contacts.dumps())
        if self.home is not None:
            (self.root / "home_provider").write_text(
                f"endpoint={self.home}\naddress={self.address or ''}\n")

    def client(self, transport: Transport, **kwargs) -> Client:
        if self.keys is None:
            raise ProviderError("no keys; run keygen first")
        return Client(self.keys, transport, contacts=self.contacts, home=self.home,
                      address=self.address, **kwargs)

    def adopt(self, client: Client) -> None:
        self.contacts, self.home, self.address = client.contacts, client.home, client.address

    def cache_mail(self, mail: ReceivedMail) -> Path:
        cache = self.root / "inbox_cache"
        cache.mkdir(exist_ok=True)
        path = cache / f"{mail.fetched_at}-{mail.note_id.hex()}.body"
        path.write_bytes(mail.body)
        with open(cache / "index.tsv", "a") as f:
            f.write("\t".join([mail.note_id.hex(), mail.from_pubkey.hex(),
                               mail.from_label or "-", "verified" if mail.verified else "unverified",
                               str(mail.fetched_at), path.name]) + "\n")
        return path
