"""Mail service provider.

One provider plays both roles of a mail exchange:

* note board: keeps accounts, the grants each account owner has signed, and
  the small notes that granted senders leave for the owner;
* depot: keeps sealed bodies that its own users deposit for pickup by
  whoever can sign the extraction code with the recipient's minor key.

The provider never holds a private key or a plaintext body.

On-disk layout under ``data_dir``::

    accounts/<address>/account      atomic, written once
    accounts/<address>/grants.log   append-only GrantRecord log
    accounts/<address>/notes.log    append-only NoteRecord log
    depot/<hex pubkey>/<code>.dep      atomic DepotFile
    depot/<hex pubkey>/<code>.pickups  append-only PickupRecord log
"""

from __future__ import annotations

import logging
import re
import shutil
import threading
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Optional

from . import keystore, wire
from .errors import (AlreadyRegistered, AuthError, BadRequest, CollisionError,
                     FreshnessError, GrantInvalid, NotFound, ProviderError, SizeError)
from .keystore import Address, Entropy, SealedBox
from .store import Persistence, read_log, log_is_clean, remove_temp_files
from .wire import (PUBKEY, SIG, ID16, U8, U64, AddressField, Kind, Nested, Opt, Status,
                   AuthorizationGrant, InboxNote, MailDeposit, _w, message)

log = logging.getLogger(__name__)

NOTE_LIMIT = wire.MAX_NOTE_BYTES
_SAFE_CODE = re.compile(r"[0-9A-Za-z_-]{1,64}")
_LOCK_STRIPES = 64
_MAX_PENDING_CHALLENGES = 100_000


class ConfigError(ValueError):
    pass


@dataclass
class ProviderConfig:
    domain: str
    data_dir: Path
    max_note_bytes: int = NOTE_LIMIT
    max_body_bytes: int = keystore.MAX_BODY_BYTES
    challenge_ttl_seconds: int = 300
    deposit_ttl_seconds: int = 7 * 24 * 3600
    silent_drop: bool = False
    fsync: bool = True
    listen: str = "127.0.0.1:7300"
    debug_port: int = 0

    def __post_init__(self):
        self.data_dir = Path(self.data_dir)
        if not self.domain or "@" in self.domain:
            raise ConfigError(f"invalid domain {self.domain!r}")
        if self.max_note_bytes != NOTE_LIMIT:
            raise ConfigError("max_note_bytes must be 1024")
        if self.max_body_bytes <= 0:
            raise ConfigError("max_body_bytes must be positive")
        if self.challenge_ttl_seconds <= 0 or self.deposit_ttl_seconds <= 0:
            raise ConfigError("TTLs must be positive")

    @classmethod
    def from_file(cls, path) -> "ProviderConfig":
        """Parse a flat ``key = value`` file."""
        types = {"max_note_bytes": int, "max_body_bytes": int,
                 "challenge_ttl_seconds": int, "deposit_ttl_seconds": int,
                 "debug_port": int, "silent_drop": _parse_bool, "fsync": _parse_bool}
        values = {}
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if not sep or key not in cls.__dataclass_fields__:
                raise ConfigError(f"line {lineno}: unknown setting {key!r}")
            try:
                values[key] = types.get(key, str)(value)
            except ValueError as exc:
                raise ConfigError(f"line {lineno}: bad value for {key}") from exc
        for required in ("domain", "data_dir"):
            if required not in values:
                raise ConfigError(f"missing required setting {required!r}")
        return cls(**values)


def _parse_bool(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(text)


# -- persisted record formats ----------------------------------------------------

GRANT_OP, REVOKE_OP = 1, 2
NOTE_OP, ACK_OP = 1, 2


@message(0x40)
@dataclass(frozen=True)
class AccountFile:
    address: Address = _w(AddressField())
    major_pubkey: bytes = _w(PUBKEY)
    created_at: int = _w(U64())


@message(0x41)
@dataclass(frozen=True)
class GrantRecord:
    op: int = _w(U8())
    sender_minor_pubkey: bytes = _w(PUBKEY)
    grant: Optional[AuthorizationGrant] = _w(Opt(Nested(AuthorizationGrant)))
    at: int = _w(U64())


@message(0x42)
@dataclass(frozen=True)
class NoteRecord:
    op: int = _w(U8())
    note_id: bytes = _w(ID16)
    note: Optional[InboxNote] = _w(Opt(Nested(InboxNote)))
    at: int = _w(U64())


@message(0x43)
@dataclass(frozen=True)
class DepotFile:
    deposit: MailDeposit = _w(Nested(MailDeposit))
    depositor: Address = _w(AddressField())
    stored_at: int = _w(U64())


@message(0x44)
@dataclass(frozen=True)
class PickupRecord:
    at: int = _w(U64())
    signature: bytes = _w(SIG)


# -- in-memory domain types ------------------------------------------------------

@dataclass
class AccountRecord:
    address: Address
    major_pubkey: bytes
    grants: dict = field(default_factory=dict)
    created_at: int = 0


@dataclass
class NoteBoardEntry:
    owner_address: Address
    note: InboxNote
    acked: bool = False
    received_at: int = 0


@dataclass
class DepotEntry:
    deposit: MailDeposit
    depositor_address: Address
    pickup_count: int = 0
    stored_at: int = 0


@dataclass(frozen=True)
class Auth:
    """Owner credentials for one request: a major-key signature over the
    request payload bound to a single-use server nonce."""
    pubkey: bytes
    nonce: bytes
    signature: bytes


class _Account:
    def __init__(self, record: AccountRecord, path: Path):
        self.record = record
        self.path = path
        self.notes: dict[bytes, NoteBoardEntry] = {}
        self.lock = threading.RLock()


def code_filename(code: str) -> str:
    # '~' never matches the safe pattern, so escaped names can't collide
    return code if _SAFE_CODE.fullmatch(code) else "~" + code.encode("utf-8").hex()


class Provider:
    def __init__(self, config: ProviderConfig, clock: Callable[[], float] = time.time,
                 entropy: Optional[Entropy] = None, crash_hook=None):
        self.config = config
        self.domain = config.domain
        self.clock = clock
        self.entropy = entropy or keystore.system_entropy
        self.persist = Persistence(fsync=config.fsync, crash_hook=crash_hook)
        self.stats: Counter = Counter()
        self._meta = threading.Lock()
        self._stripes = [threading.Lock() for _ in range(_LOCK_STRIPES)]
        self._challenges: dict[bytes, float] = {}
        self._accounts: dict[str, _Account] = {}
        self._depot: dict[tuple[bytes, str], DepotEntry] = {}
        self.accounts_dir = config.data_dir / "accounts"
        self.depot_dir = config.data_dir / "depot"
        self._load()

    # -- helpers -------------------------------------------------------------

    def _now(self) -> int:
        return int(self.clock())

    def _stripe(self, key) -> threading.Lock:
        return self._stripes[hash(key) % _LOCK_STRIPES]

    def _consume_nonce(self, nonce: Optional[bytes]) -> None:
        with self._meta:
            expires = self._challenges.pop(nonce, None) if nonce else None
        if expires is None or expires < self.clock():
            raise FreshnessError("challenge unknown, used or expired")

    def _authenticate(self, kind: Kind, payload: bytes, auth: Auth) -> _Account:
        self._consume_nonce(auth.nonce)
        signed = wire.request_signing_payload(kind, payload, auth.nonce)
        if not keystore.verify(auth.pubkey, signed, auth.signature):
            raise AuthError("request signature rejected")
        address = keystore.derive_address(auth.pubkey, self.domain)
        account = self._accounts.get(str(address))
        if account is None:
            raise NotFound("no such account")
        return account

    def _depot_paths(self, pubkey: bytes, code: str) -> tuple[Path, Path, Path]:
        d = self.depot_dir / pubkey.hex()
        name = code_filename(code)
        return d, d / f"{name}.dep", d / f"{name}.pickups"

    def _expired(self, entry: DepotEntry, now: float) -> bool:
        return now - entry.stored_at > self.config.deposit_ttl_seconds

    # -- registration --------------------------------------------------------

    def issue_challenge(self) -> bytes:
        nonce = self.entropy(32)
        with self._meta:
            if len(self._challenges) >= _MAX_PENDING_CHALLENGES:
                self._purge_challenges(self.clock())
            self._challenges[nonce] = self.clock() + self.config.challenge_ttl_seconds
        return nonce

    def register(self, major_pubkey: bytes, challenge_nonce: bytes, sig: bytes) -> Address:
        empty = wire.encode(wire.Empty())
        self._consume_nonce(challenge_nonce)
        signed = wire.request_signing_payload(Kind.REGISTER, empty, challenge_nonce)
        if not keystore.verify(major_pubkey, signed, sig):
            raise AuthError("registration signature rejected")
        address = keystore.derive_address(major_pubkey, self.domain)
        with self._meta:
            if str(address) in self._accounts:
                raise AlreadyRegistered("address already registered")
            path = self.accounts_dir / str(address)
            record = AccountRecord(address, bytes(major_pubkey), {}, self._now())
            account = _Account(record, path)
            self._accounts[str(address)] = account
            try:
                self.persist.mkdir(path)
                self.persist.write_atomic(
                    path / "account",
                    wire.encode(AccountFile(address, record.major_pubkey, record.created_at)))
            except Exception:
                del self._accounts[str(address)]
                raise
        log.info("registered %s", address)
        return address

    # -- grants --------------------------------------------------------------

    def submit_grant(self, auth: Auth, grant: AuthorizationGrant) -> None:
        account = self._authenticate(Kind.SUBMIT_GRANT, wire.encode(grant), auth)
        record = account.record
        if grant.recipient_address != record.address:
            raise GrantInvalid("grant names a different recipient")
        if not wire.grant_is_valid(grant, record.major_pubkey):
            raise GrantInvalid("grant signature rejected")
        with account.lock:
            current = record.grants.get(grant.sender_minor_pubkey)
            if current is not None and current.issued_at >= grant.issued_at:
                return
            self.persist.append(account.path / "grants.log", wire.encode(
                GrantRecord(GRANT_OP, grant.sender_minor_pubkey, grant, self._now())))
            record.grants[grant.sender_minor_pubkey] = grant

    def revoke_grant(self, auth: Auth, sender_minor_pubkey: bytes) -> None:
        payload = wire.encode(wire.RevokeGrant(sender_minor_pubkey))
        account = self._authenticate(Kind.REVOKE_GRANT, payload, auth)
        with account.lock:
            if sender_minor_pubkey not in account.record.grants:
                raise NotFound("no such grant")
            self.persist.append(account.path / "grants.log", wire.encode(
                GrantRecord(REVOKE_OP, sender_minor_pubkey, None, self._now())))
            del account.record.grants[sender_minor_pubkey]

    # -- note board ----------------------------------------------------------

    def post_note(self, recipient_address: Address, note: InboxNote,
                  sender_sig: bytes) -> Status:
        """Leave a note in an inbox. Only senders holding a live grant get in.

        The sender has no account here; possession of the granted minor key,
        shown by the signature, is the whole credential.
        """
        account = self._accounts.get(str(recipient_address))
        if account is None or recipient_address.domain != self.domain:
            raise NotFound("no such recipient")
        if wire.encoded_size(note) > self.config.max_note_bytes:
            raise SizeError("note exceeds 1024 bytes")
        signed = wire.note_signing_payload(recipient_address, note)
        sig_ok = keystore.verify(note.sender_minor_pubkey, signed, sender_sig)
        with account.lock:
            if not sig_ok or note.sender_minor_pubkey not in account.record.grants:
                self.stats["notes_dropped"] += 1
                return Status.ACCEPTED if self.config.silent_drop else Status.DROPPED
            if note.note_id in account.notes:
                return Status.ACCEPTED
            now = self._now()
            self.persist.append(account.path / "notes.log", wire.encode(
                NoteRecord(NOTE_OP, note.note_id, note, now)))
            account.notes[note.note_id] = NoteBoardEntry(account.record.address, note, False, now)
        self.stats["notes_accepted"] += 1
        return Status.ACCEPTED

    def list_notes(self, auth: Auth) -> list[NoteBoardEntry]:
        account = self._authenticate(Kind.LIST_NOTES, wire.encode(wire.Empty()), auth)
        with account.lock:
            pending = [e for e in account.notes.values() if not e.acked]
        # sorted() is stable, so equal timestamps keep arrival order
        return sorted(pending, key=lambda e: e.note.posted_at)

    def ack_note(self, auth: Auth, note_id: bytes) -> None:
        account = self._authenticate(Kind.ACK_NOTE, wire.encode(wire.AckNote(note_id)), auth)
        with account.lock:
            entry = account.notes.get(note_id)
            if entry is None:
                raise NotFound("no such note")
            if entry.acked:
                return
            self.persist.append(account.path / "notes.log", wire.encode(
                NoteRecord(ACK_OP, note_id, None, self._now())))
            entry.acked = True

    # -- depot ---------------------------------------------------------------

    def deposit_mail(self, auth: Auth, deposit: MailDeposit) -> bytes:
        account = self._authenticate(Kind.DEPOSIT, wire.encode(deposit), auth)
        if len(deposit.body.ciphertext) > self.config.max_body_bytes:
            raise SizeError("body exceeds provider limit")
        key = (deposit.recipient_minor_pubkey, deposit.extraction_code)
        directory, dep_path, pickups_path = self._depot_paths(*key)
        with self._stripe(key):
            now = self._now()
            existing = self._depot.get(key)
            if existing is not None and not self._expired(existing, now):
                raise CollisionError("extraction code already in use for this recipient")
            if existing is not None:
                self._purge_entry(key)
            self.persist.mkdir(directory)
            self.persist.write_atomic(dep_path, wire.encode(
                DepotFile(deposit, account.record.address, now)))
            self._depot[key] = DepotEntry(deposit, account.record.address, 0, now)
        return deposit.deposit_id

    def pickup(self, recipient_minor_pubkey: bytes, extraction_code: str,
               sig: bytes) -> SealedBox:
        """Hand out a sealed body to whoever can sign its extraction code.

        The signature is checked before existence is reported, so a caller
        without the recipient key gets the same answer for live and unknown
        codes.
        """
        key = (bytes(recipient_minor_pubkey), extraction_code)
        with self._stripe(key):
            entry = self._depot.get(key)
            sig_ok = keystore.verify(recipient_minor_pubkey,
                                     wire.pickup_signing_payload(extraction_code), sig)
            if not sig_ok:
                raise AuthError("pickup signature rejected")
            now = self._now()
            if entry is None or self._expired(entry, now):
                raise NotFound("nothing to pick up")
            _, _, pickups_path = self._depot_paths(*key)
            self.persist.append(pickups_path, wire.encode(PickupRecord(now, bytes(sig))))
            entry.pickup_count += 1
            return entry.deposit.body.box()

    # -- housekeeping --------------------------------------------------------

    def _purge_challenges(self, now: float) -> int:
        stale = [n for n, exp in self._challenges.items() if exp < now]
        for n in stale:
            del self._challenges[n]
        return len(stale)

    def _purge_entry(self, key) -> None:
        directory, dep_path, pickups_path = self._depot_paths(*key)
        self.persist.unlink(dep_path)
        self._depot.pop(key, None)
        self.persist.unlink(pickups_path)
        try:
            directory.rmdir()
        except OSError:
            pass

    def expire(self, now: Optional[float] = None) -> int:
        now = self.clock() if now is None else now
        with self._meta:
            purged = self._purge_challenges(now)
        for key in [k for k, e in list(self._depot.items()) if self._expired(e, now)]:
            with self._stripe(key):
                entry = self._depot.get(key)
                if entry is not None and self._expired(entry, now):
                    self._purge_entry(key)
                    purged += 1
        return purged

    # -- recovery ------------------------------------------------------------

    def _load(self) -> None:
        self.accounts_dir.mkdir(parents=True, exist_ok=True)
        self.depot_dir.mkdir(parents=True, exist_ok=True)
        remove_temp_files(self.config.data_dir)
        for path in sorted(self.accounts_dir.iterdir()):
            account_file = path / "account"
            if not account_file.exists():
                log.warning("removing incomplete account dir %s", path.name)
                shutil.rmtree(path)
                continue
            acct = wire.decode(AccountFile, account_file.read_bytes())
            if keystore.derive_address(acct.major_pubkey, self.domain) != acct.address:
                raise ValueError(f"account {path.name} does not match its key")
            account = _Account(AccountRecord(acct.address, acct.major_pubkey, {},
                                             acct.created_at), path)
            for raw in read_log(path / "grants.log"):
                rec = wire.decode(GrantRecord, raw)
                if rec.op == GRANT_OP and rec.grant is not None \
                        and rec.grant.recipient_address == acct.address \
                        and wire.grant_is_valid(rec.grant, acct.major_pubkey):
                    account.record.grants[rec.sender_minor_pubkey] = rec.grant
                elif rec.op == REVOKE_OP:
                    account.record.grants.pop(rec.sender_minor_pubkey, None)
            for raw in read_log(path / "notes.log"):
                rec = wire.decode(NoteRecord, raw)
                if rec.op == NOTE_OP and rec.note is not None:
                    account.notes[rec.note_id] = NoteBoardEntry(acct.address, rec.note,
                                                                False, rec.at)
                elif rec.op == ACK_OP and rec.note_id in account.notes:
                    account.notes[rec.note_id].acked = True
            self._accounts[str(acct.address)] = account
        for directory in sorted(self.depot_dir.iterdir()):
            for pickups in directory.glob("*.pickups"):
                if not pickups.with_suffix(".dep").exists():
                    pickups.unlink()
            for dep in sorted(directory.glob("*.dep")):
                rec = wire.decode(DepotFile, dep.read_bytes())
                d = rec.deposit
                entry = DepotEntry(d, rec.depositor, 0, rec.stored_at)
                entry.pickup_count = sum(1 for _ in read_log(dep.with_suffix(".pickups")))
                self._depot[(d.recipient_minor_pubkey, d.extraction_code)] = entry
            if not any(directory.iterdir()):
                directory.rmdir()

    # -- inspection ----------------------------------------------------------

    def accounts(self) -> list[AccountRecord]:
        return [a.record for a in self._accounts.values()]

    def board(self, address: Address) -> list[NoteBoardEntry]:
        """Every note ever accepted for ``address``, acked ones included."""
        account = self._accounts.get(str(address))
        if account is None:
            return []
        with account.lock:
            return list(account.notes.values())

    def depot_entries(self) -> list[DepotEntry]:
        return list(self._depot.values())

    def storage_usage(self) -> dict[str, int]:
        usage = {"accounts": 0, "notes": 0, "depot_bodies": 0, "pickups": 0, "other": 0}
        for path in self.config.data_dir.rglob("*"):
            if not path.is_file():
                continue
            size = path.stat().st_size
            if path.name == "notes.log":
                usage["notes"] += size
            elif path.name in ("account", "grants.log"):
                usage["accounts"] += size
            elif path.suffix == ".dep":
                usage["depot_bodies"] += size
            elif path.suffix == ".pickups":
                usage["pickups"] += size
            else:
                usage["other"] += size
        return usage

    # -- wire dispatch -------------------------------------------------------

    def handle(self, request: bytes) -> bytes:
        """Serve one encoded RequestEnvelope, returning an encoded Response."""
        try:
            status, body = self._dispatch(request)
            return wire.encode(wire.Response(int(status), "", body))
        except ProviderError as exc:
            return wire.encode(wire.Response(int(Status.ERROR), exc.code, b""))
        except wire.NoteTooLarge:
            return wire.encode(wire.Response(int(Status.ERROR), SizeError.code, b""))
        except wire.DecodeError as exc:
            return wire.encode(wire.Response(int(Status.ERROR), BadRequest.code,
                                              exc.code.encode()))
        except Exception:
            log.exception("internal error while handling request")
            return wire.encode(wire.Response(int(Status.ERROR), "internal", b""))

    def _dispatch(self, request: bytes) -> tuple[Status, bytes]:
        env = wire.decode(wire.RequestEnvelope, request)
        kind = Kind(env.kind)
        payload = env.decode_payload()
        auth = Auth(env.auth_pubkey, env.nonce, env.auth_signature) \
            if kind in wire.AUTHENTICATED_KINDS else None
        self.stats[f"req_{kind.name.lower()}"] += 1
        if kind == Kind.REGISTER_CHALLENGE:
            return Status.OK, wire.encode(wire.Challenge(self.issue_challenge()))
        if kind == Kind.REGISTER:
            address = self.register(env.auth_pubkey, env.nonce, env.auth_signature)
            return Status.OK, wire.encode(wire.Registered(address))
        if kind == Kind.SUBMIT_GRANT:
            self.submit_grant(auth, payload)
            return Status.OK, b""
        if kind == Kind.REVOKE_GRANT:
            self.revoke_grant(auth, payload.sender_minor_pubkey)
            return Status.OK, b""
        if kind == Kind.POST_NOTE:
            status = self.post_note(payload.recipient_address, payload.note,
                                    payload.sender_signature)
            return status, b""
        if kind == Kind.LIST_NOTES:
            entries = self.list_notes(auth)
            return Status.OK, wire.encode(wire.NoteList(tuple(e.note for e in entries)))
        if kind == Kind.ACK_NOTE:
            self.ack_note(auth, payload.note_id)
            return Status.OK, b""
        if kind == Kind.DEPOSIT:
            return Status.OK, wire.encode(wire.Receipt(self.deposit_mail(auth, payload)))
        if kind == Kind.PICKUP:
            box = self.pickup(payload.recipient_minor_pubkey, payload.extraction_code,
                              payload.signature)
            return Status.OK, wire.encode(wire.SealedBoxMsg.of(box))
        raise BadRequest("unsupported request kind")


def check_data_dir(config: ProviderConfig) -> list[str]:
    """Validate a data dir without modifying it; returns a list of problems.

    Used after crash injection: every file must decode, every log must be a
    whole number of intact records, and every stored grant must verify.
    """
    problems = []
    root = config.data_dir
    for tmp in root.rglob("*.tmp"):
        problems.append(f"leftover temp file {tmp.name}")
    accounts_dir = root / "accounts"
    for path in sorted(accounts_dir.iterdir()) if accounts_dir.exists() else []:
        try:
            acct = wire.decode(AccountFile, (path / "account").read_bytes())
        except (OSError, wire.DecodeError) as exc:
            problems.append(f"{path.name}: unreadable account ({exc})")
            continue
        if keystore.derive_address(acct.major_pubkey, config.domain) != acct.address:
            problems.append(f"{path.name}: address/key mismatch")
        for name, rec_type in (("grants.log", GrantRecord), ("notes.log", NoteRecord)):
            log_path = path / name
            if not log_is_clean(log_path):
                problems.append(f"{path.name}/{name}: partial record")
            for raw in read_log(log_path, repair=False):
                try:
                    rec = wire.decode(rec_type, raw)
                except wire.DecodeError as exc:
                    problems.append(f"{path.name}/{name}: bad record ({exc.code})")
                    continue
                if rec_type is GrantRecord and rec.grant is not None \
                        and not wire.grant_is_valid(rec.grant, acct.major_pubkey):
                    problems.append(f"{path.name}: unverifiable grant")
    depot_dir = root / "depot"
    for dep in sorted(depot_dir.rglob("*.dep")) if depot_dir.exists() else []:
        try:
            wire.decode(DepotFile, dep.read_bytes())
        except wire.DecodeError as exc:
            problems.append(f"{dep.name}: bad depot file ({exc.code})")
        if not log_is_clean(dep.with_suffix(".pickups")):
            problems.append(f"{dep.name}: partial pickup record")
    for pickups in sorted(depot_dir.rglob("*.pickups")) if depot_dir.exists() else []:
        if not pickups.with_suffix(".dep").exists():
            problems.append(f"{pickups.name}: orphan pickup log")
    return problems


def iter_data_files(root: Path) -> Iterator[Path]:
    for path in sorted(Path(root).rglob("*")):
        if path.is_file():
            yield path
