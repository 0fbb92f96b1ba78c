"""Key pairs and the cryptographic operations built on them.

All keys live on NIST P-256. Private keys are 32-byte big-endian scalars,
public keys are 33-byte compressed points. Signatures are RFC 6979
deterministic ECDSA with SHA-256, encoded as ``r || s`` (64 bytes) with ``s``
forced into the lower half of the group order, so each (key, message) pair
has exactly one accepted signature.

Sealed boxes are ECIES-style: an ephemeral P-256 key agrees a secret with
the recipient's public key, HKDF-SHA256 turns it into a ChaCha20-Poly1305
key, and the AEAD protects the body.
"""

from __future__ import annotations

import base64
import hashlib
import os
import random
import secrets
import stat
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Callable, Optional

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ec
from cryptography.hazmat.primitives.asymmetric.utils import (
    decode_dss_signature,
    encode_dss_signature,
)
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

CURVE = ec.SECP256R1()
ORDER = 0xFFFFFFFF00000000FFFFFFFFFFFFFFFFBCE6FAADA7179E84F3B9CAC2FC632551
HALF_ORDER = ORDER // 2

PRIVATE_KEY_SIZE = 32
PUBLIC_KEY_SIZE = 33
SIGNATURE_SIZE = 64
NONCE_SIZE = 12
TAG_SIZE = 16
MAX_BODY_BYTES = 10 * 1024 * 1024
MAX_ADDRESS_LENGTH = 254

_SEAL_INFO = b"safemail/seal/v1"

# An entropy source returns exactly n random bytes.
Entropy = Callable[[int], bytes]


class InvalidKey(ValueError):
    """Malformed or out-of-range key material."""


class KeyGenerationError(RuntimeError):
    pass


class SealError(ValueError):
    pass


class OpenError(ValueError):
    """A sealed box failed to open. Deliberately carries no detail."""


class SeededEntropy:
    """Reproducible byte stream for tests and the simulator. Not secure."""

    def __init__(self, seed: int):
        self._rng = random.Random(seed)

    def __call__(self, n: int) -> bytes:
        return self._rng.randbytes(n)


def system_entropy(n: int) -> bytes:
    return secrets.token_bytes(n)


def _draw(entropy: Optional[Entropy], n: int) -> bytes:
    source = entropy or system_entropy
    try:
        out = source(n)
    except Exception as exc:
        raise KeyGenerationError(f"entropy source failed: {exc}") from exc
    if not isinstance(out, (bytes, bytearray)) or len(out) != n:
        raise KeyGenerationError("entropy source returned wrong length")
    return bytes(out)


def _random_scalar(entropy: Optional[Entropy]) -> int:
    # rejection sampling keeps the scalar uniform over [1, ORDER)
    for _ in range(128):
        d = int.from_bytes(_draw(entropy, PRIVATE_KEY_SIZE), "big")
        if 0 < d < ORDER:
            return d
    raise KeyGenerationError("entropy source keeps producing invalid scalars")


@dataclass(frozen=True)
class KeyPair:
    private_key: bytes
    public_key: bytes

    def __repr__(self) -> str:
        return f"KeyPair(public_key={self.public_key.hex()})"


@dataclass(frozen=True)
class KeyPairSet:
    major: KeyPair
    minor: KeyPair

    def __post_init__(self):
        if self.major.public_key == self.minor.public_key:
            raise InvalidKey("major and minor keys must differ")


@dataclass(frozen=True)
class Address:
    local_part: str
    domain: str

    def __str__(self) -> str:
        return f"{self.local_part}@{self.domain}"

    @classmethod
    def parse(cls, text: str) -> "Address":
        if text.count("@") != 1:
            raise ValueError(f"not an address: {text!r}")
        local, domain = text.split("@")
        if not local or not domain or len(text) > MAX_ADDRESS_LENGTH:
            raise ValueError(f"not an address: {text!r}")
        return cls(local, domain)


@dataclass(frozen=True)
class SealedBox:
    ephemeral_pubkey: bytes
    nonce: bytes
    ciphertext: bytes
    tag: bytes


def _scalar(private_key: bytes) -> int:
    if not isinstance(private_key, (bytes, bytearray)) or len(private_key) != PRIVATE_KEY_SIZE:
        raise InvalidKey("private key must be 32 bytes")
    d = int.from_bytes(private_key, "big")
    if not 0 < d < ORDER:
        raise InvalidKey("private key out of range")
    return d


@lru_cache(maxsize=4096)
def _load_private(private_key: bytes) -> ec.EllipticCurvePrivateKey:
    return ec.derive_private_key(_scalar(private_key), CURVE)


@lru_cache(maxsize=8192)
def _load_public(public_key: bytes) -> ec.EllipticCurvePublicKey:
    if len(public_key) != PUBLIC_KEY_SIZE or public_key[0] not in (2, 3):
        raise InvalidKey("public key must be a 33-byte compressed point")
    try:
        return ec.EllipticCurvePublicKey.from_encoded_point(CURVE, public_key)
    except ValueError as exc:
        raise InvalidKey("not a point on the curve") from exc


def _compressed(key: ec.EllipticCurvePublicKey) -> bytes:
    return key.public_bytes(serialization.Encoding.X962,
                            serialization.PublicFormat.CompressedPoint)


def public_key_from_private(private_key: bytes) -> bytes:
    return _compressed(_load_private(bytes(private_key)).public_key())


def is_valid_public_key(public_key: bytes) -> bool:
    try:
        _load_public(bytes(public_key))
    except (InvalidKey, TypeError):
        return False
    return True


def generate_keypair(entropy: Optional[Entropy] = None) -> KeyPair:
    sk = _random_scalar(entropy).to_bytes(PRIVATE_KEY_SIZE, "big")
    return KeyPair(sk, public_key_from_private(sk))


def generate_keypair_set(entropy: Optional[Entropy] = None) -> KeyPairSet:
    """Create a fresh (major, minor) key pair set.

    The major pair authenticates the user to their own provider. The minor
    pair is the pseudonymous identity handed out to correspondents.
    """
    major = generate_keypair(entropy)
    minor = generate_keypair(entropy)
    while minor.public_key == major.public_key:
        minor = generate_keypair(entropy)
    return KeyPairSet(major, minor)


def sign(private_key: bytes, message: bytes) -> bytes:
    key = _load_private(bytes(private_key))
    der = key.sign(bytes(message), ec.ECDSA(hashes.SHA256(), deterministic_signing=True))
    r, s = decode_dss_signature(der)
    if s > HALF_ORDER:
        s = ORDER - s
    return r.to_bytes(32, "big") + s.to_bytes(32, "big")


def verify(public_key: bytes, message: bytes, sig: bytes) -> bool:
    """True iff ``sig`` is the canonical signature of ``message`` under ``public_key``.

    Never raises on malformed input.
    """
    try:
        if len(sig) != SIGNATURE_SIZE:
            return False
        r = int.from_bytes(sig[:32], "big")
        s = int.from_bytes(sig[32:], "big")
        if not (0 < r < ORDER and 0 < s <= HALF_ORDER):
            return False
        key = _load_public(bytes(public_key))
        key.verify(encode_dss_signature(r, s), bytes(message), ec.ECDSA(hashes.SHA256()))
        return True
    except (InvalidSignature, InvalidKey, ValueError, TypeError):
        return False


def derive_address(major_public_key: bytes, domain: str) -> Address:
    if not domain or "@" in domain:
        raise ValueError(f"invalid domain: {domain!r}")
    _load_public(bytes(major_public_key))
    digest = hashlib.sha256(bytes(major_public_key)).digest()[:20]
    local = base64.b32encode(digest).decode("ascii").lower().rstrip("=")
    addr = Address(local, domain)
    if len(str(addr)) > MAX_ADDRESS_LENGTH:
        raise ValueError("address too long")
    return addr


def _seal_key(shared: bytes, ephemeral_pub: bytes, recipient_pub: bytes) -> bytes:
    return HKDF(algorithm=hashes.SHA256(), length=32,
                salt=ephemeral_pub + recipient_pub, info=_SEAL_INFO).derive(shared)


def seal(recipient_minor_public_key: bytes, plaintext: bytes,
         entropy: Optional[Entropy] = None,
         max_body_bytes: int = MAX_BODY_BYTES) -> SealedBox:
    if len(plaintext) > max_body_bytes:
        raise SealError(f"body of {len(plaintext)} bytes exceeds {max_body_bytes}")
    recipient_pub = bytes(recipient_minor_public_key)
    recipient = _load_public(recipient_pub)
    eph = ec.derive_private_key(_random_scalar(entropy), CURVE)
    eph_pub = _compressed(eph.public_key())
    key = _seal_key(eph.exchange(ec.ECDH(), recipient), eph_pub, recipient_pub)
    nonce = _draw(entropy, NONCE_SIZE)
    sealed = ChaCha20Poly1305(key).encrypt(nonce, bytes(plaintext), eph_pub)
    return SealedBox(eph_pub, nonce, sealed[:-TAG_SIZE], sealed[-TAG_SIZE:])


def open_box(recipient_minor_private_key: bytes, box: SealedBox) -> bytes:
    """Decrypt a sealed box. Any failure surfaces as a bare ``OpenError``."""
    try:
        sk = _load_private(bytes(recipient_minor_private_key))
        eph = _load_public(bytes(box.ephemeral_pubkey))
        if len(box.nonce) != NONCE_SIZE or len(box.tag) != TAG_SIZE:
            raise OpenError()
        recipient_pub = _compressed(sk.public_key())
        key = _seal_key(sk.exchange(ec.ECDH(), eph), bytes(box.ephemeral_pubkey), recipient_pub)
        return ChaCha20Poly1305(key).decrypt(
            bytes(box.nonce), bytes(box.ciphertext) + bytes(box.tag), bytes(box.ephemeral_pubkey))
    except (InvalidTag, InvalidKey, ValueError, TypeError):
        raise OpenError("sealed box could not be opened") from None


_KEY_FIELDS = ("major_private", "major_public", "minor_private", "minor_public")


def write_key_file(path: Path | str, keys: KeyPairSet) -> None:
    path = Path(path)
    values = {
        "major_private": keys.major.private_key.hex(),
        "major_public": keys.major.public_key.hex(),
        "minor_private": keys.minor.private_key.hex(),
        "minor_public": keys.minor.public_key.hex(),
    }
    text = "".join(f"{k}={values[k]}\n" for k in _KEY_FIELDS)
    fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
    with os.fdopen(fd, "w") as f:
        f.write(text)
    os.chmod(path, stat.S_IRUSR | stat.S_IWUSR)


def read_key_file(path: Path | str) -> KeyPairSet:
    values = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        name, _, value = line.partition("=")
        values[name.strip()] = value.strip()
    missing = [k for k in _KEY_FIELDS if k not in values]
    if missing:
        raise InvalidKey(f"key file missing {', '.join(missing)}")
    pairs = []
    for role in ("major", "minor"):
        sk = bytes.fromhex(values[f"{role}_private"])
        pk = bytes.fromhex(values[f"{role}_public"])
        if public_key_from_private(sk) != pk:
            raise InvalidKey(f"{role} public key does not match private key")
        pairs.append(KeyPair(sk, pk))
    return KeyPairSet(*pairs)
