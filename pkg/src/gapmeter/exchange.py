"""Tag-batch exchange with the external tagging partner.

File formats are bit-exact: one entry per line, fields joined by a comma and
a single space, lines newline-terminated, UTF-8 throughout. Fields containing
a comma or newline are rejected rather than quoted; the photo URLs are opaque
pseudo-random paths, so separator collisions do not occur in sanitized data.

Request file:   <nid>, <photo_url>, <first_name>
Result file:    <nid>, <tid>, <tag>, <num_people>

Both directions travel inside a hybrid asymmetric envelope so each file can
be opened only by its intended recipient, making the data flow one-way: the
sender, holding only the recipient's public key, cannot reopen its own
sealed file. Keys are RSA (2048-bit minimum) and carry 5,256,000-second
expiry metadata; retention limits are audited from that metadata rather than
enforced by background jobs.

Envelope container layout (stable across versions):

    magic b"GMXE1" | u32 BE length of wrapped key | RSA-OAEP(SHA-256)
    wrapped 32-byte AES key | 12-byte GCM nonce | AES-256-GCM ciphertext+tag

Session key and nonce are fresh per seal, so sealing the same plaintext
twice yields different ciphertexts; any tampering or key mismatch fails
authenticated decryption instead of yielding garbage.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from datetime import datetime, timedelta, timezone
from typing import Iterable, Sequence
from urllib.parse import urlparse

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import padding, rsa
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from gapmeter.core import AnonymizedRow
from gapmeter.errors import CryptoError, ParameterError, ValidationError

_MAGIC = b"GMXE1"
_SEPARATOR = ", "
_MIN_RSA_BITS = 2048

#: Key lifetime agreed with the partner (seconds).
KEY_EXPIRY_SECONDS = 5_256_000


def _check_field(name: str, value: str) -> str:
    if not value:
        raise ParameterError(f"{name} must be non-empty")
    if "," in value or "\n" in value or "\r" in value:
        raise ParameterError(
            f"{name} contains a comma or newline and cannot be encoded: {value!r}"
        )
    return value


@dataclass(frozen=True)
class TagBatchRequestEntry:
    """One photo/name pair to be tagged, keyed by nid."""

    nid: str
    photo_url: str
    first_name: str

    def __post_init__(self) -> None:
        _check_field("nid", self.nid)
        _check_field("photo_url", self.photo_url)
        _check_field("first_name", self.first_name)
        parsed = urlparse(self.photo_url)
        if not parsed.scheme or not parsed.netloc:
            raise ParameterError(f"photo_url must be an absolute URL: {self.photo_url!r}")


@dataclass(frozen=True)
class TagBatchResultEntry:
    """One tagging outcome: tagger id, assigned tag, people in the photo."""

    nid: str
    tid: str
    tag: str
    num_people: int

    def __post_init__(self) -> None:
        _check_field("nid", self.nid)
        _check_field("tid", self.tid)
        _check_field("tag", self.tag)
        if self.num_people < 0:
            raise ParameterError(f"num_people must be >= 0, got {self.num_people}")


@dataclass(frozen=True)
class JoinReport:
    n_joined: int
    n_dropped: int
    n_ignored: int


def write_request_file(entries: Sequence[TagBatchRequestEntry]) -> bytes:
    """Serialize request entries; nids must be unique within the batch."""
    seen: set[str] = set()
    for e in entries:
        if e.nid in seen:
            raise ParameterError(f"duplicate nid in batch: {e.nid}")
        seen.add(e.nid)
    lines = [f"{e.nid}{_SEPARATOR}{e.photo_url}{_SEPARATOR}{e.first_name}\n" for e in entries]
    return "".join(lines).encode("utf-8")


def parse_request_file(data: bytes) -> list[TagBatchRequestEntry]:
    """Inverse of :func:`write_request_file`; reports all bad lines at once."""
    entries: list[TagBatchRequestEntry] = []
    issues: list[tuple[int, str]] = []
    seen: set[str] = set()
    for number, line in enumerate(data.decode("utf-8").splitlines(), start=1):
        parts = line.split(_SEPARATOR)
        if len(parts) != 3:
            issues.append((number, f"expected 3 fields, found {len(parts)}"))
            continue
        try:
            entry = TagBatchRequestEntry(nid=parts[0], photo_url=parts[1], first_name=parts[2])
        except ParameterError as exc:
            issues.append((number, str(exc)))
            continue
        if entry.nid in seen:
            issues.append((number, f"duplicate nid {entry.nid}"))
            continue
        seen.add(entry.nid)
        entries.append(entry)
    if issues:
        raise ValidationError(issues)
    return entries


def write_result_file(entries: Sequence[TagBatchResultEntry]) -> bytes:
    lines = [
        f"{e.nid}{_SEPARATOR}{e.tid}{_SEPARATOR}{e.tag}{_SEPARATOR}{e.num_people}\n"
        for e in entries
    ]
    return "".join(lines).encode("utf-8")


def parse_result_file(
    data: bytes,
    request: Iterable[TagBatchRequestEntry] | Iterable[str],
    allowed_tags: Iterable[str],
) -> list[TagBatchResultEntry]:
    """Parse and validate a results file against the originating request.

    ``request`` may be the request entries themselves or just their nid
    strings (the sender retains only the nid universe once the request is
    sealed). Every problem is collected with its line number before raising,
    so the partner can fix a whole batch in one pass.
    """
    valid_nids = {e.nid if isinstance(e, TagBatchRequestEntry) else str(e) for e in request}
    tags = set(allowed_tags)
    entries: list[TagBatchResultEntry] = []
    issues: list[tuple[int, str]] = []
    for number, line in enumerate(data.decode("utf-8").splitlines(), start=1):
        parts = line.split(_SEPARATOR)
        if len(parts) != 4:
            issues.append((number, f"expected 4 fields, found {len(parts)}"))
            continue
        nid, tid, tag, raw_count = parts
        try:
            num_people = int(raw_count)
        except ValueError:
            issues.append((number, f"num_people is not an integer: {raw_count!r}"))
            continue
        problems = []
        if nid not in valid_nids:
            problems.append(f"unknown nid {nid!r}")
        if tag not in tags:
            problems.append(f"disallowed tag {tag!r}")
        if num_people < 0:
            problems.append(f"negative num_people {num_people}")
        if problems:
            issues.extend((number, p) for p in problems)
            continue
        try:
            entries.append(TagBatchResultEntry(nid=nid, tid=tid, tag=tag, num_people=num_people))
        except ParameterError as exc:
            issues.append((number, str(exc)))
    if issues:
        raise ValidationError(issues)
    return entries


def generate_keypair(key_bits: int = _MIN_RSA_BITS) -> tuple[bytes, bytes]:
    """Fresh RSA keypair as (private PEM, public PEM)."""
    if key_bits < _MIN_RSA_BITS:
        raise ParameterError(f"key must be at least {_MIN_RSA_BITS} bits, got {key_bits}")
    key = rsa.generate_private_key(public_exponent=65537, key_size=key_bits)
    private_pem = key.private_bytes(
        serialization.Encoding.PEM,
        serialization.PrivateFormat.PKCS8,
        serialization.NoEncryption(),
    )
    public_pem = key.public_key().public_bytes(
        serialization.Encoding.PEM,
        serialization.PublicFormat.SubjectPublicKeyInfo,
    )
    return private_pem, public_pem


def keypair_metadata(created_at: datetime | None = None) -> dict[str, str]:
    """Expiry metadata to persist next to a keypair."""
    created = created_at if created_at is not None else datetime.now(timezone.utc)
    expires = created + timedelta(seconds=KEY_EXPIRY_SECONDS)
    return {"created_at": created.isoformat(), "expires_at": expires.isoformat()}


def key_expired(metadata: dict[str, str], now: datetime | None = None) -> bool:
    moment = now if now is not None else datetime.now(timezone.utc)
    return moment >= datetime.fromisoformat(metadata["expires_at"])


_OAEP = padding.OAEP(
    mgf=padding.MGF1(algorithm=hashes.SHA256()),
    algorithm=hashes.SHA256(),
    label=None,
)


def seal(plaintext: bytes, recipient_public_pem: bytes) -> bytes:
    """Encrypt so that only the holder of the matching private key can read it."""
    try:
        public_key = serialization.load_pem_public_key(recipient_public_pem)
    except ValueError as exc:
        raise CryptoError(f"cannot load public key: {exc}") from exc
    if not isinstance(public_key, rsa.RSAPublicKey):
        raise CryptoError("recipient key must be an RSA public key")
    if public_key.key_size < _MIN_RSA_BITS:
        raise CryptoError(
            f"recipient key is {public_key.key_size} bits, below the {_MIN_RSA_BITS}-bit floor"
        )
    session_key = os.urandom(32)
    nonce = os.urandom(12)
    wrapped = public_key.encrypt(session_key, _OAEP)
    ciphertext = AESGCM(session_key).encrypt(nonce, plaintext, None)
    return _MAGIC + struct.pack(">I", len(wrapped)) + wrapped + nonce + ciphertext


def unseal(envelope: bytes, private_pem: bytes) -> bytes:
    """Open a sealed envelope; any mismatch or tampering raises, never garbage."""
    try:
        private_key = serialization.load_pem_private_key(private_pem, password=None)
    except ValueError as exc:
        raise CryptoError(f"cannot load private key: {exc}") from exc
    if not isinstance(private_key, rsa.RSAPrivateKey):
        raise CryptoError("key must be an RSA private key")
    header = len(_MAGIC) + 4
    if len(envelope) < header or not envelope.startswith(_MAGIC):
        raise CryptoError("not a sealed envelope (bad magic)")
    (wrapped_len,) = struct.unpack(">I", envelope[len(_MAGIC) : header])
    if len(envelope) < header + wrapped_len + 12 + 16:
        raise CryptoError("sealed envelope is truncated")
    wrapped = envelope[header : header + wrapped_len]
    nonce = envelope[header + wrapped_len : header + wrapped_len + 12]
    ciphertext = envelope[header + wrapped_len + 12 :]
    try:
        session_key = private_key.decrypt(wrapped, _OAEP)
        return AESGCM(session_key).decrypt(nonce, ciphertext, None)
    except (ValueError, InvalidTag) as exc:
        raise CryptoError("decryption failed: wrong key or tampered envelope") from exc


def join_results(
    results: Sequence[TagBatchResultEntry],
    store1: Sequence[AnonymizedRow],
) -> tuple[list[AnonymizedRow], JoinReport]:
    """Inner-join tagging results onto anonymized rows by nid.

    Store rows without a result are dropped (and counted); results without a
    matching store row are ignored (and counted). Quasi-identifiers are never
    altered. Duplicate result nids would make the join ambiguous and raise.
    """
    tag_by_nid: dict[str, str] = {}
    for entry in results:
        if entry.nid in tag_by_nid:
            raise ParameterError(f"duplicate nid in results: {entry.nid}")
        tag_by_nid[entry.nid] = entry.tag
    joined = []
    matched: set[str] = set()
    for row in store1:
        nid = str(row.nid)
        if nid in tag_by_nid:
            joined.append(row.with_group(tag_by_nid[nid]))
            matched.add(nid)
    report = JoinReport(
        n_joined=len(joined),
        n_dropped=len(store1) - len(joined),
        n_ignored=len(tag_by_nid) - len(matched),
    )
    return joined, report
