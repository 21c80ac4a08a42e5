"""Ed25519 key handling: OpenSSH formats, host key blobs, known-hosts."""

from __future__ import annotations

import base64
import threading
from pathlib import Path

from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric import ed25519

from ..errors import AuthFailure, HostKeyError, ProtocolError
from .wire import Reader, Writer

KEY_TYPE = "ssh-ed25519"


def generate_host_key() -> ed25519.Ed25519PrivateKey:
    return ed25519.Ed25519PrivateKey.generate()


def save_private_key(key: ed25519.Ed25519PrivateKey, path: str | Path) -> None:
    pem = key.private_bytes(
        encoding=serialization.Encoding.PEM,
        format=serialization.PrivateFormat.OpenSSH,
        encryption_algorithm=serialization.NoEncryption(),
    )
    p = Path(path)
    p.write_bytes(pem)
    p.chmod(0o600)


def load_private_key(path: str | Path) -> ed25519.Ed25519PrivateKey:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise AuthFailure(f"cannot read key file {path}: {exc}") from exc
    try:
        key = serialization.load_ssh_private_key(data, password=None)
    except (ValueError, TypeError) as exc:
        raise AuthFailure(f"cannot parse key file {path}: {exc}") from exc
    if not isinstance(key, ed25519.Ed25519PrivateKey):
        raise AuthFailure(f"{path}: only ssh-ed25519 keys are supported")
    return key


def public_blob(pub: ed25519.Ed25519PublicKey) -> bytes:
    raw = pub.public_bytes(serialization.Encoding.Raw,
                           serialization.PublicFormat.Raw)
    return Writer().string(KEY_TYPE).string(raw).bytes


def public_key_line(key: ed25519.Ed25519PrivateKey, comment: str = "") -> str:
    blob = public_blob(key.public_key())
    line = f"{KEY_TYPE} {base64.b64encode(blob).decode('ascii')}"
    return f"{line} {comment}" if comment else line


def parse_public_blob(blob: bytes) -> ed25519.Ed25519PublicKey:
    r = Reader(blob)
    ktype = r.text()
    if ktype != KEY_TYPE:
        raise ProtocolError(f"unsupported key type {ktype!r}")
    raw = r.string()
    return ed25519.Ed25519PublicKey.from_public_bytes(raw)


def signature_blob(key: ed25519.Ed25519PrivateKey, data: bytes) -> bytes:
    return Writer().string(KEY_TYPE).string(key.sign(data)).bytes


def verify_signature(blob: bytes, sig_blob: bytes, data: bytes) -> bool:
    try:
        pub = parse_public_blob(blob)
        r = Reader(sig_blob)
        if r.text() != KEY_TYPE:
            return False
        pub.verify(r.string(), data)
        return True
    except Exception:
        return False


class KnownHosts:
    """Accept-new host-key store: `[host]:port ssh-ed25519 <base64>` lines."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()

    def _entry(self, host: str, port: int) -> str:
        return f"[{host}]:{port}"

    def _load(self) -> dict[str, bytes]:
        entries: dict[str, bytes] = {}
        if not self.path.exists():
            return entries
        for line in self.path.read_text().splitlines():
            parts = line.split()
            if len(parts) >= 3 and parts[1] == KEY_TYPE:
                try:
                    entries[parts[0]] = base64.b64decode(parts[2])
                except ValueError:
                    continue
        return entries

    def check(self, host: str, port: int, blob: bytes) -> None:
        """Record on first sight; error on mismatch."""
        with self._lock:
            key = self._entry(host, port)
            entries = self._load()
            known = entries.get(key)
            if known is None:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with open(self.path, "a", encoding="ascii") as fh:
                    fh.write(f"{key} {KEY_TYPE} "
                             f"{base64.b64encode(blob).decode('ascii')}\n")
                return
            if known != blob:
                raise HostKeyError(
                    f"host key for {key} changed; remove it from {self.path} "
                    f"if this is expected")
