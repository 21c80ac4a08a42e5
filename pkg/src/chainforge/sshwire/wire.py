"""SSH wire encodings (RFC 4251) and message numbers."""

from __future__ import annotations

import struct

from ..errors import ProtocolError

# Transport layer
MSG_DISCONNECT = 1
MSG_IGNORE = 2
MSG_UNIMPLEMENTED = 3
MSG_DEBUG = 4
MSG_SERVICE_REQUEST = 5
MSG_SERVICE_ACCEPT = 6
MSG_EXT_INFO = 7
MSG_KEXINIT = 20
MSG_NEWKEYS = 21
MSG_KEX_ECDH_INIT = 30
MSG_KEX_ECDH_REPLY = 31

# Userauth
MSG_USERAUTH_REQUEST = 50
MSG_USERAUTH_FAILURE = 51
MSG_USERAUTH_SUCCESS = 52
MSG_USERAUTH_BANNER = 53
MSG_USERAUTH_PK_OK = 60

# Connection
MSG_GLOBAL_REQUEST = 80
MSG_REQUEST_SUCCESS = 81
MSG_REQUEST_FAILURE = 82
MSG_CHANNEL_OPEN = 90
MSG_CHANNEL_OPEN_CONFIRMATION = 91
MSG_CHANNEL_OPEN_FAILURE = 92
MSG_CHANNEL_WINDOW_ADJUST = 93
MSG_CHANNEL_DATA = 94
MSG_CHANNEL_EXTENDED_DATA = 95
MSG_CHANNEL_EOF = 96
MSG_CHANNEL_CLOSE = 97
MSG_CHANNEL_REQUEST = 98
MSG_CHANNEL_SUCCESS = 99
MSG_CHANNEL_FAILURE = 100

DISCONNECT_BY_APPLICATION = 11
OPEN_CONNECT_FAILED = 2
OPEN_UNKNOWN_CHANNEL_TYPE = 3


class Reader:
    """Sequential reader over one SSH message payload."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def _take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ProtocolError("truncated SSH message")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def byte(self) -> int:
        return self._take(1)[0]

    def boolean(self) -> bool:
        return self._take(1)[0] != 0

    def uint32(self) -> int:
        return struct.unpack(">I", self._take(4))[0]

    def uint64(self) -> int:
        return struct.unpack(">Q", self._take(8))[0]

    def string(self) -> bytes:
        n = self.uint32()
        return self._take(n)

    def text(self) -> str:
        return self.string().decode("utf-8", errors="replace")

    def namelist(self) -> list[str]:
        raw = self.string().decode("ascii", errors="replace")
        return raw.split(",") if raw else []

    def mpint(self) -> int:
        raw = self.string()
        return int.from_bytes(raw, "big", signed=True) if raw else 0

    def remainder(self) -> bytes:
        out = self.data[self.pos:]
        self.pos = len(self.data)
        return out


class Writer:
    """Builds one SSH message payload."""

    def __init__(self):
        self._parts: list[bytes] = []

    def byte(self, v: int) -> "Writer":
        self._parts.append(bytes([v]))
        return self

    def boolean(self, v: bool) -> "Writer":
        self._parts.append(b"\x01" if v else b"\x00")
        return self

    def uint32(self, v: int) -> "Writer":
        self._parts.append(struct.pack(">I", v))
        return self

    def uint64(self, v: int) -> "Writer":
        self._parts.append(struct.pack(">Q", v))
        return self

    def string(self, v: bytes | str) -> "Writer":
        if isinstance(v, str):
            v = v.encode("utf-8")
        self._parts.append(struct.pack(">I", len(v)) + v)
        return self

    def namelist(self, names: list[str]) -> "Writer":
        return self.string(",".join(names))

    def mpint(self, v: int) -> "Writer":
        return self.string(mpint_bytes(v))

    def raw(self, v: bytes) -> "Writer":
        self._parts.append(v)
        return self

    @property
    def bytes(self) -> bytes:
        return b"".join(self._parts)


def mpint_bytes(v: int) -> bytes:
    """Minimal two's-complement big-endian encoding of a non-negative int."""
    if v == 0:
        return b""
    out = v.to_bytes((v.bit_length() + 7) // 8, "big")
    if out[0] & 0x80:
        out = b"\x00" + out
    return out
