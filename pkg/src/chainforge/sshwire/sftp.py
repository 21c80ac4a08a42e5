"""SFTP version 3 subset: open/read/write/stat/setstat/mkdir/remove/realpath.

Client transfers are byte-exact; PUT carries the local permission bits in
the OPEN attrs, GET restores them from STAT. The server side jails all
paths under a root directory and can mark subtrees read-only (fixtures
for permission-error tests).
"""

from __future__ import annotations

import os
import posixpath
import stat as stat_mod
import threading
import time
from pathlib import Path

from ..errors import ChannelClosed, SftpError
from .transport import Channel
from .wire import Reader, Writer

FXP_INIT = 1
FXP_VERSION = 2
FXP_OPEN = 3
FXP_CLOSE = 4
FXP_READ = 5
FXP_WRITE = 6
FXP_LSTAT = 7
FXP_SETSTAT = 9
FXP_MKDIR = 14
FXP_RMDIR = 15
FXP_REALPATH = 16
FXP_STAT = 17
FXP_REMOVE = 13
FXP_STATUS = 101
FXP_HANDLE = 102
FXP_DATA = 103
FXP_NAME = 104
FXP_ATTRS = 105

FX_OK = 0
FX_EOF = 1
FX_NO_SUCH_FILE = 2
FX_PERMISSION_DENIED = 3
FX_FAILURE = 4
FX_OP_UNSUPPORTED = 8

FXF_READ = 0x01
FXF_WRITE = 0x02
FXF_APPEND = 0x04
FXF_CREAT = 0x08
FXF_TRUNC = 0x10
FXF_EXCL = 0x20

ATTR_SIZE = 0x01
ATTR_UIDGID = 0x02
ATTR_PERMISSIONS = 0x04
ATTR_ACMODTIME = 0x08

CHUNK = 24576


def _pack_attrs(size: int | None = None, perms: int | None = None) -> bytes:
    flags = 0
    if size is not None:
        flags |= ATTR_SIZE
    if perms is not None:
        flags |= ATTR_PERMISSIONS
    w = Writer().uint32(flags)
    if size is not None:
        w.uint64(size)
    if perms is not None:
        w.uint32(perms)
    return w.bytes


def _read_attrs(r: Reader) -> dict:
    flags = r.uint32()
    out: dict = {}
    if flags & ATTR_SIZE:
        out["size"] = r.uint64()
    if flags & ATTR_UIDGID:
        out["uid"] = r.uint32()
        out["gid"] = r.uint32()
    if flags & ATTR_PERMISSIONS:
        out["permissions"] = r.uint32()
    if flags & ATTR_ACMODTIME:
        out["atime"] = r.uint32()
        out["mtime"] = r.uint32()
    return out


class SftpClient:
    """SFTP over an already-open session channel (subsystem requested)."""

    def __init__(self, channel: Channel, timeout: float = 30.0):
        self.channel = channel
        self.timeout = timeout
        self._buf = b""
        self._next_id = 0
        self._send_raw(Writer().byte(FXP_INIT).uint32(3).bytes)
        ptype, _ = self._read_packet()
        if ptype != FXP_VERSION:
            raise SftpError(f"expected VERSION, got packet type {ptype}")

    # framing ------------------------------------------------------------

    def _send_raw(self, payload: bytes) -> None:
        self.channel.send(Writer().uint32(len(payload)).raw(payload).bytes)

    def _read_exact(self, n: int) -> bytes:
        deadline = time.monotonic() + self.timeout
        while len(self._buf) < n:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise SftpError("sftp read timed out")
            try:
                chunk = self.channel.recv_available(min(remaining, 0.5))
            except ChannelClosed:
                raise SftpError("sftp channel closed") from None
            self._buf += chunk
        out, self._buf = self._buf[:n], self._buf[n:]
        return out

    def _read_packet(self) -> tuple[int, Reader]:
        length = Reader(self._read_exact(4)).uint32()
        payload = self._read_exact(length)
        return payload[0], Reader(payload[1:])

    def _request(self, ptype: int, body: Writer) -> tuple[int, Reader]:
        req_id = self._next_id
        self._next_id += 1
        self._send_raw(Writer().byte(ptype).uint32(req_id).raw(body.bytes).bytes)
        rtype, r = self._read_packet()
        got = r.uint32()
        if got != req_id:
            raise SftpError(f"out-of-order sftp reply ({got} != {req_id})")
        return rtype, r

    @staticmethod
    def _status_error(r: Reader, path: str) -> SftpError:
        code = r.uint32()
        message = r.text()
        return SftpError(f"{path}: {message or 'sftp error'} (status {code})")

    def _expect_status_ok(self, rtype: int, r: Reader, path: str) -> None:
        if rtype != FXP_STATUS:
            raise SftpError(f"{path}: unexpected reply type {rtype}")
        code = r.uint32()
        if code != FX_OK:
            message = r.text()
            raise SftpError(f"{path}: {message or 'sftp error'} (status {code})")

    # operations ----------------------------------------------------------

    def open(self, path: str, pflags: int, perms: int | None = None) -> bytes:
        body = Writer().string(path).uint32(pflags).raw(_pack_attrs(perms=perms))
        rtype, r = self._request(FXP_OPEN, body)
        if rtype == FXP_HANDLE:
            return r.string()
        raise self._status_error(r, path)

    def close_handle(self, handle: bytes) -> None:
        rtype, r = self._request(FXP_CLOSE, Writer().string(handle))
        self._expect_status_ok(rtype, r, "<handle>")

    def read(self, handle: bytes, offset: int, length: int) -> bytes | None:
        body = Writer().string(handle).uint64(offset).uint32(length)
        rtype, r = self._request(FXP_READ, body)
        if rtype == FXP_DATA:
            return r.string()
        if rtype == FXP_STATUS and r.uint32() == FX_EOF:
            return None
        raise SftpError("sftp read failed")

    def write(self, handle: bytes, offset: int, data: bytes) -> None:
        body = Writer().string(handle).uint64(offset).string(data)
        rtype, r = self._request(FXP_WRITE, body)
        self._expect_status_ok(rtype, r, "<write>")

    def stat(self, path: str) -> dict:
        rtype, r = self._request(FXP_STAT, Writer().string(path))
        if rtype == FXP_ATTRS:
            return _read_attrs(r)
        raise self._status_error(r, path)

    def setstat(self, path: str, perms: int) -> None:
        body = Writer().string(path).raw(_pack_attrs(perms=perms))
        rtype, r = self._request(FXP_SETSTAT, body)
        self._expect_status_ok(rtype, r, path)

    def mkdir(self, path: str, perms: int = 0o755) -> None:
        body = Writer().string(path).raw(_pack_attrs(perms=perms))
        rtype, r = self._request(FXP_MKDIR, body)
        self._expect_status_ok(rtype, r, path)

    def remove(self, path: str) -> None:
        rtype, r = self._request(FXP_REMOVE, Writer().string(path))
        self._expect_status_ok(rtype, r, path)

    def realpath(self, path: str) -> str:
        rtype, r = self._request(FXP_REALPATH, Writer().string(path))
        if rtype == FXP_NAME:
            r.uint32()  # count == 1
            return r.text()
        raise self._status_error(r, path)

    # transfers -----------------------------------------------------------

    def get(self, remote_path: str, local_path: str | Path) -> int:
        """Download; creates parent directories; preserves permission bits."""
        attrs = self.stat(remote_path)
        handle = self.open(remote_path, FXF_READ)
        local = Path(local_path)
        if local.parent and not local.parent.exists():
            local.parent.mkdir(parents=True, exist_ok=True)
        total = 0
        try:
            with open(local, "wb") as fh:
                offset = 0
                while True:
                    data = self.read(handle, offset, CHUNK)
                    if data is None:
                        break
                    fh.write(data)
                    offset += len(data)
                    total = offset
        finally:
            self.close_handle(handle)
        perms = attrs.get("permissions")
        if perms is not None:
            try:
                os.chmod(local, stat_mod.S_IMODE(perms))
            except OSError:
                pass
        return total

    def put(self, local_path: str | Path, remote_path: str,
            preserve: bool = True) -> int:
        local = Path(local_path)
        if not local.exists():
            raise SftpError(f"{local}: local file does not exist")
        perms = stat_mod.S_IMODE(local.stat().st_mode) if preserve else None
        handle = self.open(remote_path, FXF_WRITE | FXF_CREAT | FXF_TRUNC,
                           perms=perms)
        total = 0
        try:
            with open(local, "rb") as fh:
                offset = 0
                while True:
                    data = fh.read(CHUNK)
                    if not data:
                        break
                    self.write(handle, offset, data)
                    offset += len(data)
                    total = offset
        finally:
            self.close_handle(handle)
        if preserve and perms is not None:
            try:
                self.setstat(remote_path, perms)
            except SftpError:
                pass
        return total

    def close(self) -> None:
        self.channel.close()


class SftpServerHandler:
    """Serves one sftp subsystem channel from a jailed root directory."""

    def __init__(self, channel: Channel, root: str,
                 readonly: tuple[str, ...] = ()):
        self.channel = channel
        self.root = Path(root).resolve()
        self.readonly = readonly
        self._buf = b""
        self._handles: dict[bytes, object] = {}
        self._next_handle = 0

    # path jail ------------------------------------------------------------

    def _resolve(self, path: str) -> Path:
        rel = posixpath.normpath(path.lstrip("/"))
        if rel in (".", ""):
            return self.root
        if rel.startswith(".."):
            raise PermissionError("path escapes root")
        return (self.root / rel).resolve()

    def _virtual(self, path: str) -> str:
        return "/" + posixpath.normpath(path.lstrip("/")).lstrip("./")

    def _is_readonly(self, path: str) -> bool:
        v = self._virtual(path)
        return any(v == p or v.startswith(p.rstrip("/") + "/")
                   for p in self.readonly)

    # framing ----------------------------------------------------------------

    def _read_exact(self, n: int) -> bytes | None:
        while len(self._buf) < n:
            try:
                chunk = self.channel.recv_available(1.0)
            except ChannelClosed:
                return None
            self._buf += chunk
        out, self._buf = self._buf[:n], self._buf[n:]
        return out

    def _send(self, payload: bytes) -> None:
        self.channel.send(Writer().uint32(len(payload)).raw(payload).bytes)

    def _status(self, req_id: int, code: int, message: str = "") -> None:
        self._send(Writer().byte(FXP_STATUS).uint32(req_id).uint32(code)
                   .string(message).string("").bytes)

    # main loop ----------------------------------------------------------------

    def serve(self) -> None:
        try:
            self._serve()
        except ChannelClosed:
            pass
        finally:
            for fh in self._handles.values():
                try:
                    fh.close()  # type: ignore[union-attr]
                except Exception:
                    pass
            self.channel.send_eof()
            self.channel.close()

    def _serve(self) -> None:
        header = self._read_exact(4)
        if header is None:
            return
        length = Reader(header).uint32()
        payload = self._read_exact(length)
        if payload is None or payload[0] != FXP_INIT:
            return
        self._send(Writer().byte(FXP_VERSION).uint32(3).bytes)
        while True:
            header = self._read_exact(4)
            if header is None:
                return
            length = Reader(header).uint32()
            payload = self._read_exact(length)
            if payload is None:
                return
            self._handle_packet(payload[0], Reader(payload[1:]))

    def _handle_packet(self, ptype: int, r: Reader) -> None:
        req_id = r.uint32()
        try:
            if ptype == FXP_OPEN:
                self._op_open(req_id, r)
            elif ptype == FXP_CLOSE:
                handle = r.string()
                fh = self._handles.pop(handle, None)
                if fh is not None:
                    fh.close()  # type: ignore[union-attr]
                self._status(req_id, FX_OK)
            elif ptype == FXP_READ:
                self._op_read(req_id, r)
            elif ptype == FXP_WRITE:
                self._op_write(req_id, r)
            elif ptype in (FXP_STAT, FXP_LSTAT):
                self._op_stat(req_id, r)
            elif ptype == FXP_SETSTAT:
                self._op_setstat(req_id, r)
            elif ptype == FXP_MKDIR:
                self._op_mkdir(req_id, r)
            elif ptype == FXP_REMOVE:
                self._op_remove(req_id, r)
            elif ptype == FXP_REALPATH:
                path = r.text()
                v = self._virtual(path)
                self._send(Writer().byte(FXP_NAME).uint32(req_id).uint32(1)
                           .string(v).string(v).raw(_pack_attrs()).bytes)
            else:
                self._status(req_id, FX_OP_UNSUPPORTED, "not supported")
        except FileNotFoundError as exc:
            self._status(req_id, FX_NO_SUCH_FILE, str(exc))
        except PermissionError as exc:
            self._status(req_id, FX_PERMISSION_DENIED, str(exc))
        except OSError as exc:
            self._status(req_id, FX_FAILURE, str(exc))

    def _op_open(self, req_id: int, r: Reader) -> None:
        path = r.text()
        pflags = r.uint32()
        attrs = _read_attrs(r)
        if pflags & (FXF_WRITE | FXF_APPEND) and self._is_readonly(path):
            self._status(req_id, FX_PERMISSION_DENIED, f"{path} is read-only")
            return
        real = self._resolve(path)
        mode = "rb"
        if pflags & FXF_WRITE:
            if pflags & FXF_APPEND:
                mode = "ab"
            elif pflags & FXF_TRUNC or pflags & FXF_CREAT:
                mode = "wb" if not pflags & FXF_READ else "w+b"
            else:
                mode = "r+b"
        fh = open(real, mode)
        if "permissions" in attrs:
            try:
                os.chmod(real, stat_mod.S_IMODE(attrs["permissions"]))
            except OSError:
                pass
        handle = str(self._next_handle).encode()
        self._next_handle += 1
        self._handles[handle] = fh
        self._send(Writer().byte(FXP_HANDLE).uint32(req_id).string(handle).bytes)

    def _op_read(self, req_id: int, r: Reader) -> None:
        handle = r.string()
        offset = r.uint64()
        length = min(r.uint32(), CHUNK)
        fh = self._handles.get(handle)
        if fh is None:
            self._status(req_id, FX_FAILURE, "bad handle")
            return
        fh.seek(offset)
        data = fh.read(length)
        if not data:
            self._status(req_id, FX_EOF, "eof")
            return
        self._send(Writer().byte(FXP_DATA).uint32(req_id).string(data).bytes)

    def _op_write(self, req_id: int, r: Reader) -> None:
        handle = r.string()
        offset = r.uint64()
        data = r.string()
        fh = self._handles.get(handle)
        if fh is None:
            self._status(req_id, FX_FAILURE, "bad handle")
            return
        fh.seek(offset)
        fh.write(data)
        self._status(req_id, FX_OK)

    def _op_stat(self, req_id: int, r: Reader) -> None:
        path = r.text()
        st = os.stat(self._resolve(path))
        attrs = (Writer().uint32(ATTR_SIZE | ATTR_PERMISSIONS)
                 .uint64(st.st_size).uint32(st.st_mode))
        self._send(Writer().byte(FXP_ATTRS).uint32(req_id).raw(attrs.bytes).bytes)

    def _op_setstat(self, req_id: int, r: Reader) -> None:
        path = r.text()
        attrs = _read_attrs(r)
        if self._is_readonly(path):
            self._status(req_id, FX_PERMISSION_DENIED, f"{path} is read-only")
            return
        if "permissions" in attrs:
            os.chmod(self._resolve(path), stat_mod.S_IMODE(attrs["permissions"]))
        self._status(req_id, FX_OK)

    def _op_mkdir(self, req_id: int, r: Reader) -> None:
        path = r.text()
        if self._is_readonly(path):
            self._status(req_id, FX_PERMISSION_DENIED, f"{path} is read-only")
            return
        os.mkdir(self._resolve(path))
        self._status(req_id, FX_OK)

    def _op_remove(self, req_id: int, r: Reader) -> None:
        path = r.text()
        if self._is_readonly(path):
            self._status(req_id, FX_PERMISSION_DENIED, f"{path} is read-only")
            return
        os.remove(self._resolve(path))
        self._status(req_id, FX_OK)
