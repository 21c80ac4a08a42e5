"""Named persistent sessions and interactive send/read semantics.

A session is a bidirectional byte channel with pseudo-terminal semantics
(local shell, SSH shell, or a connector-provided channel) that outlives
the steps using it. Non-interactive execution detects command completion
by wrapping the command between unique sentinel echoes; interactive sends
write bytes and drain the channel under a quiet-period timeout, never
failing because the remote program keeps running.
"""

from __future__ import annotations

import os
import re
import secrets
import threading
import time
from dataclasses import dataclass, field

from .errors import (ChannelClosed, CommandTimeout, DuplicateSession,
                     HexDecodeError, SessionError, UnknownSession)
from .ptyutil import PtyEndpoint, spawn_pty

DEFAULT_EXEC_TIMEOUT = 120.0
DEFAULT_READ_QUIET = 1.0
DEFAULT_MAX_WAIT = 30.0


@dataclass
class ExecutionResult:
    """Outcome of one executed step (or one loop round)."""
    stdout: bytes = b""
    returncode: int = 0
    duration: float = 0.0
    extra: dict = field(default_factory=dict)

    @property
    def text(self) -> str:
        return self.stdout.decode("utf-8", errors="replace")

    def capture_text(self) -> str:
        """Value stored into RESULT_STDOUT: single trailing newline stripped."""
        t = self.text
        return t[:-1] if t.endswith("\n") else t


def decode_hex_payload(payload: str) -> bytes:
    """Hex pairs, whitespace ignored, case-insensitive."""
    compact = "".join(payload.split())
    try:
        return bytes.fromhex(compact)
    except ValueError as exc:
        raise HexDecodeError(f"invalid hex payload {payload!r}: {exc}") from exc


class Session:
    """Base session: a named byte channel plus exec/interactive semantics."""

    kind = "abstract"

    def __init__(self, name: str, created_at_step: int = 0):
        self.name = name
        self.created_at_step = created_at_step
        self._io_lock = threading.Lock()  # one step at a time uses the channel

    # channel primitives, provided by subclasses
    def _send(self, data: bytes) -> None:
        raise NotImplementedError

    def _recv_available(self, timeout: float) -> bytes:
        raise NotImplementedError

    def close(self) -> None:
        raise NotImplementedError

    def alive(self) -> bool:
        raise NotImplementedError

    # ------------------------------------------------------------ exec

    def exec(self, cmd: str, timeout: float = DEFAULT_EXEC_TIMEOUT) -> ExecutionResult:
        """Run one command and wait for completion.

        The command line is wrapped between two sentinel echoes; the echoes
        are split in the typed line (`AB""CD`) so the terminal echo of the
        input never matches the marker that the shell prints.
        """
        start_tok = secrets.token_hex(8)
        end_tok = secrets.token_hex(8)
        typed = (f'echo {start_tok[:8]}""{start_tok[8:]}; '
                 f'{cmd.rstrip(chr(10))}; '
                 f'echo {end_tok[:8]}""{end_tok[8:]} $?\n')
        start_marker = start_tok.encode()
        end_re = re.compile(re.escape(end_tok.encode()) + rb" (\d+)\r?\n")

        began = time.monotonic()
        with self._io_lock:
            self._send(typed.encode())
            buf = b""
            deadline = began + timeout
            start_at = -1
            while True:
                if start_at < 0:
                    pos = buf.find(start_marker + b"\r\n")
                    if pos < 0:
                        pos = buf.find(start_marker + b"\n")
                        if pos >= 0:
                            start_at = pos + len(start_marker) + 1
                    else:
                        start_at = pos + len(start_marker) + 2
                if start_at >= 0:
                    m = end_re.search(buf, start_at)
                    if m:
                        out = buf[start_at:m.start()]
                        rc = int(m.group(1))
                        out = out.replace(b"\r\n", b"\n")
                        return ExecutionResult(out, rc, time.monotonic() - began)
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise CommandTimeout(
                        f"command in session {self.name!r} did not complete "
                        f"within {timeout:g}s: {cmd!r}")
                try:
                    chunk = self._recv_available(min(remaining, 0.25))
                except ChannelClosed:
                    raise SessionError(
                        f"session {self.name!r} closed while running {cmd!r}") from None
                buf += chunk

    # ------------------------------------------------------------ interactive

    def send_interactive(self, payload: str, bin: bool = False,
                         read_quiet: float = DEFAULT_READ_QUIET,
                         max_wait: float = DEFAULT_MAX_WAIT) -> ExecutionResult:
        """Write bytes and drain whatever arrives before the channel goes
        quiet. Never fails because the remote program keeps running."""
        data = decode_hex_payload(payload) if bin else payload.encode()
        began = time.monotonic()
        with self._io_lock:
            self._send(data)
            out = b""
            last_byte_at = time.monotonic()
            while True:
                elapsed = time.monotonic() - began
                if elapsed >= max_wait:
                    break
                quiet_left = read_quiet - (time.monotonic() - last_byte_at)
                if quiet_left <= 0:
                    break
                try:
                    chunk = self._recv_available(min(quiet_left, max_wait - elapsed))
                except ChannelClosed:
                    break
                if chunk:
                    out += chunk
                    last_byte_at = time.monotonic()
        return ExecutionResult(out, 0, time.monotonic() - began)

    def drain(self, read_quiet: float = 0.2, max_wait: float = 2.0) -> bytes:
        """Swallow pending output (prompt noise after session creation)."""
        out = b""
        began = time.monotonic()
        last = began
        while time.monotonic() - began < max_wait:
            quiet_left = read_quiet - (time.monotonic() - last)
            if quiet_left <= 0:
                break
            try:
                chunk = self._recv_available(quiet_left)
            except ChannelClosed:
                break
            if chunk:
                out += chunk
                last = time.monotonic()
        return out


class LocalShellSession(Session):
    """Persistent local shell under a real PTY."""

    kind = "local-shell"

    def __init__(self, name: str, created_at_step: int = 0,
                 shell: str | None = None, cwd: str | None = None):
        super().__init__(name, created_at_step)
        argv = [shell or os.environ.get("SHELL") or "/bin/sh"]
        pid, fd = spawn_pty(argv, cwd=cwd)
        self._ep = PtyEndpoint(pid, fd)
        self.drain()

    def _send(self, data: bytes) -> None:
        self._ep.send(data)

    def _recv_available(self, timeout: float) -> bytes:
        return self._ep.recv_available(timeout)

    def alive(self) -> bool:
        return self._ep.alive()

    def close(self) -> None:
        self._ep.close()


class ScriptedSession(Session):
    """Deterministic connector session answering from a transcript map.

    Line-oriented: every complete input line is looked up in the
    transcript; the mapped reply (plus newline) becomes readable output.
    Unknown lines produce no output.
    """

    kind = "plugin"

    def __init__(self, name: str, transcript: dict[str, str],
                 created_at_step: int = 0):
        super().__init__(name, created_at_step)
        self.transcript = dict(transcript)
        self._pending = bytearray()
        self._out = bytearray()
        self._cond = threading.Condition()
        self._closed = False
        self.input_log: list[str] = []

    def _send(self, data: bytes) -> None:
        with self._cond:
            if self._closed:
                raise ChannelClosed(f"scripted session {self.name!r} closed")
            self._pending += data
            while b"\n" in self._pending:
                line, _, rest = bytes(self._pending).partition(b"\n")
                self._pending = bytearray(rest)
                text = line.decode("utf-8", errors="replace").rstrip("\r")
                self.input_log.append(text)
                reply = self.transcript.get(text)
                if reply is not None:
                    self._out += reply.encode() + b"\n"
            self._cond.notify_all()

    def _recv_available(self, timeout: float) -> bytes:
        with self._cond:
            if not self._out:
                if self._closed:
                    raise ChannelClosed(f"scripted session {self.name!r} closed")
                self._cond.wait(timeout)
            data = bytes(self._out)
            self._out.clear()
            return data

    def exec(self, cmd: str, timeout: float = DEFAULT_EXEC_TIMEOUT) -> ExecutionResult:
        """Transcript lookup instead of sentinel wrapping; unknown commands
        yield empty output and returncode 1."""
        began = time.monotonic()
        line = cmd.rstrip("\n")
        with self._io_lock:
            self.input_log.append(line)
            reply = self.transcript.get(line)
        if reply is None:
            return ExecutionResult(b"", 1, time.monotonic() - began)
        return ExecutionResult(reply.encode() + b"\n", 0, time.monotonic() - began)

    def alive(self) -> bool:
        return not self._closed

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()


class SessionRegistry:
    """Named sessions shared by foreground steps and background workers."""

    def __init__(self, pending_wait: float = 10.0):
        self._lock = threading.Condition()
        self._sessions: dict[str, Session] = {}
        self._pending: set[str] = set()
        self._closed_names: list[str] = []
        self.pending_wait = pending_wait

    def register(self, session: Session) -> None:
        with self._lock:
            if session.name in self._sessions:
                raise DuplicateSession(session.name)
            self._sessions[session.name] = session
            self._pending.discard(session.name)
            self._lock.notify_all()

    def announce(self, name: str) -> None:
        """A background step promised to create this session."""
        with self._lock:
            self._pending.add(name)

    def retract(self, name: str) -> None:
        """The promised creation failed; stop waiters."""
        with self._lock:
            self._pending.discard(name)
            self._lock.notify_all()

    def get(self, name: str, wait: float | None = None) -> Session:
        """Fetch a session. Waits a bounded time for names announced by an
        in-flight background step; unknown names fail immediately."""
        deadline = None
        with self._lock:
            while True:
                if name in self._sessions:
                    return self._sessions[name]
                if name not in self._pending:
                    raise UnknownSession(name)
                if deadline is None:
                    deadline = time.monotonic() + (
                        self.pending_wait if wait is None else wait)
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise SessionError(
                        f"session {name!r} was announced but never registered")
                self._lock.wait(remaining)

    def names(self) -> list[str]:
        with self._lock:
            return list(self._sessions)

    def close_all(self) -> None:
        """Close every handle; idempotent; close failures are swallowed."""
        with self._lock:
            sessions = list(self._sessions.values())
            self._sessions.clear()
            self._pending.clear()
            self._lock.notify_all()
        for session in sessions:
            try:
                session.close()
            except Exception:
                pass
            self._closed_names.append(session.name)
