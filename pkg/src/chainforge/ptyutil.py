"""Pseudo-terminal process spawning and byte-level I/O.

Sessions get a real controlling terminal (pty.fork) so that line
discipline is live: writing 0x03 to the master interrupts the foreground
process group exactly as a human pressing Ctrl+C would.
"""

from __future__ import annotations

import fcntl
import os
import pty
import select
import signal
import struct
import termios
import time

from .errors import ChannelClosed, SpawnFailure


def spawn_pty(argv: list[str], cwd: str | None = None,
              env: dict[str, str] | None = None,
              winsize: tuple[int, int] = (24, 80)) -> tuple[int, int]:
    """Fork a child on a new PTY; returns (pid, master_fd)."""
    if not argv:
        raise SpawnFailure("empty argv")
    try:
        pid, master = pty.fork()
    except OSError as exc:
        raise SpawnFailure(f"pty fork failed: {exc}") from exc
    if pid == 0:  # child
        try:
            if cwd:
                os.chdir(cwd)
            child_env = dict(os.environ)
            if env:
                child_env.update(env)
            child_env.setdefault("TERM", "xterm")
            os.execvpe(argv[0], argv, child_env)
        except Exception:
            os._exit(127)
    rows, cols = winsize
    try:
        fcntl.ioctl(master, termios.TIOCSWINSZ, struct.pack("HHHH", rows, cols, 0, 0))
    except OSError:
        pass
    return pid, master


class PtyEndpoint:
    """Bidirectional byte channel over a PTY master fd."""

    def __init__(self, pid: int, master_fd: int):
        self.pid = pid
        self.fd = master_fd
        self._closed = False
        self._exit_status: int | None = None

    def recv_available(self, timeout: float) -> bytes:
        """Bytes available within timeout; b"" on quiet, raises ChannelClosed
        once the child side is gone and drained."""
        if self._closed:
            raise ChannelClosed("pty closed")
        try:
            ready, _, _ = select.select([self.fd], [], [], max(timeout, 0))
        except (OSError, ValueError) as exc:
            raise ChannelClosed(f"pty gone: {exc}") from exc
        if not ready:
            return b""
        try:
            data = os.read(self.fd, 65536)
        except OSError:
            # EIO on Linux when the slave side has been closed.
            raise ChannelClosed("pty child closed") from None
        if data == b"":
            raise ChannelClosed("pty eof")
        return data

    def send(self, data: bytes) -> None:
        if self._closed:
            raise ChannelClosed("pty closed")
        view = memoryview(data)
        while view:
            try:
                n = os.write(self.fd, view)
            except OSError as exc:
                raise ChannelClosed(f"pty write failed: {exc}") from exc
            view = view[n:]

    def alive(self) -> bool:
        if self._exit_status is not None:
            return False
        pid, status = os.waitpid(self.pid, os.WNOHANG)
        if pid == self.pid:
            self._exit_status = status
            return False
        return True

    def close(self) -> None:
        """Close the master (hangup to the child) and reap, escalating to
        SIGTERM/SIGKILL. Idempotent."""
        if self._closed:
            return
        self._closed = True
        try:
            os.close(self.fd)
        except OSError:
            pass
        if self._exit_status is not None:
            return
        deadline = time.monotonic() + 2.0
        sig_plan = [(0.5, signal.SIGTERM), (1.5, signal.SIGKILL)]
        sent = 0
        while time.monotonic() < deadline:
            try:
                pid, status = os.waitpid(self.pid, os.WNOHANG)
            except ChildProcessError:
                return
            if pid == self.pid:
                self._exit_status = status
                return
            elapsed = 2.0 - (deadline - time.monotonic())
            while sent < len(sig_plan) and elapsed >= sig_plan[sent][0]:
                try:
                    os.killpg(os.getpgid(self.pid), sig_plan[sent][1])
                except (OSError, ProcessLookupError):
                    pass
                sent += 1
            time.sleep(0.02)
        try:
            os.kill(self.pid, signal.SIGKILL)
            os.waitpid(self.pid, 0)
        except (OSError, ChildProcessError):
            pass
