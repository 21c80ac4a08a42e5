"""Loopback SSH server used as the test fixture for the remote executors.

Session channels get a real shell under a PTY (shell request) or run a
one-shot command (exec request); an sftp subsystem serves a directory
subtree. The host records authentication events, exec requests and the
raw bytes typed into session channels, which is exactly what the
integration tests assert on.
"""

from __future__ import annotations

import fcntl
import os
import signal as signal_mod
import socket
import struct
import subprocess
import termios
import threading

from cryptography.hazmat.primitives.asymmetric import ed25519

from ..errors import ChannelClosed
from ..ptyutil import PtyEndpoint, spawn_pty
from .keys import public_blob
from .sftp import SftpServerHandler
from .transport import Channel, Transport


class Recorder:
    """Observable server-side events, shared across connections."""

    def __init__(self):
        self._lock = threading.Lock()
        self.auth_successes: list[tuple[str, str]] = []
        self.auth_failures: list[tuple[str, str]] = []
        self.exec_requests: list[str] = []
        self.session_opens: int = 0
        self.channel_input = bytearray()  # bytes typed into session channels

    def record(self, bucket: str, item) -> None:
        with self._lock:
            getattr(self, bucket).append(item)

    @property
    def auth_count(self) -> int:
        with self._lock:
            return len(self.auth_successes)

    @property
    def exec_count(self) -> int:
        with self._lock:
            return len(self.exec_requests)

    def input_text(self) -> str:
        with self._lock:
            return bytes(self.channel_input).decode("utf-8", errors="replace")


class _SessionState:
    """Per-channel server state: pty dimensions, spawned process."""

    def __init__(self):
        self.pty_requested = False
        self.rows = 24
        self.cols = 80
        self.endpoint: PtyEndpoint | None = None
        self.proc: subprocess.Popen | None = None


class ServerHandlers:
    """Channel/auth policy for one SshServerHost; shared by connections."""

    allow_direct_tcpip = True

    def __init__(self, host: "SshServerHost"):
        self.host = host
        self._states: dict[int, _SessionState] = {}
        self._lock = threading.Lock()

    # -- auth policy

    def check_password(self, username: str, password: str) -> bool:
        expect = self.host.users.get(username)
        return expect is not None and expect == password

    def check_public_key(self, username: str, blob: bytes) -> bool:
        return blob in self.host.authorized_blobs

    def record_auth_success(self, username: str, method: str) -> None:
        self.host.recorder.record("auth_successes", (username, method))

    def record_auth_failure(self, username: str, method: str) -> None:
        self.host.recorder.record("auth_failures", (username, method))

    # -- channels

    def session_opened(self, transport: Transport, channel: Channel) -> None:
        with self._lock:
            self._states[id(channel)] = _SessionState()
        self.host.recorder.session_opens += 1

    def _state(self, channel: Channel) -> _SessionState:
        with self._lock:
            return self._states.setdefault(id(channel), _SessionState())

    def channel_request(self, transport: Transport, channel: Channel,
                        name: str, body) -> bool:
        state = self._state(channel)
        if name == "pty-req":
            body.text()  # term
            state.cols = body.uint32()
            state.rows = body.uint32()
            state.pty_requested = True
            return True
        if name == "env":
            return True
        if name == "window-change":
            cols, rows = body.uint32(), body.uint32()
            state.cols, state.rows = cols, rows
            if state.endpoint is not None:
                try:
                    fcntl.ioctl(state.endpoint.fd, termios.TIOCSWINSZ,
                                struct.pack("HHHH", rows, cols, 0, 0))
                except OSError:
                    pass
            return True
        if name == "shell":
            threading.Thread(target=self._run_shell,
                             args=(transport, channel, state), daemon=True).start()
            return True
        if name == "exec":
            command = body.text()
            self.host.recorder.record("exec_requests", command)
            threading.Thread(target=self._run_exec,
                             args=(transport, channel, state, command),
                             daemon=True).start()
            return True
        if name == "subsystem":
            sub = body.text()
            if sub == "sftp":
                handler = SftpServerHandler(channel, self.host.sftp_root,
                                            readonly=self.host.sftp_readonly)
                threading.Thread(target=handler.serve, daemon=True).start()
                return True
            return False
        if name == "signal":
            sig = body.text()
            if state.endpoint is not None:
                signum = getattr(signal_mod, f"SIG{sig}", signal_mod.SIGTERM)
                try:
                    os.killpg(os.getpgid(state.endpoint.pid), signum)
                except (OSError, ProcessLookupError):
                    pass
            return True
        return False

    def tunnel_opened(self, transport: Transport, channel: Channel,
                      out_sock: socket.socket, host: str, port: int) -> None:
        def sock_to_channel():
            try:
                while True:
                    data = out_sock.recv(32768)
                    if not data:
                        break
                    channel.send(data)
            except (OSError, ChannelClosed):
                pass
            finally:
                channel.send_eof()
                channel.close()

        def channel_to_sock():
            try:
                while True:
                    data = channel.recv_available(30.0)
                    if data:
                        out_sock.sendall(data)
            except (OSError, ChannelClosed):
                pass
            finally:
                try:
                    out_sock.shutdown(socket.SHUT_WR)
                except OSError:
                    pass

        threading.Thread(target=sock_to_channel, daemon=True).start()
        threading.Thread(target=channel_to_sock, daemon=True).start()

    # -- session payloads

    def _run_shell(self, transport: Transport, channel: Channel,
                   state: _SessionState) -> None:
        try:
            pid, fd = spawn_pty([self.host.shell], cwd=self.host.shell_cwd,
                                winsize=(state.rows, state.cols))
        except Exception:
            transport.send_exit_status(channel, 127)
            channel.send_eof()
            channel.close()
            return
        endpoint = PtyEndpoint(pid, fd)
        state.endpoint = endpoint

        def to_client():
            try:
                while True:
                    data = endpoint.recv_available(0.5)
                    if data:
                        channel.send(data)
            except (ChannelClosed, OSError):
                pass
            finally:
                transport.send_exit_status(channel, 0)
                channel.send_eof()
                channel.close()

        def from_client():
            try:
                while True:
                    data = channel.recv_available(0.5)
                    if data:
                        with self.host.recorder._lock:
                            self.host.recorder.channel_input += data
                        endpoint.send(data)
            except (ChannelClosed, OSError):
                pass
            finally:
                endpoint.close()

        threading.Thread(target=to_client, daemon=True).start()
        threading.Thread(target=from_client, daemon=True).start()

    def _run_exec(self, transport: Transport, channel: Channel,
                  state: _SessionState, command: str) -> None:
        try:
            proc = subprocess.Popen(["/bin/sh", "-c", command],
                                    cwd=self.host.shell_cwd,
                                    stdin=subprocess.PIPE,
                                    stdout=subprocess.PIPE,
                                    stderr=subprocess.STDOUT)
        except OSError:
            transport.send_exit_status(channel, 127)
            channel.send_eof()
            channel.close()
            return
        state.proc = proc

        def feed_stdin():
            try:
                while True:
                    data = channel.recv_available(0.5)
                    if data:
                        proc.stdin.write(data)
                        proc.stdin.flush()
            except (ChannelClosed, OSError, ValueError):
                pass
            finally:
                try:
                    proc.stdin.close()
                except OSError:
                    pass

        threading.Thread(target=feed_stdin, daemon=True).start()
        try:
            while True:
                data = proc.stdout.read(32768)
                if not data:
                    break
                channel.send(data)
        except (ChannelClosed, OSError):
            proc.kill()
        rc = proc.wait()
        transport.send_exit_status(channel, rc)
        channel.send_eof()
        channel.close()


class SshServerHost:
    """Listening SSH server bound to 127.0.0.1 on an ephemeral port."""

    def __init__(self, host_key: ed25519.Ed25519PrivateKey,
                 users: dict[str, str] | None = None,
                 authorized_keys: list[ed25519.Ed25519PublicKey] | None = None,
                 shell: str = "/bin/sh", shell_cwd: str | None = None,
                 sftp_root: str | None = None,
                 sftp_readonly: tuple[str, ...] = ()):
        self.host_key = host_key
        self.users = users or {}
        self.authorized_blobs = {public_blob(k) for k in (authorized_keys or [])}
        self.shell = shell
        self.shell_cwd = shell_cwd
        self.sftp_root = sftp_root or os.getcwd()
        self.sftp_readonly = sftp_readonly
        self.recorder = Recorder()
        self.handlers = ServerHandlers(self)
        self._transports: list[Transport] = []
        self._lock = threading.Lock()
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind(("127.0.0.1", 0))
        self._listener.listen(16)
        self.port = self._listener.getsockname()[1]
        self._stopped = threading.Event()
        self._accept_thread = threading.Thread(target=self._accept_loop, daemon=True)
        self._accept_thread.start()

    def _accept_loop(self) -> None:
        while not self._stopped.is_set():
            try:
                conn, _ = self._listener.accept()
            except OSError:
                return
            threading.Thread(target=self._serve_conn, args=(conn,),
                             daemon=True).start()

    def _serve_conn(self, conn: socket.socket) -> None:
        conn.settimeout(60.0)
        transport = Transport(conn, server_side=True, host_key=self.host_key,
                              server_handlers=self.handlers)
        with self._lock:
            self._transports.append(transport)
        try:
            transport.start_server()
            conn.settimeout(None)  # sessions may idle between keystrokes
        except Exception:
            transport.close()

    def stop(self) -> None:
        self._stopped.set()
        try:
            self._listener.close()
        except OSError:
            pass
        with self._lock:
            transports = list(self._transports)
        for t in transports:
            t.close()

    def __enter__(self) -> "SshServerHost":
        return self

    def __exit__(self, *exc) -> None:
        self.stop()
