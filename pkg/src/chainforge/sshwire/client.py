"""High-level SSH client: one-shot exec, PTY shells, jump chains, SFTP."""

from __future__ import annotations

import socket
import time
from dataclasses import dataclass

from ..errors import AuthFailure, ChannelClosed, ConnectFailure
from ..sessions import ExecutionResult, Session
from .keys import KnownHosts, load_private_key
from .sftp import SftpClient
from .transport import Channel, ChannelStream, Transport

MAX_JUMP_DEPTH = 3


@dataclass
class SshTarget:
    hostname: str
    port: int = 22
    username: str = ""
    key_filename: str | None = None
    password: str | None = None
    jump_host: "SshTarget | None" = None

    @classmethod
    def from_params(cls, params: dict) -> "SshTarget":
        jump = params.get("jump_host")
        return cls(
            hostname=params["hostname"],
            port=int(params.get("port", 22)),
            username=params.get("username", ""),
            key_filename=params.get("key_filename"),
            password=params.get("password"),
            jump_host=cls.from_params(jump) if jump else None,
        )


class SshClient:
    """One authenticated SSH connection, possibly via jump hosts."""

    def __init__(self, transport: Transport, target: SshTarget,
                 jump: "SshClient | None" = None):
        self.transport = transport
        self.target = target
        self._jump = jump

    @classmethod
    def connect(cls, target: SshTarget, timeout: float = 30.0,
                known_hosts: KnownHosts | None = None,
                strict_host_key: bool = True,
                keepalive: float = 30.0, _depth: int = 0) -> "SshClient":
        if _depth > MAX_JUMP_DEPTH:
            raise ConnectFailure(f"jump chain deeper than {MAX_JUMP_DEPTH}")
        if not target.hostname:
            raise ConnectFailure("ssh target needs a hostname")

        jump_client: SshClient | None = None
        if target.jump_host is not None:
            jump_client = cls.connect(target.jump_host, timeout, known_hosts,
                                      strict_host_key, keepalive, _depth + 1)
            try:
                channel = jump_client.transport.open_direct_tcpip(
                    target.hostname, target.port)
            except ConnectFailure:
                jump_client.close()
                raise
            sock = ChannelStream(channel)
        else:
            try:
                sock = socket.create_connection((target.hostname, target.port),
                                                timeout=timeout)
            except OSError as exc:
                raise ConnectFailure(
                    f"cannot connect to {target.hostname}:{target.port}: {exc}"
                ) from exc

        def host_key_check(blob: bytes) -> None:
            if known_hosts is not None and strict_host_key:
                known_hosts.check(target.hostname, target.port, blob)

        transport = Transport(sock, server_side=False, timeout=timeout)
        try:
            transport.start_client(host_key_check=host_key_check)
            if target.key_filename:
                transport.auth_publickey(target.username,
                                         load_private_key(target.key_filename))
            elif target.password is not None:
                transport.auth_password(target.username, target.password)
            else:
                raise AuthFailure(
                    f"no credentials for {target.username}@{target.hostname}")
        except Exception:
            transport.close()
            if jump_client is not None:
                jump_client.close()
            raise
        if keepalive:
            transport.start_keepalive(keepalive)
        return cls(transport, target, jump_client)

    # ------------------------------------------------------------ operations

    def exec(self, cmd: str, timeout: float = 120.0) -> ExecutionResult:
        """One-shot exec channel, no PTY; stdout+stderr interleaved."""
        began = time.monotonic()
        channel = self.transport.open_session()
        try:
            if not channel.request_exec(cmd):
                raise ConnectFailure(f"exec request rejected for {cmd!r}")
            out = channel.recv_all(timeout=timeout)
            status = channel.wait_exit_status(5.0)
        finally:
            channel.close()
        return ExecutionResult(out, status if status is not None else 0,
                               time.monotonic() - began)

    def open_shell(self, term: str = "xterm", cols: int = 80,
                   rows: int = 24) -> Channel:
        """Session channel with PTY + shell, for persistent sessions."""
        channel = self.transport.open_session()
        if not channel.request_pty(term, cols, rows):
            channel.close()
            raise ConnectFailure("pty request rejected")
        if not channel.request_shell():
            channel.close()
            raise ConnectFailure("shell request rejected")
        return channel

    def open_sftp(self, timeout: float = 30.0) -> SftpClient:
        channel = self.transport.open_session()
        if not channel.request_subsystem("sftp"):
            channel.close()
            raise ConnectFailure("sftp subsystem rejected")
        return SftpClient(channel, timeout=timeout)

    def close(self) -> None:
        self.transport.close()
        if self._jump is not None:
            self._jump.close()


class SshShellSession(Session):
    """Registry session backed by a PTY shell channel on an SshClient.

    Owns the client: closing the session closes the transport (and any
    jump chain underneath it).
    """

    kind = "ssh"

    def __init__(self, name: str, client: SshClient, created_at_step: int = 0):
        super().__init__(name, created_at_step)
        self.client = client
        self.channel = client.open_shell()
        self.drain()

    def _send(self, data: bytes) -> None:
        self.channel.send(data)

    def _recv_available(self, timeout: float) -> bytes:
        return self.channel.recv_available(timeout)

    def alive(self) -> bool:
        return self.client.transport.is_alive and not self.channel.closed

    def close(self) -> None:
        try:
            self.channel.close()
        except ChannelClosed:
            pass
        self.client.close()
