"""Exception hierarchy for the engine.

Everything raised on purpose derives from ChainforgeError so the CLI can
map failures to exit codes without catching bare Exception.
"""

from __future__ import annotations


class ChainforgeError(Exception):
    """Base class for all engine errors."""


# ---------------------------------------------------------------- playbook

class PlaybookError(ChainforgeError):
    """Base for playbook loading problems."""


class PlaybookSyntaxError(PlaybookError):
    """The document is not well-formed YAML or not the expected shape."""


class SchemaError(PlaybookError):
    """Structurally valid document that violates the playbook schema."""

    def __init__(self, message: str, step_index: int | None = None):
        if step_index is not None:
            message = f"step {step_index}: {message}"
        super().__init__(message)
        self.step_index = step_index


class IncludeCycle(PlaybookError):
    """A playbook includes itself, directly or transitively."""


# ---------------------------------------------------------------- variables

class UndefinedVariable(ChainforgeError):
    def __init__(self, name: str):
        super().__init__(f"undefined variable ${name}")
        self.name = name


class ReservedName(ChainforgeError):
    def __init__(self, name: str):
        super().__init__(f"{name} is a reserved builtin variable")
        self.name = name


class ConditionSyntaxError(ChainforgeError):
    """Condition string does not parse under the expression grammar."""


# ---------------------------------------------------------------- execution

class StepFailed(ChainforgeError):
    def __init__(self, index: int, cause: Exception | str):
        super().__init__(f"step {index} failed: {cause}")
        self.index = index
        self.cause = cause


class LoopCapExceeded(ChainforgeError):
    """loop_if still true after the default execution cap."""


class SpawnFailure(ChainforgeError):
    """Local process or worker could not be started."""


class CommandTimeout(ChainforgeError):
    """A command did not complete within its timeout."""


class FilesystemError(ChainforgeError):
    """Local filesystem operation failed."""


# ---------------------------------------------------------------- sessions

class SessionError(ChainforgeError):
    """Base for session registry and channel problems."""


class DuplicateSession(SessionError):
    def __init__(self, name: str):
        super().__init__(f"session {name!r} already exists")
        self.name = name


class UnknownSession(SessionError):
    def __init__(self, name: str):
        super().__init__(f"unknown session {name!r}")
        self.name = name


class ChannelClosed(SessionError):
    """The underlying byte channel is gone."""


class HexDecodeError(ChainforgeError):
    """bin payload is not a valid hex string."""


# ---------------------------------------------------------------- transport

class ConnectFailure(ChainforgeError):
    """TCP or channel-level connection could not be established."""


class AuthFailure(ChainforgeError):
    """Authentication with the remote side failed."""


class HostKeyError(ChainforgeError):
    """Presented host key conflicts with the recorded one."""


class TlsError(ChainforgeError):
    """TLS handshake or certificate verification failed."""


class ProtocolError(ChainforgeError):
    """Peer violated the wire protocol."""


class SftpError(ChainforgeError):
    """SFTP operation failed; message names the offending path."""


class PortInUse(ChainforgeError):
    def __init__(self, port: int):
        super().__init__(f"port {port} is already in use")
        self.port = port


# ---------------------------------------------------------------- data

class BadPattern(ChainforgeError):
    """Regular expression does not compile."""


class ParseError(ChainforgeError):
    """Input document (e.g. JSON) does not parse."""


class DecodeError(ChainforgeError):
    """Encoded value (base64, url) is invalid."""


# ---------------------------------------------------------------- plugins

class DuplicateKind(ChainforgeError):
    def __init__(self, kind: str):
        super().__init__(f"executor kind {kind!r} is already registered")
        self.kind = kind


# ---------------------------------------------------------------- logging

class LogSinkError(ChainforgeError):
    """Engine or output log could not be written; aborts the run."""
