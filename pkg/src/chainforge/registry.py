"""Executor kind registry.

Maps each step `type` to its parameter schema and, for plugin kinds, the
connector that implements it. The playbook validator consults this table;
the dispatcher routes through it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

from .errors import DuplicateKind, SchemaError

# Parameters accepted by every step.
COMMON_PARAMS = frozenset({"only_if", "loop_if", "loop_count", "save", "metadata",
                           "ignore_errors"})
# Parameters accepted only by executors that touch the target infrastructure.
CONTEXT_PARAMS = frozenset({"background", "interactive", "bin", "session",
                            "creates_session"})

CMD_REQUIRED = "required"
CMD_OPTIONAL = "optional"
CMD_FORBIDDEN = "forbidden"


@dataclass(frozen=True)
class KindSpec:
    name: str
    params: frozenset[str] = frozenset()
    required: frozenset[str] = frozenset()
    cmd: str = CMD_OPTIONAL
    context: bool = False
    # "braced": only ${NAME} is substituted in cmd (regex patterns keep bare $).
    cmd_substitution: str = "full"
    plugin: str | None = None


_SSH_TARGET_PARAMS = frozenset({"hostname", "port", "username", "password",
                                "key_filename", "jump_host", "timeout",
                                "strict_host_key"})

BUILTIN_KINDS = (
    KindSpec("shell", params=frozenset({"timeout"}), cmd=CMD_REQUIRED, context=True),
    KindSpec("ssh", params=_SSH_TARGET_PARAMS, cmd=CMD_OPTIONAL, context=True),
    KindSpec("sftp", params=_SSH_TARGET_PARAMS | {"remote_path", "local_path"},
             required=frozenset({"remote_path", "local_path"}),
             cmd=CMD_REQUIRED, context=True),
    KindSpec("http-client",
             params=frozenset({"url", "local_path", "headers", "follow_redirects",
                               "verify_tls", "timeout"}),
             required=frozenset({"url"}), cmd=CMD_REQUIRED, context=True),
    KindSpec("webserv", params=frozenset({"local_path", "port", "bind"}),
             required=frozenset({"local_path", "port"}),
             cmd=CMD_FORBIDDEN, context=True),
    KindSpec("mktemp", params=frozenset({"variable"}),
             required=frozenset({"variable"}), cmd=CMD_FORBIDDEN, context=True),
    KindSpec("regex", params=frozenset({"input", "mode", "output"}),
             cmd=CMD_REQUIRED, cmd_substitution="braced"),
    KindSpec("json", params=frozenset({"local_path", "variable", "prefix"}),
             cmd=CMD_FORBIDDEN),
    KindSpec("setvar", params=frozenset({"variable", "encoder"}),
             required=frozenset({"variable"}), cmd=CMD_REQUIRED),
    KindSpec("include", params=frozenset({"local_path"}),
             required=frozenset({"local_path"}), cmd=CMD_FORBIDDEN),
    KindSpec("sleep", params=frozenset({"seconds", "min", "max"}), cmd=CMD_FORBIDDEN),
    KindSpec("loop", params=frozenset({"items", "commands"}),
             required=frozenset({"items", "commands"}), cmd=CMD_FORBIDDEN),
    KindSpec("debug", params=frozenset({"varname", "exit", "wait_for_key"}),
             cmd=CMD_FORBIDDEN),
)


class Registry:
    """Known executor kinds plus connector implementations."""

    def __init__(self, include_builtins: bool = True):
        self._kinds: dict[str, KindSpec] = {}
        self._connectors: dict[str, object] = {}  # kind -> connector impl
        if include_builtins:
            for spec in BUILTIN_KINDS:
                self._kinds[spec.name] = spec

    def register_kind(self, spec: KindSpec, impl: object | None = None) -> None:
        if spec.name in self._kinds:
            raise DuplicateKind(spec.name)
        self._kinds[spec.name] = spec
        if impl is not None:
            self._connectors[spec.name] = impl

    def resolve(self, kind: str) -> KindSpec:
        """Look up a step type; `plugin:<name>` resolves to the plugin kind."""
        name = kind.removeprefix("plugin:")
        try:
            return self._kinds[name]
        except KeyError:
            raise SchemaError(f"unknown executor kind {kind!r}") from None

    def connector_for(self, kind: str) -> object | None:
        return self._connectors.get(kind.removeprefix("plugin:"))

    def known_kinds(self) -> list[KindSpec]:
        return list(self._kinds.values())

    def __contains__(self, kind: str) -> bool:
        return kind.removeprefix("plugin:") in self._kinds

    def allowed_params(self, spec: KindSpec) -> frozenset[str]:
        allowed = COMMON_PARAMS | spec.params
        if spec.context:
            allowed = allowed | CONTEXT_PARAMS
        return allowed


_default: Registry | None = None


def default_registry() -> Registry:
    """Process-wide registry; connectors registered here are seen by the CLI."""
    global _default
    if _default is None:
        _default = Registry()
    return _default


def fresh_registry() -> Registry:
    """Isolated registry for tests and embedded use."""
    return Registry()
