"""Runtime variable store and $NAME / ${NAME} substitution.

Substitution is a single pass: values containing `$` are never re-expanded.
`$$` escapes to a literal `$`. Bare `$NAME` references follow the variable
name grammar (letters, digits, underscore, not starting with a digit);
dotted names produced by the json executor are reachable only through the
braced `${PREFIX.path}` form.
"""

from __future__ import annotations

import re
from typing import Callable, Iterator

from .errors import ReservedName, UndefinedVariable

VAR_NAME_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*\Z")
# Dotted names are allowed for engine-produced variables (json leaves).
STORE_NAME_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*(?:\.[A-Za-z0-9_]+)*\Z")

BUILTIN_NAMES = ("RESULT_STDOUT", "RESULT_RETURNCODE", "LOOP_ITEM", "LOOP_INDEX")

_REF_RE = re.compile(r"\$\$|\$\{([^}]+)\}|\$([A-Za-z_][A-Za-z0-9_]*)")
_BRACED_ONLY_RE = re.compile(r"\$\{([^}]+)\}")


def is_valid_var_name(name: str) -> bool:
    return bool(VAR_NAME_RE.match(name))


class VariableStore:
    """Mutable name -> string map with protected builtins.

    The dispatcher is the single writer; background workers operate on
    snapshots. Builtins always exist (empty string / "0" before the first
    command) and only the engine may overwrite them.
    """

    def __init__(self, entries: dict[str, str] | None = None):
        self._entries: dict[str, str] = {
            "RESULT_STDOUT": "",
            "RESULT_RETURNCODE": "0",
            "LOOP_ITEM": "",
            "LOOP_INDEX": "0",
        }
        if entries:
            for name, value in entries.items():
                self.set(name, value, source="user")

    def set(self, name: str, value: str, source: str = "user") -> None:
        """Store a value. source="user" may not touch builtins."""
        if not STORE_NAME_RE.match(name):
            raise ValueError(f"invalid variable name {name!r}")
        if source != "engine" and name in BUILTIN_NAMES:
            raise ReservedName(name)
        self._entries[name] = str(value)

    def get(self, name: str) -> str:
        try:
            return self._entries[name]
        except KeyError:
            raise UndefinedVariable(name) from None

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def names(self) -> set[str]:
        return set(self._entries)

    def public_items(self) -> Iterator[tuple[str, str]]:
        """All entries except the builtins, in insertion order."""
        for k, v in self._entries.items():
            if k not in BUILTIN_NAMES:
                yield k, v

    def items(self) -> Iterator[tuple[str, str]]:
        return iter(self._entries.items())

    def snapshot(self) -> "VariableStore":
        """Independent copy handed to background workers."""
        clone = VariableStore()
        clone._entries = dict(self._entries)
        return clone


def substitute(template: str, store: VariableStore, braced_only: bool = False) -> str:
    """Replace every ${NAME} and maximal $NAME token with its stored value.

    braced_only leaves bare `$` untouched (regex patterns, where `$` is an
    anchor). An undefined reference raises UndefinedVariable.
    """
    return _substitute(template, store, braced_only, on_missing=None)


def substitute_lenient(
    template: str,
    store: VariableStore,
    braced_only: bool = False,
    placeholder: Callable[[str], str] = lambda n: f"<{n}>",
) -> tuple[str, set[str]]:
    """Like substitute but collects undefined names instead of raising.

    Used by --dry-run, where dynamically produced variables are not yet
    available. Returns (result, missing-names).
    """
    missing: set[str] = set()

    def on_missing(name: str) -> str:
        missing.add(name)
        return placeholder(name)

    return _substitute(template, store, braced_only, on_missing), missing


def _substitute(
    template: str,
    store: VariableStore,
    braced_only: bool,
    on_missing: Callable[[str], str] | None,
) -> str:
    def resolve(name: str) -> str:
        if name in store:
            return store.get(name)
        if on_missing is not None:
            return on_missing(name)
        raise UndefinedVariable(name)

    if braced_only:
        return _BRACED_ONLY_RE.sub(lambda m: resolve(m.group(1)), template)

    def repl(m: re.Match) -> str:
        if m.group(0) == "$$":
            return "$"
        return resolve(m.group(1) or m.group(2))

    return _REF_RE.sub(repl, template)


def find_references(template: str, braced_only: bool = False) -> set[str]:
    """Names referenced by a template, without resolving them."""
    names: set[str] = set()
    if braced_only:
        for m in _BRACED_ONLY_RE.finditer(template):
            names.add(m.group(1))
        return names
    for m in _REF_RE.finditer(template):
        if m.group(0) != "$$":
            names.add(m.group(1) or m.group(2))
    return names
