"""Playbook document model: loading, validation, reference analysis.

A playbook is a UTF-8 YAML file with top-level keys `vars` (map) and
`commands` (sequence of step maps). Variable keys may be written with or
without a leading `$`; the `$` is stripped on load. The schema is strict:
unknown top-level keys and unknown per-step keys are rejected.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import PlaybookSyntaxError, SchemaError
from .registry import (CMD_FORBIDDEN, CMD_REQUIRED, KindSpec, Registry,
                       default_registry)
from .variables import BUILTIN_NAMES, find_references, is_valid_var_name

MAX_LOOP_NESTING = 4
LOOP_RANGE_RE = re.compile(r"(\d+)\.\.(\d+)\Z")

# Parameters whose YAML value stays structured instead of being coerced to str.
_STRUCTURED_PARAMS = {"metadata", "headers", "output", "options",
                      "payload_options", "items", "commands", "jump_host"}


@dataclass(frozen=True)
class FlowParams:
    only_if: str | None = None
    loop_if: str | None = None
    loop_count: int | str | None = None  # int, or a "$VAR" reference


@dataclass(frozen=True)
class OutputParams:
    save: str | None = None
    metadata: dict[str, str] | None = None


@dataclass(frozen=True)
class ContextParams:
    background: bool = False
    interactive: bool = False
    bin: bool = False
    session: str | None = None
    creates_session: str | None = None


@dataclass(frozen=True)
class CommandSpec:
    type: str
    cmd: str | None
    params: dict
    flow: FlowParams = FlowParams()
    output: OutputParams = OutputParams()
    context: ContextParams = ContextParams()
    ignore_errors: bool = False


@dataclass
class Playbook:
    vars: dict[str, str]
    commands: list[CommandSpec]
    path: Path | None = field(default=None, compare=False)


@dataclass(frozen=True)
class ReferenceWarning:
    step: int
    message: str

    def __str__(self) -> str:
        return f"step {self.step}: {self.message}"


# ---------------------------------------------------------------- YAML

class _StrictLoader(yaml.SafeLoader):
    """SafeLoader that rejects duplicate mapping keys."""


def _construct_mapping(loader: _StrictLoader, node: yaml.MappingNode, deep=False):
    mapping = {}
    for key_node, value_node in node.value:
        key = loader.construct_object(key_node, deep=deep)
        if key in mapping:
            raise PlaybookSyntaxError(
                f"duplicate key {key!r} at line {key_node.start_mark.line + 1}")
        mapping[key] = loader.construct_object(value_node, deep=deep)
    return mapping


_StrictLoader.add_constructor(
    yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _construct_mapping)


def _scalar_str(value, where: str, step: int | None = None) -> str:
    if isinstance(value, bool):
        return "True" if value else "False"
    if isinstance(value, (str, int, float)):
        return str(value)
    if value is None:
        return ""
    raise SchemaError(f"{where}: expected a scalar, got {type(value).__name__}", step)


def _as_bool(value, where: str, step: int | None = None) -> bool:
    if isinstance(value, bool):
        return value
    if isinstance(value, str) and value in ("true", "True"):
        return True
    if isinstance(value, str) and value in ("false", "False"):
        return False
    raise SchemaError(f"{where}: expected true/false, got {value!r}", step)


def _str_map(value, where: str, step: int | None, require_nonempty: bool) -> dict[str, str]:
    if not isinstance(value, dict):
        raise SchemaError(f"{where}: expected a mapping", step)
    out = {}
    for k, v in value.items():
        key = _scalar_str(k, where, step)
        val = _scalar_str(v, where, step)
        if require_nonempty and (not key or not val):
            raise SchemaError(f"{where}: keys and values must be non-empty", step)
        out[key] = val
    return out


# ---------------------------------------------------------------- steps

def _parse_flow(raw: dict, step: int) -> FlowParams:
    only_if = raw.pop("only_if", None)
    loop_if = raw.pop("loop_if", None)
    loop_count = raw.pop("loop_count", None)
    if only_if is not None:
        only_if = _scalar_str(only_if, "only_if", step)
    if loop_if is not None:
        loop_if = _scalar_str(loop_if, "loop_if", step)
    if loop_count is not None:
        if loop_if is None:
            raise SchemaError("loop_count without loop_if", step)
        if isinstance(loop_count, bool) or not isinstance(loop_count, (int, str)):
            raise SchemaError("loop_count: expected integer or variable reference", step)
        if isinstance(loop_count, int) and loop_count < 1:
            raise SchemaError("loop_count must be positive", step)
        if isinstance(loop_count, str) and "$" not in loop_count:
            try:
                loop_count = int(loop_count)
            except ValueError:
                raise SchemaError(
                    "loop_count: expected integer or variable reference", step) from None
            if loop_count < 1:
                raise SchemaError("loop_count must be positive", step)
    return FlowParams(only_if, loop_if, loop_count)


def _parse_output(raw: dict, step: int) -> OutputParams:
    save = raw.pop("save", None)
    metadata = raw.pop("metadata", None)
    if save is not None:
        save = _scalar_str(save, "save", step)
    if metadata is not None:
        metadata = _str_map(metadata, "metadata", step, require_nonempty=True)
    return OutputParams(save, metadata)


def _parse_context(raw: dict, spec: KindSpec, step: int) -> ContextParams:
    present = [k for k in ("background", "interactive", "bin", "session",
                           "creates_session") if k in raw]
    if not spec.context:
        if present:
            raise SchemaError(
                f"parameter {present[0]!r} not accepted by executor {spec.name!r}", step)
        return ContextParams()
    background = _as_bool(raw.pop("background"), "background", step) if "background" in raw else False
    interactive = _as_bool(raw.pop("interactive"), "interactive", step) if "interactive" in raw else False
    bin_mode = _as_bool(raw.pop("bin"), "bin", step) if "bin" in raw else False
    session = raw.pop("session", None)
    creates = raw.pop("creates_session", None)
    if session is not None:
        session = _scalar_str(session, "session", step)
    if creates is not None:
        creates = _scalar_str(creates, "creates_session", step)
    if bin_mode and not interactive:
        raise SchemaError("bin: True requires interactive: True", step)
    if interactive and not session:
        raise SchemaError("interactive: True requires a session", step)
    if session and creates:
        raise SchemaError(
            f"executor {spec.name!r} does not accept both session and creates_session", step)
    return ContextParams(background, interactive, bin_mode, session, creates)


def _parse_jump_host(value, step: int, depth: int = 1) -> dict:
    if depth > 3:
        raise SchemaError("jump chain depth exceeds 3", step)
    if not isinstance(value, dict):
        raise SchemaError("jump_host: expected a mapping", step)
    allowed = {"hostname", "port", "username", "password", "key_filename", "jump_host"}
    unknown = set(value) - allowed
    if unknown:
        raise SchemaError(f"jump_host: unknown key {sorted(unknown)[0]!r}", step)
    if "hostname" not in value:
        raise SchemaError("jump_host: hostname is required", step)
    out = {}
    for k, v in value.items():
        if k == "jump_host":
            out[k] = _parse_jump_host(v, step, depth + 1)
        else:
            out[k] = _scalar_str(v, f"jump_host.{k}", step)
    return out


def _check_sleep(params: dict, step: int) -> None:
    has_seconds = "seconds" in params
    has_range = "min" in params or "max" in params
    if has_seconds == has_range:
        raise SchemaError("sleep needs either seconds or min/max", step)
    if has_range and not ("min" in params and "max" in params):
        raise SchemaError("sleep needs both min and max", step)

    def number(name: str) -> float | None:
        raw = params[name]
        if "$" in raw:
            return None
        try:
            return float(raw)
        except ValueError:
            raise SchemaError(f"sleep {name}: not a number: {raw!r}", step) from None

    if has_seconds:
        v = number("seconds")
        if v is not None and v < 0:
            raise SchemaError("sleep seconds must be >= 0", step)
    else:
        lo, hi = number("min"), number("max")
        if lo is not None and lo < 0:
            raise SchemaError("sleep min must be >= 0", step)
        if lo is not None and hi is not None and lo > hi:
            raise SchemaError("sleep min must be <= max", step)


def _check_kind(kind: KindSpec, cmd: str | None, params: dict, step: int) -> None:
    if kind.name == "http-client":
        if cmd not in ("GET", "PUT", "POST"):
            raise SchemaError(f"http-client cmd must be GET, PUT or POST, got {cmd!r}", step)
        if cmd == "PUT" and "local_path" not in params:
            raise SchemaError("http-client PUT requires local_path", step)
        url = params.get("url", "")
        if not url.startswith("$") and not url.startswith(("http://", "https://")):
            raise SchemaError(f"http-client url must be http(s), got {url!r}", step)
    elif kind.name == "sftp":
        if cmd not in ("GET", "PUT"):
            raise SchemaError(f"sftp cmd must be GET or PUT, got {cmd!r}", step)
    elif kind.name == "sleep":
        _check_sleep(params, step)
    elif kind.name == "json":
        if ("local_path" in params) == ("variable" in params):
            raise SchemaError("json needs exactly one of local_path or variable", step)
    elif kind.name == "regex":
        mode = params.get("mode", "search")
        if mode not in ("search", "findall", "split"):
            raise SchemaError(f"regex mode must be search, findall or split, got {mode!r}", step)
    elif kind.name == "webserv":
        try:
            port = int(params["port"])
        except ValueError:
            if "$" not in params["port"]:
                raise SchemaError(f"webserv port: not a number: {params['port']!r}", step) from None
        else:
            if not 0 < port < 65536:
                raise SchemaError(f"webserv port out of range: {port}", step)


def parse_step(raw: dict, step: int, registry: Registry,
               loop_depth: int = 0) -> CommandSpec:
    if not isinstance(raw, dict):
        raise SchemaError("step must be a mapping", step)
    raw = dict(raw)
    if "type" not in raw:
        raise SchemaError("missing type", step)
    type_name = _scalar_str(raw.pop("type"), "type", step)
    spec = registry.resolve(type_name)  # raises SchemaError for unknown kinds

    cmd = raw.pop("cmd", None)
    if cmd is not None:
        cmd = _scalar_str(cmd, "cmd", step)
    if spec.cmd == CMD_REQUIRED and cmd is None:
        raise SchemaError(f"executor {spec.name!r} requires cmd", step)
    if spec.cmd == CMD_FORBIDDEN and cmd is not None:
        raise SchemaError(f"executor {spec.name!r} does not take cmd", step)

    flow = _parse_flow(raw, step)
    output = _parse_output(raw, step)
    ignore_errors = (_as_bool(raw.pop("ignore_errors"), "ignore_errors", step)
                     if "ignore_errors" in raw else False)
    context = _parse_context(raw, spec, step)

    params: dict = {}
    for key in list(raw):
        if key not in spec.params:
            raise SchemaError(
                f"parameter {key!r} not accepted by executor {spec.name!r}", step)
        value = raw.pop(key)
        if key == "commands":
            if loop_depth + 1 > MAX_LOOP_NESTING:
                raise SchemaError(f"loop nesting exceeds {MAX_LOOP_NESTING}", step)
            if not isinstance(value, list) or not value:
                raise SchemaError("loop commands must be a non-empty list", step)
            params[key] = [parse_step(s, step, registry, loop_depth + 1) for s in value]
        elif key == "items":
            if isinstance(value, list):
                params[key] = [_scalar_str(v, "items", step) for v in value]
            else:
                params[key] = _scalar_str(value, "items", step)
        elif key == "jump_host":
            params[key] = _parse_jump_host(value, step)
        elif key in ("metadata", "headers", "options", "payload_options"):
            params[key] = _str_map(value, key, step, require_nonempty=False)
        elif key == "output":
            params[key] = _str_map(value, key, step, require_nonempty=True)
        elif key in ("exit", "wait_for_key", "follow_redirects", "verify_tls",
                     "strict_host_key"):
            params[key] = _as_bool(value, key, step)
        else:
            params[key] = _scalar_str(value, key, step)

    missing = spec.required - set(params)
    if missing:
        raise SchemaError(
            f"executor {spec.name!r} requires parameter {sorted(missing)[0]!r}", step)
    _check_kind(spec, cmd, params, step)

    return CommandSpec(type=type_name, cmd=cmd, params=params, flow=flow,
                       output=output, context=context, ignore_errors=ignore_errors)


# ---------------------------------------------------------------- document

def parse_playbook_text(text: str, registry: Registry | None = None,
                        path: Path | None = None) -> Playbook:
    registry = registry or default_registry()
    try:
        doc = yaml.load(text, Loader=_StrictLoader)
    except PlaybookSyntaxError:
        raise
    except yaml.YAMLError as exc:
        raise PlaybookSyntaxError(f"malformed YAML: {exc}") from exc
    if not isinstance(doc, dict):
        raise PlaybookSyntaxError("playbook must be a mapping with vars/commands")
    unknown = set(doc) - {"vars", "commands"}
    if unknown:
        raise SchemaError(f"unknown top-level key {sorted(unknown)[0]!r}")

    raw_vars = doc.get("vars") or {}
    if not isinstance(raw_vars, dict):
        raise SchemaError("vars must be a mapping")
    pb_vars: dict[str, str] = {}
    for key, value in raw_vars.items():
        name = _scalar_str(key, "vars key")
        name = name[1:] if name.startswith("$") else name
        if not is_valid_var_name(name):
            raise SchemaError(f"invalid variable name {name!r}")
        if name in BUILTIN_NAMES:
            raise SchemaError(f"vars may not define builtin {name!r}")
        if name in pb_vars:
            raise SchemaError(f"duplicate variable {name!r}")
        pb_vars[name] = _scalar_str(value, f"vars.{name}")

    commands = doc.get("commands")
    if commands is None or commands == []:
        raise SchemaError("empty attack chain")
    if not isinstance(commands, list):
        raise SchemaError("commands must be a sequence")
    steps = [parse_step(s, i, registry) for i, s in enumerate(commands)]
    return Playbook(vars=pb_vars, commands=steps, path=path)


def load_playbook(path: str | os.PathLike, registry: Registry | None = None) -> Playbook:
    """Load and validate a playbook file. No execution side effects."""
    p = Path(path)
    text = p.read_text(encoding="utf-8")
    return parse_playbook_text(text, registry, path=p.resolve())


# ---------------------------------------------------------------- serialize

def step_to_mapping(step: CommandSpec) -> dict:
    out: dict = {"type": step.type}
    if step.cmd is not None:
        out["cmd"] = step.cmd
    for key, value in step.params.items():
        if key == "commands":
            out[key] = [step_to_mapping(s) for s in value]
        else:
            out[key] = value
    f, o, c = step.flow, step.output, step.context
    if f.only_if is not None:
        out["only_if"] = f.only_if
    if f.loop_if is not None:
        out["loop_if"] = f.loop_if
    if f.loop_count is not None:
        out["loop_count"] = f.loop_count
    if o.save is not None:
        out["save"] = o.save
    if o.metadata is not None:
        out["metadata"] = o.metadata
    if c.background:
        out["background"] = True
    if c.interactive:
        out["interactive"] = True
    if c.bin:
        out["bin"] = True
    if c.session is not None:
        out["session"] = c.session
    if c.creates_session is not None:
        out["creates_session"] = c.creates_session
    if step.ignore_errors:
        out["ignore_errors"] = True
    return out


def serialize(pb: Playbook) -> str:
    """YAML text that parses back to a structurally equal Playbook."""
    doc = {"vars": dict(pb.vars),
           "commands": [step_to_mapping(s) for s in pb.commands]}
    return yaml.safe_dump(doc, sort_keys=False, default_flow_style=False)


# ---------------------------------------------------------------- analysis

def _iter_steps(steps: list[CommandSpec]):
    for step in steps:
        yield step
        if step.type == "loop":
            yield from _iter_steps(step.params["commands"])


def _collect_string_fields(step: CommandSpec) -> list[tuple[str, bool]]:
    """(template, braced_only) pairs referenced by a step."""
    fields: list[tuple[str, bool]] = []
    if step.cmd is not None:
        fields.append((step.cmd, step.type == "regex"))
    for key, value in step.params.items():
        if key == "commands":
            continue
        if isinstance(value, str):
            fields.append((value, False))
        elif isinstance(value, dict):
            fields.extend((v, False) for v in value.values() if isinstance(v, str))
        elif isinstance(value, list):
            fields.extend((v, False) for v in value if isinstance(v, str))
    for cond in (step.flow.only_if, step.flow.loop_if):
        if cond is not None:
            fields.append((cond, False))
    if isinstance(step.flow.loop_count, str):
        fields.append((step.flow.loop_count, False))
    if step.output.save is not None:
        fields.append((step.output.save, False))
    if step.context.session is not None:
        fields.append((step.context.session, False))
    return fields


def validate_references(pb: Playbook, registry: Registry | None = None,
                        _seen: set[Path] | None = None,
                        _depth: int = 0) -> list[ReferenceWarning]:
    """Best-effort static analysis: dangling sessions and unsourced variables.

    Warnings never block execution; values may be produced dynamically.
    Statically resolvable includes are expanded for the analysis.
    """
    registry = registry or default_registry()
    warnings: list[ReferenceWarning] = []
    created: set[str] = set()
    producible: set[str] = set(pb.vars) | set(BUILTIN_NAMES)
    json_prefixes: list[str] = []
    any_regex = False

    def name_known(name: str) -> bool:
        if name in producible:
            return True
        if any_regex and re.fullmatch(r"MATCH_\d+", name):
            return True
        return any(name == p or name.startswith(p + ".") for p in json_prefixes)

    def walk(steps: list[CommandSpec], seen: set[Path], depth: int) -> None:
        nonlocal any_regex
        for idx, step in enumerate(steps):
            for template, braced in _collect_string_fields(step):
                for ref in sorted(find_references(template, braced_only=braced)):
                    if not name_known(ref):
                        warnings.append(ReferenceWarning(
                            idx, f"variable ${ref} has no static source"))
            sess = step.context.session
            if sess and "$" not in sess and sess not in created:
                warnings.append(ReferenceWarning(
                    idx, f"session {sess!r} is never created by an earlier step"))
            if step.context.creates_session:
                created.add(step.context.creates_session)
            if step.type == "webserv" and not step.context.background:
                warnings.append(ReferenceWarning(
                    idx, "webserv without background: true blocks the chain"))
            if step.type == "mktemp" or step.type == "setvar":
                producible.add(step.params["variable"])
            elif step.type == "regex":
                any_regex = True
                producible.update(step.params.get("output", {}).values())
            elif step.type == "json":
                prefix = step.params.get("prefix")
                if prefix:
                    json_prefixes.append(prefix)
            elif step.type == "loop":
                walk(step.params["commands"], seen, depth)
            elif step.type == "include":
                child_path = step.params["local_path"]
                if "$" not in child_path and depth < 8:
                    try:
                        resolved = Path(child_path)
                        if not resolved.is_absolute() and pb.path:
                            resolved = pb.path.parent / resolved
                        resolved = resolved.resolve()
                        if resolved not in seen:
                            child = load_playbook(resolved, registry)
                            producible.update(child.vars)
                            walk(child.commands, seen | {resolved}, depth + 1)
                    except (OSError, PlaybookSyntaxError, SchemaError):
                        pass  # execution will surface the real error

    seen = {pb.path} if pb.path else set()
    walk(pb.commands, seen, 0)
    return warnings
