"""Condition expressions for only_if / loop_if.

Grammar (a reconstruction; precedence not > and > or, comparisons bind
tighter than connectives):

    expr   := or
    or     := and ("or" and)*
    and    := unary ("and" unary)*
    unary  := "not" unary | primary
    primary:= "(" expr ")" | term [op term]
    op     := == | != | <= | >= | < | > | =~

Terms are quoted strings or bare words. Both sides numeric -> numeric
comparison, otherwise lexicographic. `=~` treats the right term as a
regular expression searched anywhere in the left term. A bare term with
no operator is truthy unless it is "", "0", "false" or "False".

Variable substitution happens on the raw string before parsing, so values
containing spaces must be quoted in the playbook.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from .errors import ConditionSyntaxError
from .variables import VariableStore, substitute

_OPERATORS = ("==", "!=", "<=", ">=", "=~", "<", ">")
_KEYWORDS = ("and", "or", "not")


@dataclass(frozen=True)
class Token:
    kind: str  # "op" | "lparen" | "rparen" | "keyword" | "term"
    value: str


def _tokenize(text: str) -> list[Token]:
    tokens: list[Token] = []
    i, n = 0, len(text)
    while i < n:
        c = text[i]
        if c.isspace():
            i += 1
            continue
        if c == "(":
            tokens.append(Token("lparen", c))
            i += 1
            continue
        if c == ")":
            tokens.append(Token("rparen", c))
            i += 1
            continue
        if c in ("'", '"'):
            j = text.find(c, i + 1)
            if j < 0:
                raise ConditionSyntaxError(f"unterminated string in condition: {text!r}")
            tokens.append(Token("term", text[i + 1:j]))
            i = j + 1
            continue
        two = text[i:i + 2]
        if two in _OPERATORS:
            tokens.append(Token("op", two))
            i += 2
            continue
        if c in ("<", ">"):
            tokens.append(Token("op", c))
            i += 1
            continue
        # Bare word: runs until whitespace, paren or an operator sequence.
        j = i
        while j < n:
            ch = text[j]
            if ch.isspace() or ch in "()":
                break
            if text[j:j + 2] in _OPERATORS or ch in ("<", ">"):
                break
            j += 1
        if j == i:
            raise ConditionSyntaxError(f"unexpected character {c!r} in condition: {text!r}")
        word = text[i:j]
        if word in _KEYWORDS:
            tokens.append(Token("keyword", word))
        else:
            tokens.append(Token("term", word))
        i = j
    return tokens


# ---------------------------------------------------------------- AST

@dataclass(frozen=True)
class Node:
    pass


@dataclass(frozen=True)
class OrNode(Node):
    left: Node
    right: Node


@dataclass(frozen=True)
class AndNode(Node):
    left: Node
    right: Node


@dataclass(frozen=True)
class NotNode(Node):
    operand: Node


@dataclass(frozen=True)
class CmpNode(Node):
    op: str
    left: str
    right: str


@dataclass(frozen=True)
class TruthyNode(Node):
    term: str


class _Parser:
    def __init__(self, tokens: list[Token], text: str):
        self.tokens = tokens
        self.pos = 0
        self.text = text

    def peek(self) -> Token | None:
        return self.tokens[self.pos] if self.pos < len(self.tokens) else None

    def take(self) -> Token:
        tok = self.peek()
        if tok is None:
            raise ConditionSyntaxError(f"unexpected end of condition: {self.text!r}")
        self.pos += 1
        return tok

    def parse(self) -> Node:
        node = self.parse_or()
        if self.peek() is not None:
            raise ConditionSyntaxError(
                f"trailing tokens after expression in condition: {self.text!r}")
        return node

    def parse_or(self) -> Node:
        node = self.parse_and()
        while (tok := self.peek()) and tok.kind == "keyword" and tok.value == "or":
            self.take()
            node = OrNode(node, self.parse_and())
        return node

    def parse_and(self) -> Node:
        node = self.parse_unary()
        while (tok := self.peek()) and tok.kind == "keyword" and tok.value == "and":
            self.take()
            node = AndNode(node, self.parse_unary())
        return node

    def parse_unary(self) -> Node:
        tok = self.peek()
        if tok and tok.kind == "keyword" and tok.value == "not":
            self.take()
            return NotNode(self.parse_unary())
        return self.parse_primary()

    def parse_primary(self) -> Node:
        tok = self.take()
        if tok.kind == "lparen":
            node = self.parse_or()
            closing = self.take()
            if closing.kind != "rparen":
                raise ConditionSyntaxError(f"expected ')' in condition: {self.text!r}")
            return node
        if tok.kind != "term":
            raise ConditionSyntaxError(
                f"expected term, got {tok.value!r} in condition: {self.text!r}")
        nxt = self.peek()
        if nxt and nxt.kind == "op":
            op = self.take().value
            right = self.take()
            if right.kind != "term":
                raise ConditionSyntaxError(
                    f"expected term after {op!r} in condition: {self.text!r}")
            return CmpNode(op, tok.value, right.value)
        return TruthyNode(tok.value)


def parse(text: str) -> Node:
    """Parse a condition string; raises ConditionSyntaxError on any problem."""
    tokens = _tokenize(text)
    if not tokens:
        raise ConditionSyntaxError("empty condition")
    return _Parser(tokens, text).parse()


def _as_number(term: str) -> float | None:
    try:
        return float(term)
    except ValueError:
        return None


def _compare(op: str, left: str, right: str) -> bool:
    if op == "=~":
        try:
            pattern = re.compile(right)
        except re.error as exc:
            raise ConditionSyntaxError(f"bad pattern {right!r}: {exc}") from exc
        return pattern.search(left) is not None
    ln, rn = _as_number(left), _as_number(right)
    if ln is not None and rn is not None:
        lv, rv = ln, rn
    else:
        lv, rv = left, right
    if op == "==":
        return lv == rv
    if op == "!=":
        return lv != rv
    if op == "<":
        return lv < rv
    if op == "<=":
        return lv <= rv
    if op == ">":
        return lv > rv
    if op == ">=":
        return lv >= rv
    raise ConditionSyntaxError(f"unknown operator {op!r}")


_FALSY = {"", "0", "false", "False"}


def _eval_node(node: Node) -> bool:
    if isinstance(node, OrNode):
        return _eval_node(node.left) or _eval_node(node.right)
    if isinstance(node, AndNode):
        return _eval_node(node.left) and _eval_node(node.right)
    if isinstance(node, NotNode):
        return not _eval_node(node.operand)
    if isinstance(node, CmpNode):
        return _compare(node.op, node.left, node.right)
    if isinstance(node, TruthyNode):
        return node.term not in _FALSY
    raise ConditionSyntaxError(f"unknown node {node!r}")


def evaluate(raw: str, store: VariableStore) -> bool:
    """Substitute variables into the raw condition, parse and evaluate it."""
    text = substitute(raw, store)
    return _eval_node(parse(text))


def check_syntax(raw: str) -> None:
    """Parse-only check used by --dry-run; variables become placeholders."""
    from .variables import substitute_lenient

    text, _ = substitute_lenient(raw, VariableStore(), placeholder=lambda n: "0")
    parse(text)
