"""
script.py — the circuit text format (.yqs)

A script is a header followed by statements and a closing `end`:

    let nqubits=9, version="0.6.0"
        begin # encode
            1=>C, 4=>X
            1=>H, 4=>H, 7=>H
        end
        2=>Rx(0.5)
    end

Statement to block mapping:

    i=>G                     put(n, i => G)
    i=>G, j=>G', ...         kron(n, i => G, j => G', ...)
    c=>C, ..., i=>G          control(n, c, i => G)
    c=>!C, i=>G              inverse control (active on |0⟩)
    c=>C, i=>G, j=>G'        control(n, c, (i, j) => kron(i => G, j => G'))
    begin ... end            chain(n, ...)
    (i, j)=>SWAP             multi-qubit gate on a tuple of locations

Gate names are X, Y, Z, H, S, T, I and any gate added with register_gate;
Rx, Ry, Rz, shift and phase take one numeric argument. `#` starts a comment
that runs to the end of the line. The header version is only compared
against config.SCRIPT_VERSION and warned about. The final `end` may be left
out at end of file.

Every failure is a ScriptError subclass carrying a 1-based line and column.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass

import config
import gates
from blocks import (
    Block, Chain, ConstantGate, Control, Kron, Phase, Put, Rotation, Shift, Rx, Ry, Rz,
)
from errors import (
    QbirError, ScriptError, ScriptParseError, ScriptRangeError, ScriptValidationError,
    SerializationError,
)

INDENT = "    "

_ALIASES   = {"I": "I2"}
_UNALIASES = {v: k for k, v in _ALIASES.items()}
_ROTATIONS = {"Rx": Rx, "Ry": Ry, "Rz": Rz}
_PARAMETRIC = gates.PARAMETRIC_GATES
_KEYWORDS  = ("let", "begin", "end", "C")

_TOKEN_RE = re.compile(r"""
    (?P<NEWLINE>\n)
  | (?P<WS>[ \t\r\f\v]+)
  | (?P<COMMENT>\#[^\n]*)
  | (?P<ARROW>=>)
  | (?P<NUMBER>[-+]?(?:\d+\.\d*|\.\d+|\d+)(?:[eE][-+]?\d+)?)
  | (?P<STRING>"[^"\n]*")
  | (?P<NAME>[A-Za-z_][A-Za-z_0-9]*)
  | (?P<PUNCT>[=,()!])
  | (?P<MISMATCH>.)
""", re.VERBOSE)

_INT_RE = re.compile(r"[-+]?\d+")


@dataclass(frozen=True)
class Token:
    kind:   str
    text:   str
    line:   int
    column: int


# ── Lexer ─────────────────────────────────────────────────────────────────────
def tokenize(text: str) -> list[Token]:
    tokens: list[Token] = []
    line, line_start = 1, 0
    for m in _TOKEN_RE.finditer(text):
        kind, value = m.lastgroup, m.group()
        column = m.start() - line_start + 1
        if kind == "MISMATCH":
            raise ScriptParseError(f"unexpected character {value!r}", line, column)
        if kind == "NEWLINE":
            tokens.append(Token(kind, value, line, column))
            line, line_start = line + 1, m.end()
        elif kind not in ("WS", "COMMENT"):
            tokens.append(Token(kind, value, line, column))
    tokens.append(Token("EOF", "", line, len(text) - line_start + 1))
    return tokens


# ── Parser ────────────────────────────────────────────────────────────────────
@dataclass
class _Pair:
    locs:   tuple[int, ...]
    ctrl:   int | None     # 1 control, 0 inverse control, None for a gate
    gate:   Block | None
    token:  Token


class _Parser:
    def __init__(self, tokens: list[Token]):
        self.tokens = tokens
        self.pos    = 0
        self.nqubits = 0

    # ── token helpers ────────────────────────────────────────────────────────
    def peek(self) -> Token:
        return self.tokens[self.pos]

    def advance(self) -> Token:
        tok = self.tokens[self.pos]
        if tok.kind != "EOF":
            self.pos += 1
        return tok

    def at(self, kind: str, text: str | None = None) -> bool:
        tok = self.peek()
        return tok.kind == kind and (text is None or tok.text == text)

    def expect(self, kind: str, text: str | None = None, what: str | None = None) -> Token:
        if not self.at(kind, text):
            tok = self.peek()
            found = "end of input" if tok.kind == "EOF" else repr(tok.text)
            raise ScriptParseError(f"expected {what or text or kind}, found {found}",
                                   tok.line, tok.column)
        return self.advance()

    def skip_newlines(self) -> None:
        while self.at("NEWLINE"):
            self.advance()

    def end_of_statement(self) -> None:
        if not self.at("EOF"):
            self.expect("NEWLINE", what="end of line")

    def integer(self, tok: Token, what: str) -> int:
        if tok.kind != "NUMBER" or not _INT_RE.fullmatch(tok.text):
            raise ScriptParseError(f"{what} must be an integer, found {tok.text!r}",
                                   tok.line, tok.column)
        return int(tok.text)

    # ── grammar ──────────────────────────────────────────────────────────────
    def header(self) -> tuple[int, str | None]:
        self.skip_newlines()
        self.expect("NAME", "let", what="header 'let nqubits=N'")
        self.expect("NAME", "nqubits")
        self.expect("PUNCT", "=")
        tok = self.advance()
        n = self.integer(tok, "nqubits")
        if n < 1:
            raise ScriptValidationError(f"nqubits must be at least 1, got {n}", tok.line, tok.column)
        version = None
        if self.at("PUNCT", ","):
            self.advance()
            self.expect("NAME", "version")
            self.expect("PUNCT", "=")
            version = self.expect("STRING", what="version string").text[1:-1]
        self.end_of_statement()
        self.nqubits = n
        return n, version

    def body(self) -> Chain:
        n = self.nqubits
        stack: list[list[Block]] = [[]]
        opened: list[Token] = []
        while True:
            self.skip_newlines()
            tok = self.peek()
            if tok.kind == "EOF":
                if opened:
                    raise ScriptParseError("'begin' is never closed", opened[-1].line, opened[-1].column)
                break
            if tok.kind == "NAME" and tok.text == "begin":
                opened.append(self.advance())
                self.end_of_statement()
                stack.append([])
            elif tok.kind == "NAME" and tok.text == "end":
                self.advance()
                if opened:
                    opened.pop()
                    children = stack.pop()
                    stack[-1].append(Chain(n, children))
                    self.end_of_statement()
                    continue
                self.skip_newlines()
                if not self.at("EOF"):
                    extra = self.peek()
                    raise ScriptParseError(f"unexpected {extra.text!r} after the final 'end'",
                                           extra.line, extra.column)
                break
            else:
                stack[-1].append(self.statement())
        return Chain(n, stack[0])

    def locations(self) -> tuple[tuple[int, ...], Token]:
        start = self.peek()
        if self.at("PUNCT", "("):
            self.advance()
            locs = [self.location(self.advance())]
            while self.at("PUNCT", ","):
                self.advance()
                locs.append(self.location(self.advance()))
            self.expect("PUNCT", ")")
            return tuple(locs), start
        return (self.location(self.advance()),), start

    def location(self, tok: Token) -> int:
        q = self.integer(tok, "qubit location")
        if not 1 <= q <= self.nqubits:
            raise ScriptRangeError(f"qubit {q} outside 1..{self.nqubits}", tok.line, tok.column)
        return q

    def pair(self) -> _Pair:
        locs, start = self.locations()
        self.expect("ARROW", what="'=>'")
        if self.at("PUNCT", "!"):
            self.advance()
            self.expect("NAME", "C", what="'C' after '!'")
            return _Pair(locs, 0, None, start)
        if self.at("NAME", "C"):
            self.advance()
            return _Pair(locs, 1, None, start)
        name = self.expect("NAME", what="gate name")
        param = None
        if self.at("PUNCT", "("):
            self.advance()
            num = self.expect("NUMBER", what="gate parameter")
            param = float(num.text)
            self.expect("PUNCT", ")")
        return _Pair(locs, None, self.gate(name, param, len(locs)), start)

    def gate(self, name: Token, param: float | None, width: int) -> Block:
        if name.text in _PARAMETRIC:
            if param is None:
                raise ScriptParseError(f"gate '{name.text}' needs a parameter", name.line, name.column)
            if name.text == "phase":
                return Phase(param, width)
            if width != 1:
                raise ScriptValidationError(f"'{name.text}' acts on one qubit, placed on {width}",
                                            name.line, name.column)
            return _ROTATIONS[name.text](param) if name.text in _ROTATIONS else Shift(param)
        if param is not None:
            raise ScriptParseError(f"constant gate '{name.text}' takes no parameter",
                                   name.line, name.column)
        tag = _ALIASES.get(name.text, name.text)
        if name.text in _KEYWORDS or not gates.is_gate(tag):
            raise ScriptParseError(f"unknown gate '{name.text}'", name.line, name.column)
        g = ConstantGate(tag)
        if g.nqubits != width:
            raise ScriptValidationError(
                f"{g.nqubits}-qubit gate '{name.text}' placed on {width} qubits", name.line, name.column
            )
        return g

    def statement(self) -> Block:
        first = self.peek()
        pairs = [self.pair()]
        while self.at("PUNCT", ","):
            self.advance()
            pairs.append(self.pair())
        self.end_of_statement()
        try:
            return _build_line(self.nqubits, pairs, first)
        except ScriptError:
            raise
        except QbirError as exc:
            raise ScriptValidationError(str(exc), first.line, first.column) from exc


def _build_line(n: int, pairs: list[_Pair], first: Token) -> Block:
    seen: set[int] = set()
    for p in pairs:
        for q in p.locs:
            if q in seen:
                raise ScriptValidationError(f"qubit {q} used twice on one line",
                                            p.token.line, p.token.column)
            seen.add(q)
    ctrls = [p for p in pairs if p.ctrl is not None]
    targets = [p for p in pairs if p.ctrl is None]
    if not targets:
        raise ScriptValidationError("a line of controls needs a gate", first.line, first.column)
    if not ctrls:
        if len(targets) == 1:
            return Put(n, targets[0].locs, targets[0].gate)
        return Kron(n, [(p.locs, p.gate) for p in targets])

    ctrl_locs = tuple(q for p in ctrls for q in p.locs)
    ctrl_config = tuple(p.ctrl for p in ctrls for _ in p.locs)
    if len(targets) == 1:
        return Control(n, ctrl_locs, ctrl_config, targets[0].locs, targets[0].gate)
    locs = tuple(q for p in targets for q in p.locs)
    local, pos = [], 1
    for p in targets:
        local.append((tuple(range(pos, pos + len(p.locs))), p.gate))
        pos += len(p.locs)
    return Control(n, ctrl_locs, ctrl_config, locs, Kron(len(locs), local))


def parse_script(text: str) -> Chain:
    """Parse script text into a chain over `nqubits` qubits."""
    parser = _Parser(tokenize(text))
    n, version = parser.header()
    if version is not None and version != config.SCRIPT_VERSION:
        logging.warning(f"script: version \"{version}\" differs from {config.SCRIPT_VERSION}")
    circuit = parser.body()
    logging.debug(f"script: parsed {n}-qubit circuit with {len(circuit.children)} statements")
    return circuit


def parse_script_bytes(data: bytes) -> Chain:
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        line = data[:exc.start].count(b"\n") + 1
        column = exc.start - (data.rfind(b"\n", 0, exc.start) + 1) + 1
        raise ScriptParseError("script is not valid UTF-8", line, column) from exc
    return parse_script(text)


def load_script(path) -> Chain:
    with open(path, "rb") as fh:
        circuit = parse_script_bytes(fh.read())
    logging.info(f"script: loaded {path} ({circuit.nqubits} qubits)")
    return circuit


# ── Emitter ───────────────────────────────────────────────────────────────────
def _fmt_locs(locs: tuple[int, ...]) -> str:
    return str(locs[0]) if len(locs) == 1 else f"({', '.join(map(str, locs))})"


def _gate_text(g: Block) -> str:
    if isinstance(g, ConstantGate):
        return _UNALIASES.get(g.name, g.name)
    if isinstance(g, Rotation) and g.pauli is not None:
        return f"R{g.pauli.lower()}({format(g.theta, '.12g')})"
    if isinstance(g, Shift):
        return f"shift({format(g.theta, '.12g')})"
    if isinstance(g, Phase):
        return f"phase({format(g.theta, '.12g')})"
    raise SerializationError(f"{g.label()} has no script form")


def _gate_pairs(locs: tuple[int, ...], child: Block) -> list[str]:
    """`loc=>gate` items for a gate or a kron of gates placed on `locs`."""
    if isinstance(child, Kron):
        return [f"{_fmt_locs(tuple(locs[q - 1] for q in klocs))}=>{_gate_text(g)}"
                for klocs, g in child.pairs]
    return [f"{_fmt_locs(locs)}=>{_gate_text(child)}"]


def emit_statement(b: Block) -> str:
    """One script line for a put, kron or control node."""
    if isinstance(b, Put):
        return f"{_fmt_locs(b.locs)}=>{_gate_text(b.child)}"
    if isinstance(b, Kron):
        return ", ".join(f"{_fmt_locs(locs)}=>{_gate_text(g)}" for locs, g in b.pairs)
    if isinstance(b, Control):
        ctrls = [f"{q}=>C" if c else f"{q}=>!C" for q, c in zip(b.ctrl_locs, b.ctrl_config)]
        return ", ".join(ctrls + _gate_pairs(b.locs, b.child))
    raise SerializationError(f"{type(b).__name__} node has no script form")


def _emit_lines(b: Block, depth: int, out: list[str]) -> None:
    pad = INDENT * depth
    if isinstance(b, Chain):
        out.append(f"{pad}begin")
        for c in b.children:
            _emit_lines(c, depth + 1, out)
        out.append(f"{pad}end")
    else:
        out.append(pad + emit_statement(b))


def emit_script(b: Block) -> str:
    """Canonical script text; a top-level chain becomes the script body."""
    out = [f'let nqubits={b.nqubits}, version="{config.SCRIPT_VERSION}"']
    for c in (b.children if isinstance(b, Chain) else [b]):
        _emit_lines(c, 1, out)
    out.append("end")
    return "\n".join(out) + "\n"


def save_script(b: Block, path) -> None:
    text = emit_script(b)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    logging.info(f"script: saved {b.nqubits}-qubit circuit to {path}")
