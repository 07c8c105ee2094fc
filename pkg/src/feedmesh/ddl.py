"""Tokenizer and recursive-descent parser for the feed DDL.

Accepted statement forms::

    create type T as open { f: string, g: int32?, h: {{string}}, u: OtherType };
    create dataset D(T) primary key f [on nodegroup (A, B)];
    create index I on D(f) [type btree];
    create feed F using Adaptor ("k"="v", "n"=60) [apply function udf[(args)]];
    create secondary feed F from feed P [apply function udf[(args)]];
    create policy P from policy Base set (("k","v"), ...);
    connect feed F to dataset D [using policy P];
    disconnect feed F from dataset D;
    show catalog;  show pipelines;

Keywords are case-insensitive; identifiers may contain ``-``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Union


class DDLSyntaxError(ValueError):
    def __init__(self, message: str, line: int, col: int):
        super().__init__(f"{message} at line {line}, column {col}")
        self.line = line
        self.col = col


@dataclass(frozen=True)
class Token:
    kind: str  # ident | string | number | punct | eof
    value: Any
    line: int
    col: int


_PUNCT = set("(){},;:?=.")


def tokenize(text: str, line: int = 1, col: int = 1) -> list[Token]:
    tokens: list[Token] = []
    i, n = 0, len(text)
    while i < n:
        ch = text[i]
        if ch == "\n":
            line, col, i = line + 1, 1, i + 1
            continue
        if ch.isspace():
            i, col = i + 1, col + 1
            continue
        if text.startswith("--", i) or text.startswith("//", i):
            while i < n and text[i] != "\n":
                i += 1
            continue
        start_col = col
        if ch == '"' or ch == "'":
            j = i + 1
            buf = []
            while j < n and text[j] != ch:
                if text[j] == "\\" and j + 1 < n:
                    j += 1
                if text[j] == "\n":
                    raise DDLSyntaxError("unterminated string", line, start_col)
                buf.append(text[j])
                j += 1
            if j >= n:
                raise DDLSyntaxError("unterminated string", line, start_col)
            tokens.append(Token("string", "".join(buf), line, start_col))
            col += j + 1 - i
            i = j + 1
            continue
        if ch.isdigit() or (ch == "-" and i + 1 < n and text[i + 1].isdigit()):
            j = i + 1
            while j < n and (text[j].isdigit() or text[j] == "."):
                j += 1
            raw = text[i:j]
            try:
                value: Any = float(raw) if "." in raw else int(raw)
            except ValueError:
                raise DDLSyntaxError(f"bad number {raw!r}", line, start_col) from None
            tokens.append(Token("number", value, line, start_col))
            col += j - i
            i = j
            continue
        if ch.isalpha() or ch == "_":
            j = i + 1
            while j < n and (text[j].isalnum() or text[j] in "_-"):
                j += 1
            # a trailing '-' is never part of an identifier
            while text[j - 1] == "-":
                j -= 1
            tokens.append(Token("ident", text[i:j], line, start_col))
            col += j - i
            i = j
            continue
        if ch in _PUNCT:
            tokens.append(Token("punct", ch, line, start_col))
            i, col = i + 1, col + 1
            continue
        raise DDLSyntaxError(f"unexpected character {ch!r}", line, col)
    tokens.append(Token("eof", None, line, col))
    return tokens


# ---------------------------------------------------------------- statements

@dataclass(frozen=True)
class FieldDef:
    name: str
    kind: str  # string | int | double | point | datetime | string-bag | record
    optional: bool = False
    ref: str | None = None  # referenced type name when kind == "record"


@dataclass(frozen=True)
class UdfRef:
    name: str
    args: tuple = ()

    def __str__(self) -> str:
        if not self.args:
            return self.name
        return f"{self.name}({', '.join(str(a) for a in self.args)})"


@dataclass(frozen=True)
class CreateType:
    name: str
    fields: tuple[FieldDef, ...]
    open: bool = True


@dataclass(frozen=True)
class CreateDataset:
    name: str
    type_name: str
    primary_key: str
    nodegroup: tuple[str, ...] | None = None


@dataclass(frozen=True)
class CreateIndex:
    name: str
    dataset: str
    field: str
    index_type: str = "btree"


@dataclass(frozen=True)
class CreateFeed:
    name: str
    adaptor: str
    config: tuple[tuple[str, Any], ...] = ()
    udf: UdfRef | None = None

    @property
    def config_map(self) -> dict[str, Any]:
        return dict(self.config)


@dataclass(frozen=True)
class CreateSecondaryFeed:
    name: str
    parent: str
    udf: UdfRef | None = None


@dataclass(frozen=True)
class CreatePolicy:
    name: str
    base: str
    overrides: tuple[tuple[str, str], ...] = ()


@dataclass(frozen=True)
class Connect:
    feed: str
    dataset: str
    policy: str | None = None


@dataclass(frozen=True)
class Disconnect:
    feed: str
    dataset: str


@dataclass(frozen=True)
class Show:
    what: str  # catalog | pipelines


Statement = Union[CreateType, CreateDataset, CreateIndex, CreateFeed,
                  CreateSecondaryFeed, CreatePolicy, Connect, Disconnect, Show]

_KIND_ALIASES = {
    "string": "string", "int": "int", "int8": "int", "int16": "int", "int32": "int",
    "int64": "int", "double": "double", "float": "double", "point": "point",
    "datetime": "datetime",
}


class _Parser:
    def __init__(self, tokens: list[Token]):
        self.toks = tokens
        self.pos = 0

    # -- token helpers
    def peek(self, offset: int = 0) -> Token:
        return self.toks[min(self.pos + offset, len(self.toks) - 1)]

    def advance(self) -> Token:
        tok = self.toks[self.pos]
        if tok.kind != "eof":
            self.pos += 1
        return tok

    def error(self, message: str, tok: Token | None = None) -> DDLSyntaxError:
        tok = tok or self.peek()
        return DDLSyntaxError(message, tok.line, tok.col)

    def at_kw(self, word: str, offset: int = 0) -> bool:
        tok = self.peek(offset)
        return tok.kind == "ident" and tok.value.lower() == word

    def kw(self, word: str) -> Token:
        if not self.at_kw(word):
            found = self.peek().value if self.peek().kind != "eof" else "end of input"
            raise self.error(f"expected '{word}', found {found!r}")
        return self.advance()

    def punct(self, ch: str) -> Token:
        tok = self.peek()
        if tok.kind != "punct" or tok.value != ch:
            found = tok.value if tok.kind != "eof" else "end of input"
            raise self.error(f"expected '{ch}', found {found!r}")
        return self.advance()

    def at_punct(self, ch: str) -> bool:
        tok = self.peek()
        return tok.kind == "punct" and tok.value == ch

    def ident(self, what: str = "identifier") -> str:
        tok = self.peek()
        if tok.kind != "ident":
            raise self.error(f"expected {what}")
        return self.advance().value

    def literal(self) -> Any:
        tok = self.peek()
        if tok.kind in ("string", "number"):
            return self.advance().value
        if tok.kind == "ident" and tok.value.lower() in ("true", "false"):
            return self.advance().value.lower() == "true"
        raise self.error("expected a literal value")

    # -- grammar
    def statement(self) -> Statement:
        tok = self.peek()
        if self.at_kw("create"):
            self.advance()
            stmt = self.create()
        elif self.at_kw("connect"):
            stmt = self.connect()
        elif self.at_kw("disconnect"):
            stmt = self.disconnect()
        elif self.at_kw("show"):
            self.advance()
            what = self.ident("'catalog' or 'pipelines'").lower()
            if what not in ("catalog", "pipelines"):
                raise self.error(f"unknown statement form 'show {what}'", tok)
            stmt = Show(what)
        else:
            found = tok.value if tok.kind != "eof" else "end of input"
            raise self.error(f"unknown statement form starting with {found!r}", tok)
        self.punct(";")
        if self.peek().kind != "eof":
            raise self.error("unexpected input after ';'")
        return stmt

    def create(self) -> Statement:
        start = self.peek()
        if self.at_kw("type"):
            self.advance()
            return self.create_type()
        if self.at_kw("dataset"):
            self.advance()
            return self.create_dataset()
        if self.at_kw("index"):
            self.advance()
            return self.create_index()
        if self.at_kw("feed"):
            self.advance()
            return self.create_feed()
        if self.at_kw("primary") and self.at_kw("feed", 1):
            self.advance()
            self.advance()
            return self.create_feed()
        if self.at_kw("secondary"):
            self.advance()
            self.kw("feed")
            name = self.ident("feed name")
            self.kw("from")
            self.kw("feed")
            parent = self.ident("parent feed name")
            return CreateSecondaryFeed(name, parent, self.apply_clause())
        if self.at_kw("policy") or (self.at_kw("ingestion") and self.at_kw("policy", 1)):
            if self.at_kw("ingestion"):
                self.advance()
            self.advance()
            return self.create_policy()
        raise self.error("unknown statement form after 'create'", start)

    def create_type(self) -> CreateType:
        name = self.ident("type name")
        self.kw("as")
        if self.at_kw("closed"):
            raise self.error("closed types are not supported")
        if self.at_kw("open"):
            self.advance()
        self.punct("{")
        fields: list[FieldDef] = []
        if not self.at_punct("}"):
            while True:
                fields.append(self.field_def())
                if self.at_punct(","):
                    self.advance()
                    continue
                break
        self.punct("}")
        return CreateType(name, tuple(fields))

    def field_def(self) -> FieldDef:
        fname = self.ident("field name")
        self.punct(":")
        if self.at_punct("{"):
            self.advance()
            if not self.at_punct("{"):
                raise self.error("nested inline record types are not supported")
            self.advance()
            inner = self.ident("bag element type").lower()
            if _KIND_ALIASES.get(inner) != "string":
                raise self.error("only {{string}} bags are supported")
            self.punct("}")
            self.punct("}")
            kind, ref = "string-bag", None
        else:
            raw = self.ident("field type")
            kind = _KIND_ALIASES.get(raw.lower())
            ref = None
            if kind is None:
                kind, ref = "record", raw
        optional = False
        if self.at_punct("?"):
            self.advance()
            optional = True
        return FieldDef(fname, kind, optional, ref)

    def create_dataset(self) -> CreateDataset:
        name = self.ident("dataset name")
        self.punct("(")
        type_name = self.ident("type name")
        self.punct(")")
        self.kw("primary")
        self.kw("key")
        key = self.ident("primary key field")
        nodegroup = None
        if self.at_kw("on"):
            self.advance()
        if self.at_kw("nodegroup"):
            self.advance()
            self.punct("(")
            nodes = [self.ident("node id")]
            while self.at_punct(","):
                self.advance()
                nodes.append(self.ident("node id"))
            self.punct(")")
            nodegroup = tuple(nodes)
        return CreateDataset(name, type_name, key, nodegroup)

    def create_index(self) -> CreateIndex:
        name = self.ident("index name")
        self.kw("on")
        dataset = self.ident("dataset name")
        self.punct("(")
        fname = self.ident("field name")
        self.punct(")")
        itype = "btree"
        if self.at_kw("type"):
            self.advance()
            itype = self.ident("index type").lower()
        return CreateIndex(name, dataset, fname, itype)

    def create_feed(self) -> CreateFeed:
        name = self.ident("feed name")
        self.kw("using")
        adaptor = self.ident("adaptor name")
        config: list[tuple[str, Any]] = []
        if self.at_punct("("):
            self.advance()
            if not self.at_punct(")"):
                while True:
                    key_tok = self.peek()
                    if key_tok.kind not in ("string", "ident"):
                        raise self.error("expected configuration key")
                    self.advance()
                    self.punct("=")
                    config.append((key_tok.value, self.literal()))
                    if self.at_punct(","):
                        self.advance()
                        continue
                    break
            self.punct(")")
        return CreateFeed(name, adaptor, tuple(config), self.apply_clause())

    def apply_clause(self) -> UdfRef | None:
        if not self.at_kw("apply"):
            return None
        self.advance()
        self.kw("function")
        name = self.ident("function name")
        args: list[Any] = []
        if self.at_punct("("):
            self.advance()
            if not self.at_punct(")"):
                args.append(self.literal())
                while self.at_punct(","):
                    self.advance()
                    args.append(self.literal())
            self.punct(")")
        return UdfRef(name, tuple(args))

    def create_policy(self) -> CreatePolicy:
        name = self.ident("policy name")
        self.kw("from")
        self.kw("policy")
        base = self.ident("base policy name")
        overrides: list[tuple[str, str]] = []
        if self.at_kw("set"):
            self.advance()
            self.punct("(")
            while True:
                self.punct("(")
                key = self.literal()
                self.punct(",")
                value = self.literal()
                self.punct(")")
                overrides.append((str(key), _as_text(value)))
                if self.at_punct(","):
                    self.advance()
                    continue
                break
            self.punct(")")
        return CreatePolicy(name, base, tuple(overrides))

    def connect(self) -> Connect:
        self.kw("connect")
        self.kw("feed")
        feed = self.ident("feed name")
        self.kw("to")
        self.kw("dataset")
        dataset = self.ident("dataset name")
        policy = None
        if self.at_kw("using"):
            self.advance()
            self.kw("policy")
            policy = self.ident("policy name")
        return Connect(feed, dataset, policy)

    def disconnect(self) -> Disconnect:
        self.kw("disconnect")
        self.kw("feed")
        feed = self.ident("feed name")
        self.kw("from")
        self.kw("dataset")
        return Disconnect(feed, self.ident("dataset name"))


def _as_text(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def parse_statement(text: str, line: int = 1) -> Statement:
    """Parse exactly one ``;``-terminated statement."""
    return _Parser(tokenize(text, line)).statement()


def split_statements(text: str) -> list[tuple[str, int]]:
    """Split a script on ``;`` outside quotes; returns ``(text, first_line)``."""
    out: list[tuple[str, int]] = []
    buf: list[str] = []
    quote = None
    line = 1
    start_line = None
    i = 0
    while i < len(text):
        ch = text[i]
        if quote is None and (text.startswith("--", i) or text.startswith("//", i)):
            while i < len(text) and text[i] != "\n":
                i += 1
            continue
        if start_line is None and not ch.isspace():
            start_line = line
        if start_line is not None:
            buf.append(ch)
        if ch == "\n":
            line += 1
        elif quote:
            if ch == "\\":
                i += 1
                if i < len(text):
                    buf.append(text[i])
            elif ch == quote:
                quote = None
        elif ch in "\"'":
            quote = ch
        elif ch == ";":
            out.append(("".join(buf), start_line))
            buf, start_line = [], None
        i += 1
    rest = "".join(buf).strip()
    if rest:
        raise DDLSyntaxError("statement not terminated by ';'", start_line or line, 1)
    return out


def parse_script(text: str) -> list[Statement]:
    return [parse_statement(chunk, line) for chunk, line in split_statements(text)]
