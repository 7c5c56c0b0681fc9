"""Parser for the bracketed classad syntax.

Grammar sketch (whitespace free-form, keywords case-insensitive):

    ad        := '[' { NAME '=' expr ';' } ']'
    expr      := or_expr [ '?' expr ':' expr ]
    or_expr   := and_expr { '||' and_expr }
    and_expr  := eq_expr { '&&' eq_expr }
    eq_expr   := rel_expr { ('=='|'!=') rel_expr }
    rel_expr  := add_expr { ('<'|'<='|'>'|'>=') add_expr }
    add_expr  := mul_expr { ('+'|'-') mul_expr }
    mul_expr  := unary { ('*'|'/'|'%') unary }
    unary     := [ '!' | '-' ] unary | primary
    primary   := literal | NAME [ '.' NAME ] | fn '(' args ')'
               | '(' expr ')' | '{' [ expr {',' expr} ] '}' | ad

String literals are double-quoted with backslash escapes; the keywords
true/false/undefined/error are literals.  Numeric literals with a decimal
point or exponent are reals, otherwise 64-bit integers.
"""

from __future__ import annotations

from dataclasses import dataclass

from ..errors import WmsError
from .ads import ClassAd, DuplicateAttributeError
from .exprs import (
    BUILTIN_FUNCTIONS,
    AttrRef,
    Binary,
    Call,
    Conditional,
    Expr,
    ListExpr,
    Literal,
    SubAd,
    Unary,
)
from .values import (
    FALSE,
    INT64_MAX,
    INT64_MIN,
    TRUE,
    UNDEFINED,
    ErrorValue,
    Integer,
    Real,
    Text,
)


class AdSyntaxError(WmsError):
    code = "SyntaxError"

    def __init__(self, message: str, line: int, column: int):
        self.line = line
        self.column = column
        super().__init__(f"{message} at {line}:{column}")


_PUNCT2 = ("&&", "||", "==", "!=", "<=", ">=")
_PUNCT1 = "[]{}();,=.?:<>+-*/%!"


@dataclass(frozen=True)
class _Token:
    kind: str  # name, int, real, string, punct, eof
    text: str
    value: object
    line: int
    column: int


def _tokenize(text: str) -> list[_Token]:
    tokens: list[_Token] = []
    i, line, col = 0, 1, 1
    n = len(text)

    def err(msg: str):
        raise AdSyntaxError(msg, line, col)

    while i < n:
        ch = text[i]
        if ch in " \t\r\n":
            if ch == "\n":
                line += 1
                col = 1
            else:
                col += 1
            i += 1
            continue
        start_line, start_col = line, col
        two = text[i : i + 2]
        if two in _PUNCT2:
            tokens.append(_Token("punct", two, two, start_line, start_col))
            i += 2
            col += 2
            continue
        if ch == '"':
            i += 1
            col += 1
            buf: list[str] = []
            while True:
                if i >= n:
                    err("unterminated string literal")
                c = text[i]
                if c == '"':
                    i += 1
                    col += 1
                    break
                if c == "\\":
                    if i + 1 >= n:
                        err("unterminated escape")
                    esc = text[i + 1]
                    mapped = {'"': '"', "\\": "\\", "n": "\n", "t": "\t", "r": "\r"}.get(esc)
                    if mapped is None:
                        err(f"unsupported escape \\{esc}")
                    buf.append(mapped)
                    i += 2
                    col += 2
                    continue
                if c == "\n":
                    err("newline in string literal")
                buf.append(c)
                i += 1
                col += 1
            tokens.append(_Token("string", "".join(buf), "".join(buf), start_line, start_col))
            continue
        if ch.isdigit():
            j = i
            while j < n and text[j].isdigit():
                j += 1
            is_real = False
            if j < n and text[j] == "." and j + 1 < n and text[j + 1].isdigit():
                is_real = True
                j += 1
                while j < n and text[j].isdigit():
                    j += 1
            if j < n and text[j] in "eE":
                k = j + 1
                if k < n and text[k] in "+-":
                    k += 1
                if k < n and text[k].isdigit():
                    is_real = True
                    j = k
                    while j < n and text[j].isdigit():
                        j += 1
            lexeme = text[i:j]
            if is_real:
                tokens.append(_Token("real", lexeme, float(lexeme), start_line, start_col))
            else:
                value = int(lexeme)
                if not (INT64_MIN <= value <= INT64_MAX):
                    err("integer literal out of 64-bit range")
                tokens.append(_Token("int", lexeme, value, start_line, start_col))
            col += j - i
            i = j
            continue
        if ch.isalpha() or ch == "_":
            j = i
            while j < n and (text[j].isalnum() or text[j] == "_"):
                j += 1
            name = text[i:j]
            tokens.append(_Token("name", name, name, start_line, start_col))
            col += j - i
            i = j
            continue
        if ch in _PUNCT1:
            tokens.append(_Token("punct", ch, ch, start_line, start_col))
            i += 1
            col += 1
            continue
        err(f"unexpected character {ch!r}")
    tokens.append(_Token("eof", "", None, line, col))
    return tokens


class _Parser:
    def __init__(self, tokens: list[_Token]):
        self.tokens = tokens
        self.pos = 0

    @property
    def cur(self) -> _Token:
        return self.tokens[self.pos]

    def error(self, msg: str):
        tok = self.cur
        raise AdSyntaxError(msg, tok.line, tok.column)

    def advance(self) -> _Token:
        tok = self.cur
        self.pos += 1
        return tok

    def accept_punct(self, text: str) -> bool:
        if self.cur.kind == "punct" and self.cur.text == text:
            self.pos += 1
            return True
        return False

    def expect_punct(self, text: str) -> None:
        if not self.accept_punct(text):
            self.error(f"expected {text!r}, found {self.cur.text!r}")

    def parse_ad(self) -> ClassAd:
        open_tok = self.cur
        self.expect_punct("[")
        items: list[tuple[str, Expr]] = []
        seen: set[str] = set()
        while not self.accept_punct("]"):
            if self.cur.kind != "name":
                self.error("expected attribute name")
            name_tok = self.advance()
            key = name_tok.text.lower()
            if key in seen:
                raise DuplicateAttributeError(name_tok.text, name_tok.line, name_tok.column)
            seen.add(key)
            self.expect_punct("=")
            expr = self.parse_expr()
            items.append((name_tok.text, expr))
            if not self.accept_punct(";"):
                # allow omitting the separator before the closing bracket
                self.expect_punct("]")
                break
        del open_tok
        return ClassAd(items)

    def parse_expr(self) -> Expr:
        cond = self.parse_or()
        if self.accept_punct("?"):
            then = self.parse_expr()
            self.expect_punct(":")
            otherwise = self.parse_expr()
            return Conditional(cond, then, otherwise)
        return cond

    def _parse_binary_level(self, ops: tuple[str, ...], next_level) -> Expr:
        left = next_level()
        while self.cur.kind == "punct" and self.cur.text in ops:
            op = self.advance().text
            right = next_level()
            left = Binary(op, left, right)
        return left

    def parse_or(self) -> Expr:
        return self._parse_binary_level(("||",), self.parse_and)

    def parse_and(self) -> Expr:
        return self._parse_binary_level(("&&",), self.parse_eq)

    def parse_eq(self) -> Expr:
        return self._parse_binary_level(("==", "!="), self.parse_rel)

    def parse_rel(self) -> Expr:
        return self._parse_binary_level(("<", "<=", ">", ">="), self.parse_add)

    def parse_add(self) -> Expr:
        return self._parse_binary_level(("+", "-"), self.parse_mul)

    def parse_mul(self) -> Expr:
        return self._parse_binary_level(("*", "/", "%"), self.parse_unary)

    def parse_unary(self) -> Expr:
        if self.cur.kind == "punct" and self.cur.text in ("!", "-"):
            op = self.advance().text
            operand = self.parse_unary()
            # fold negative numeric literals so unparse round-trips
            if op == "-" and isinstance(operand, Literal):
                if isinstance(operand.value, Integer):
                    return Literal(Integer(-operand.value.value))
                if isinstance(operand.value, Real):
                    return Literal(Real(-operand.value.value))
            return Unary(op, operand)
        return self.parse_primary()

    def parse_primary(self) -> Expr:
        tok = self.cur
        if tok.kind == "int":
            self.advance()
            return Literal(Integer(tok.value))
        if tok.kind == "real":
            self.advance()
            return Literal(Real(tok.value))
        if tok.kind == "string":
            self.advance()
            return Literal(Text(tok.value))
        if tok.kind == "name":
            lowered = tok.text.lower()
            if lowered == "true":
                self.advance()
                return Literal(TRUE)
            if lowered == "false":
                self.advance()
                return Literal(FALSE)
            if lowered == "undefined":
                self.advance()
                return Literal(UNDEFINED)
            if lowered == "error":
                self.advance()
                return Literal(ErrorValue("error literal"))
            self.advance()
            if self.cur.kind == "punct" and self.cur.text == "(":
                if lowered not in BUILTIN_FUNCTIONS:
                    raise AdSyntaxError(f"unknown function {tok.text!r}", tok.line, tok.column)
                self.advance()
                args: list[Expr] = []
                if not self.accept_punct(")"):
                    while True:
                        args.append(self.parse_expr())
                        if self.accept_punct(")"):
                            break
                        self.expect_punct(",")
                return Call(lowered, tuple(args))
            if self.accept_punct("."):
                if self.cur.kind != "name":
                    self.error("expected attribute name after '.'")
                attr = self.advance()
                return AttrRef(lowered, attr.text)
            return AttrRef(None, tok.text)
        if tok.kind == "punct":
            if tok.text == "(":
                self.advance()
                inner = self.parse_expr()
                self.expect_punct(")")
                return inner
            if tok.text == "{":
                self.advance()
                items: list[Expr] = []
                if not self.accept_punct("}"):
                    while True:
                        items.append(self.parse_expr())
                        if self.accept_punct("}"):
                            break
                        self.expect_punct(",")
                return ListExpr(tuple(items))
            if tok.text == "[":
                return SubAd(self.parse_ad())
        self.error(f"unexpected token {tok.text!r}")
        raise AssertionError("unreachable")


def parse_ad(text: str) -> ClassAd:
    """Parse one bracketed ad; the entire input must be consumed."""
    parser = _Parser(_tokenize(text))
    ad = parser.parse_ad()
    if parser.cur.kind != "eof":
        parser.error("trailing input after ad")
    return ad


def parse_expr(text: str) -> Expr:
    parser = _Parser(_tokenize(text))
    expr = parser.parse_expr()
    if parser.cur.kind != "eof":
        parser.error("trailing input after expression")
    return expr
