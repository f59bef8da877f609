"""Recipe templates: ``${name}`` placeholders and ``$$`` for a literal dollar."""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Any, Mapping

from .errors import BadPlaceholder, UnboundPlaceholder, UnterminatedPlaceholder

NAME_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*\Z")

# Segments are either literal text or ("var", name); escapes are folded into
# literal text at parse time but counted separately.
_Segment = tuple[str, str]


@dataclass(frozen=True)
class RecipeTemplate:
    text: str
    placeholders: tuple[str, ...]
    escapes: int
    segments: tuple[_Segment, ...]

    def __str__(self) -> str:
        return self.text


def parse_template(text: str) -> RecipeTemplate:
    segments: list[_Segment] = []
    literal: list[str] = []
    names: list[str] = []
    escapes = 0
    i, n = 0, len(text)
    while i < n:
        ch = text[i]
        if ch != "$":
            j = text.find("$", i)
            j = n if j < 0 else j
            literal.append(text[i:j])
            i = j
            continue
        nxt = text[i + 1] if i + 1 < n else ""
        if nxt == "$":
            literal.append("$")
            escapes += 1
            i += 2
        elif nxt == "{":
            close = text.find("}", i + 2)
            if close < 0:
                raise UnterminatedPlaceholder(f"unterminated placeholder at offset {i}", offset=i)
            name = text[i + 2:close]
            if not NAME_RE.match(name):
                raise BadPlaceholder(f"bad placeholder name {name!r} at offset {i}", offset=i)
            if literal:
                segments.append(("text", "".join(literal)))
                literal = []
            segments.append(("var", name))
            if name not in names:
                names.append(name)
            i = close + 1
        else:
            raise BadPlaceholder(f"'$' at offset {i} must start '${{name}}' or '$$'", offset=i)
    if literal:
        segments.append(("text", "".join(literal)))
    return RecipeTemplate(text, tuple(names), escapes, tuple(segments))


def render_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, str):
        return value
    raise TypeError(f"cannot render {type(value).__name__} into a recipe")


def instantiate(template: RecipeTemplate, bindings: Mapping[str, Any]) -> str:
    missing = [p for p in template.placeholders if p not in bindings]
    if missing:
        raise UnboundPlaceholder(f"unbound placeholders: {', '.join(missing)}", names=missing)
    return "".join(
        render_value(bindings[body]) if kind == "var" else body for kind, body in template.segments
    )
