import pytest
from hypothesis import given
from hypothesis import strategies as st

from vdc import errors
from vdc.templating import instantiate, parse_template


def test_placeholders_in_first_appearance_order():
    t = parse_template("run -seed ${random_seed} -n ${events} again ${random_seed}")
    assert t.placeholders == ("random_seed", "events")


def test_escape_counted():
    t = parse_template("cost: $$5 ${x}")
    assert t.placeholders == ("x",)
    assert t.escapes == 1


@pytest.mark.parametrize("text", ["bad ${1abc}", "a $x", "trailing $", "${}", "${a-b}"])
def test_bad_placeholder(text):
    with pytest.raises(errors.BadPlaceholder):
        parse_template(text)


def test_unterminated():
    with pytest.raises(errors.UnterminatedPlaceholder):
        parse_template("x ${abc")


def test_instantiate_basic():
    assert instantiate(parse_template("-seed ${s}"), {"s": 42}) == "-seed 42"


def test_instantiate_unbound():
    with pytest.raises(errors.UnboundPlaceholder) as info:
        instantiate(parse_template("-seed ${s} ${t}"), {"t": 1})
    assert info.value.details["names"] == ["s"]


def test_instantiate_escape():
    assert instantiate(parse_template("a $$ b"), {}) == "a $ b"


def test_value_rendering():
    t = parse_template("${i} ${b} ${s} ${d}")
    out = instantiate(t, {"i": -7, "b": False, "s": "x y", "d": "1.50", "extra": 1})
    assert out == "-7 false x y 1.50"


names = st.from_regex(r"[A-Za-z_][A-Za-z0-9_]{0,6}", fullmatch=True)
literal = st.text(st.characters(blacklist_characters="$"), max_size=8)


@st.composite
def templates(draw):
    parts = draw(st.lists(st.tuples(literal, names), max_size=6))
    tail = draw(literal)
    return "".join(lit + "${" + name + "}" for lit, name in parts) + tail


@given(templates())
def test_identity_round_trip(text):
    t = parse_template(text)
    assert instantiate(t, {p: "${" + p + "}" for p in t.placeholders}) == text


@given(templates(), st.data())
def test_no_residual_placeholder_syntax(text, data):
    t = parse_template(text)
    values = {p: data.draw(st.text(st.characters(blacklist_characters="$"), max_size=5)) for p in t.placeholders}
    out = instantiate(t, values)
    assert "${" not in out


@st.composite
def escaped_templates(draw):
    """(template text, expected output) with escapes and placeholders bound to "<name>"."""
    text, expected = [], []
    for _ in range(draw(st.integers(0, 6))):
        kind = draw(st.sampled_from(["lit", "esc", "var"]))
        if kind == "lit":
            s = draw(literal)
            text.append(s)
            expected.append(s)
        elif kind == "esc":
            text.append("$$")
            expected.append("$")
        else:
            name = draw(names)
            text.append("${" + name + "}")
            expected.append("<" + name + ">")
    return "".join(text), "".join(expected)


@given(escaped_templates())
def test_escape_normalization(case):
    text, expected = case
    t = parse_template(text)
    assert instantiate(t, {p: "<" + p + ">" for p in t.placeholders}) == expected
