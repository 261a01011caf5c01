"""Block-based config text format."""

import pytest

from gridwatch.textconf import (
    ConfigError,
    as_bool,
    as_float,
    as_pairs,
    check_keys,
    format_blocks,
    parse_blocks,
)


def test_round_trip():
    blocks = [("alpha", {"x": "1", "y": "two"}), ("alpha", {"x": "3"}),
              ("beta", {"flag": "true"})]
    assert parse_blocks(format_blocks(blocks)) == blocks


def test_comments_and_blank_lines():
    text = "# top comment\n\n[sec]\nkey = value  # trailing\n\n"
    assert parse_blocks(text) == [("sec", {"key": "value"})]


def test_key_outside_section_rejected():
    with pytest.raises(ConfigError, match="outside"):
        parse_blocks("key = value\n")


def test_bad_line_rejected():
    with pytest.raises(ConfigError, match="key = value"):
        parse_blocks("[sec]\njust some words\n")


def test_duplicate_key_rejected():
    with pytest.raises(ConfigError, match="duplicate"):
        parse_blocks("[sec]\nk = 1\nk = 2\n")


def test_check_keys():
    with pytest.raises(ConfigError, match="unknown keys"):
        check_keys("sec", {"a": "1", "z": "2"}, {"a"})
    with pytest.raises(ConfigError, match="missing keys"):
        check_keys("sec", {"a": "1"}, {"a", "b"}, required={"b"})


def test_typed_accessors():
    fields = {"f": "2.5", "b": "yes", "pairs": "3-4, 2-6"}
    assert as_float("s", fields, "f") == 2.5
    assert as_bool("s", fields, "b") is True
    assert as_pairs("s", fields, "pairs") == [(3, 4), (2, 6)]
    assert as_float("s", fields, "absent", 1.0) == 1.0
    with pytest.raises(ConfigError, match="not a number"):
        as_float("s", fields, "b")
    with pytest.raises(ConfigError, match="bad pair"):
        as_pairs("s", {"p": "3+4"}, "p")
