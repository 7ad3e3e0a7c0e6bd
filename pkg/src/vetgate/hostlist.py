"""Compressed hostlist expansion and compression.

Handles the bracketed node-name notation used by cluster schedulers:

    nid[001-004]        -> nid001 nid002 nid003 nid004
    nid[1-3,7],login    -> nid1 nid2 nid3 nid7 login
    gpu[08-12]          -> gpu08 gpu09 gpu10 gpu11 gpu12

Numeric range tokens are padded to the width of the range start, so
``[098-100]`` yields 098, 099, 100 while ``[1-10]`` yields 1 through 10
unpadded. Compression groups names by prefix, collapses consecutive
numeric runs, and emits a single bracket expression per prefix; a prefix
with exactly one lone number compresses to the bare name (``nid017``,
not ``nid[017]``).
"""

from __future__ import annotations

import re

__all__ = ["MalformedHostlist", "expand_hostlist", "compress_hostlist"]

# Hard cap on expansion size; a typo like nid[1-99999999] must not OOM.
_MAX_EXPANSION = 1_000_000

_NAME_RE = re.compile(r"^[A-Za-z0-9_.-]+$")
_SUFFIX_NUM_RE = re.compile(r"^(.*?)(\d+)$")


class MalformedHostlist(ValueError):
    """A hostlist expression or node name that cannot be parsed."""


def _split_parts(text: str) -> list[str]:
    """Split on commas that are outside brackets."""
    parts: list[str] = []
    depth = 0
    current: list[str] = []
    for ch in text:
        if ch == "[":
            depth += 1
            if depth > 1:
                raise MalformedHostlist(f"nested brackets in {text!r}")
            current.append(ch)
        elif ch == "]":
            depth -= 1
            if depth < 0:
                raise MalformedHostlist(f"unbalanced ']' in {text!r}")
            current.append(ch)
        elif ch == "," and depth == 0:
            parts.append("".join(current))
            current = []
        else:
            current.append(ch)
    if depth != 0:
        raise MalformedHostlist(f"unbalanced '[' in {text!r}")
    parts.append("".join(current))
    return parts


def _expand_range(token: str, part: str) -> list[str]:
    """Expand one bracket token ("007" or "001-004") into digit strings."""
    if "-" in token:
        start_s, sep, end_s = token.partition("-")
    else:
        start_s, end_s = token, token
    if not start_s.isdigit() or not end_s.isdigit():
        raise MalformedHostlist(f"non-numeric range {token!r} in {part!r}")
    start, end = int(start_s), int(end_s)
    if end < start:
        raise MalformedHostlist(f"descending range {token!r} in {part!r}")
    if end - start + 1 > _MAX_EXPANSION:
        raise MalformedHostlist(f"range {token!r} expands to too many names")
    width = len(start_s)
    return [f"{num:0{width}d}" for num in range(start, end + 1)]


def expand_hostlist(text: str) -> list[str]:
    """Expand a compressed hostlist expression into individual node names.

    Raises MalformedHostlist on syntax errors, descending ranges, or
    oversized expansions. Order follows the expression left to right.
    """
    if not text or not text.strip():
        raise MalformedHostlist("empty hostlist")
    names: list[str] = []
    for part in _split_parts(text.strip()):
        part = part.strip()
        if not part:
            raise MalformedHostlist(f"empty element in {text!r}")
        if "[" not in part:
            if "]" in part or not _NAME_RE.match(part):
                raise MalformedHostlist(f"bad node name {part!r}")
            names.append(part)
            continue
        match = re.match(r"^([A-Za-z0-9_.-]*)\[([^\]]*)\]$", part)
        if not match:
            raise MalformedHostlist(f"bad bracket expression {part!r}")
        prefix, body = match.groups()
        if not body:
            raise MalformedHostlist(f"empty brackets in {part!r}")
        for token in body.split(","):
            for digits in _expand_range(token.strip(), part):
                names.append(prefix + digits)
                if len(names) > _MAX_EXPANSION:
                    raise MalformedHostlist("hostlist expands to too many names")
    return names


def _name_key(name: str) -> tuple[str, int | None, str]:
    """Split a name into (prefix, numeric value, digit string)."""
    match = _SUFFIX_NUM_RE.match(name)
    if not match:
        return name, None, ""
    prefix, digits = match.groups()
    return prefix, int(digits), digits


def _mergeable(prev_digits: str, prev_value: int, digits: str, value: int) -> bool:
    # Consecutive values merge when widths agree, or when neither token is
    # zero-padded (natural widths, e.g. 9 followed by 10).
    if value != prev_value + 1:
        return False
    if len(digits) == len(prev_digits):
        return True
    return not prev_digits.startswith("0") and not digits.startswith("0")


def compress_hostlist(names: list[str] | tuple[str, ...] | set[str] | frozenset[str]) -> str:
    """Compress node names into canonical bracket notation.

    The result is deterministic: prefixes sort alphabetically and numeric
    suffixes sort by value. ``expand_hostlist(compress_hostlist(ns))``
    returns exactly the distinct names in ``ns``.
    """
    unique: dict[str, None] = {}
    for name in names:
        if not _NAME_RE.match(name):
            raise MalformedHostlist(f"bad node name {name!r}")
        unique[name] = None
    if not unique:
        return ""

    groups: dict[str, list[tuple[int, str]]] = {}
    plain: list[str] = []
    for name in unique:
        prefix, value, digits = _name_key(name)
        if value is None:
            plain.append(name)
        else:
            groups.setdefault(prefix, []).append((value, digits))

    parts: list[str] = []
    for name in sorted(plain):
        parts.append(name)
    for prefix in sorted(groups):
        entries = sorted(groups[prefix], key=lambda e: (e[0], e[1]))
        runs: list[tuple[str, str]] = []  # (start digits, end digits)
        run_start: str | None = None
        prev_digits = ""
        prev_value = -1
        for value, digits in entries:
            if run_start is not None and _mergeable(prev_digits, prev_value, digits, value):
                prev_digits, prev_value = digits, value
                continue
            if run_start is not None:
                runs.append((run_start, prev_digits))
            run_start, prev_digits, prev_value = digits, digits, value
        if run_start is not None:
            runs.append((run_start, prev_digits))

        if len(runs) == 1 and runs[0][0] == runs[0][1]:
            parts.append(prefix + runs[0][0])
        else:
            tokens = [a if a == b else f"{a}-{b}" for a, b in runs]
            parts.append(f"{prefix}[{','.join(tokens)}]")

    return ",".join(parts)
