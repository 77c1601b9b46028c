"""SRD case names: "S{S}-R{R}-D{D}[adap{n}]" and the compact variants.

Accepted spellings: "SRD368" (S = R = D), "S256-RD128adap2" (R = D),
"S320-R160-D320", plus partial forms where an omitted R defaults to S (full
resolution at the native 0.1 mm voxel pitch) and an omitted D defaults
to R.
"""

from __future__ import annotations

import re
from typing import NamedTuple

__all__ = ["CaseName", "parse_case_name", "format_case_name"]

_GRAMMAR = re.compile(
    r"^(?:"
    r"SRD(?P<srd>\d+)"
    r"|S(?P<s>\d+)"
    r"(?:-RD(?P<rd>\d+)|(?:-R(?P<r>\d+))?(?:-D(?P<d>\d+))?)"
    r")"
    r"(?:adap(?P<adap>\d+))?$"
)


class CaseName(NamedTuple):
    S: int
    R: int
    D: int
    adap: int


def parse_case_name(name: str) -> CaseName:
    """Parse an SRD case label into (S, R, D, adaptive steps)."""
    m = _GRAMMAR.match(name.strip())
    if m is None:
        pos = _mismatch_position(name.strip())
        raise ValueError(f"malformed case name {name!r} (unexpected text at position {pos})")
    adap = int(m.group("adap") or 0)
    if m.group("srd") is not None:
        s = int(m.group("srd"))
        return CaseName(s, s, s, adap)
    s = int(m.group("s"))
    if m.group("rd") is not None:
        rd = int(m.group("rd"))
        return CaseName(s, rd, rd, adap)
    r = int(m.group("r")) if m.group("r") is not None else s
    d = int(m.group("d")) if m.group("d") is not None else r
    return CaseName(s, r, d, adap)


def _mismatch_position(name: str) -> int:
    for n in range(len(name), -1, -1):
        if _GRAMMAR.match(name[:n] + "0") or _GRAMMAR.match(name[:n] + "-D0"):
            return n
    return 0


def format_case_name(S: int, R: int, D: int, adap: int = 0) -> str:
    """Canonical explicit form; round-trips through parse_case_name."""
    if min(S, R, D) < 1 or adap < 0:
        raise ValueError("S, R, D must be positive and adap non-negative")
    name = f"S{S}-R{R}-D{D}"
    if adap:
        name += f"adap{adap}"
    return name
