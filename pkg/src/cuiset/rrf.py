"""Streaming parsers for Rich Release Format (RRF) terminology files.

RRF records are pipe-delimited with a trailing pipe, one record per line:
MRCONSO carries 18 fields, MRREL 16, MRDEF 8, MRSTY 6.  Parsers yield
records lazily so memory stays bounded regardless of file size; malformed
lines are counted and skipped, never fatal.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable, Iterator, Union

Cui = str

CUI_PATTERN = re.compile(r"^C\d{7}$")

MRCONSO_FIELDS = 18
MRREL_FIELDS = 16
MRDEF_FIELDS = 8
MRSTY_FIELDS = 6

# Column offsets within each record type.
_CONSO_CUI, _CONSO_LAT, _CONSO_TS, _CONSO_STT = 0, 1, 2, 4
_CONSO_ISPREF, _CONSO_SAB, _CONSO_STR, _CONSO_SUPPRESS = 6, 11, 14, 16
_REL_CUI1, _REL_REL, _REL_CUI2, _REL_RELA, _REL_SAB = 0, 3, 4, 7, 10
_DEF_CUI, _DEF_SAB, _DEF_DEF = 0, 4, 5
_STY_CUI, _STY_STY = 0, 3

# Definition source priority when one CUI has several definitions.
DEFINITION_VOCABULARY_PRIORITY = ("SNOMEDCT_US", "NCI", "MSH")

Source = Union[str, Path, IO[str], IO[bytes], Iterable[str]]


def is_valid_cui(value: str) -> bool:
    return bool(CUI_PATTERN.match(value))


@dataclass
class AtomRecord:
    cui: Cui
    language: str
    term_status: str
    string_type: str
    is_preferred: bool
    source_vocabulary: str
    name: str
    suppress: str


@dataclass
class RelationRecord:
    cui1: Cui
    cui2: Cui
    rel: str
    rela: str | None
    source_vocabulary: str


@dataclass
class ConceptAttributes:
    cui: Cui
    definition: str | None = None
    semantic_types: set[str] = field(default_factory=set)


@dataclass
class ParseReport:
    """Counters accumulated while one file streams through a parser."""

    lines: int = 0
    parsed: int = 0
    malformed: int = 0
    filtered: int = 0
    suppressed: int = 0
    self_loops: int = 0
    errors: list[tuple[int, str]] = field(default_factory=list)

    _MAX_ERRORS = 100

    def record_error(self, line_no: int, reason: str) -> None:
        self.malformed += 1
        if len(self.errors) < self._MAX_ERRORS:
            self.errors.append((line_no, reason))


def _lines(source: Source) -> Iterator[str]:
    """Yield text lines from a path, text/byte stream, or line iterable."""
    if isinstance(source, (str, Path)):
        with open(source, "r", encoding="utf-8") as handle:
            yield from handle
        return
    for line in source:  # type: ignore[union-attr]
        yield line.decode("utf-8") if isinstance(line, bytes) else line


def _split(line: str, expected_fields: int) -> list[str] | None:
    """Split one RRF record; None when the column count is wrong.

    A well-formed line has `expected_fields` values plus a trailing pipe,
    so splitting yields expected_fields + 1 parts with an empty tail.
    """
    parts = line.rstrip("\r\n").split("|")
    if len(parts) != expected_fields + 1 or parts[-1] != "":
        return None
    return parts


def parse_concepts(
    mrconso: Source,
    vocabularies: set[str],
    language: str = "ENG",
    report: ParseReport | None = None,
) -> Iterator[AtomRecord]:
    """Stream atoms from MRCONSO, keeping only the configured language and
    source vocabularies.  Suppressed atoms (SUPPRESS != 'N') are dropped."""
    report = report if report is not None else ParseReport()
    for line_no, line in enumerate(_lines(mrconso), start=1):
        report.lines += 1
        parts = _split(line, MRCONSO_FIELDS)
        if parts is None:
            report.record_error(line_no, "column count mismatch")
            continue
        cui = parts[_CONSO_CUI]
        if not CUI_PATTERN.match(cui):
            report.record_error(line_no, f"invalid CUI {cui!r}")
            continue
        name = parts[_CONSO_STR]
        if not name:
            report.record_error(line_no, "empty name")
            continue
        if parts[_CONSO_LAT] != language or parts[_CONSO_SAB] not in vocabularies:
            report.filtered += 1
            continue
        if parts[_CONSO_SUPPRESS] != "N":
            report.suppressed += 1
            continue
        report.parsed += 1
        yield AtomRecord(
            cui=cui,
            language=parts[_CONSO_LAT],
            term_status=parts[_CONSO_TS],
            string_type=parts[_CONSO_STT],
            is_preferred=parts[_CONSO_ISPREF] == "Y",
            source_vocabulary=parts[_CONSO_SAB],
            name=name,
            suppress=parts[_CONSO_SUPPRESS],
        )


def parse_relations(
    mrrel: Source,
    vocabularies: set[str],
    report: ParseReport | None = None,
) -> Iterator[RelationRecord]:
    """Stream relations from MRREL; self-loops are dropped and counted."""
    report = report if report is not None else ParseReport()
    for line_no, line in enumerate(_lines(mrrel), start=1):
        report.lines += 1
        parts = _split(line, MRREL_FIELDS)
        if parts is None:
            report.record_error(line_no, "column count mismatch")
            continue
        cui1, cui2 = parts[_REL_CUI1], parts[_REL_CUI2]
        if not (CUI_PATTERN.match(cui1) and CUI_PATTERN.match(cui2)):
            report.record_error(line_no, "invalid CUI")
            continue
        if parts[_REL_SAB] not in vocabularies:
            report.filtered += 1
            continue
        if cui1 == cui2:
            report.self_loops += 1
            continue
        report.parsed += 1
        yield RelationRecord(
            cui1=cui1,
            cui2=cui2,
            rel=parts[_REL_REL],
            rela=parts[_REL_RELA] or None,
            source_vocabulary=parts[_REL_SAB],
        )


def parse_attributes(
    mrdef: Source,
    mrsty: Source,
    def_report: ParseReport | None = None,
    sty_report: ParseReport | None = None,
) -> dict[Cui, ConceptAttributes]:
    """Merge MRDEF and MRSTY into one attribute record per CUI.

    Semantic types are unioned.  When several definitions exist, the one
    from the highest-priority vocabulary wins, longest first within a
    vocabulary; unknown vocabularies rank after known ones.
    """
    def_report = def_report if def_report is not None else ParseReport()
    sty_report = sty_report if sty_report is not None else ParseReport()

    merged: dict[Cui, ConceptAttributes] = {}
    # (priority rank, -len(definition)) per CUI for the kept definition
    best_def: dict[Cui, tuple[int, int]] = {}

    for line_no, line in enumerate(_lines(mrdef), start=1):
        def_report.lines += 1
        parts = _split(line, MRDEF_FIELDS)
        if parts is None:
            def_report.record_error(line_no, "column count mismatch")
            continue
        cui, sab, definition = parts[_DEF_CUI], parts[_DEF_SAB], parts[_DEF_DEF]
        if not CUI_PATTERN.match(cui):
            def_report.record_error(line_no, f"invalid CUI {cui!r}")
            continue
        if not definition:
            def_report.filtered += 1
            continue
        def_report.parsed += 1
        try:
            rank = DEFINITION_VOCABULARY_PRIORITY.index(sab)
        except ValueError:
            rank = len(DEFINITION_VOCABULARY_PRIORITY)
        key = (rank, -len(definition))
        if cui not in best_def or key < best_def[cui]:
            best_def[cui] = key
            merged.setdefault(cui, ConceptAttributes(cui=cui)).definition = definition

    for line_no, line in enumerate(_lines(mrsty), start=1):
        sty_report.lines += 1
        parts = _split(line, MRSTY_FIELDS)
        if parts is None:
            sty_report.record_error(line_no, "column count mismatch")
            continue
        cui, sty = parts[_STY_CUI], parts[_STY_STY]
        if not CUI_PATTERN.match(cui):
            sty_report.record_error(line_no, f"invalid CUI {cui!r}")
            continue
        if not sty:
            sty_report.filtered += 1
            continue
        sty_report.parsed += 1
        merged.setdefault(cui, ConceptAttributes(cui=cui)).semantic_types.add(sty)

    return merged
