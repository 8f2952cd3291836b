import io
import random

import pytest

from cuiset.rrf import (
    CUI_PATTERN,
    MRCONSO_FIELDS,
    ParseReport,
    parse_attributes,
    parse_concepts,
    parse_relations,
)

VOCABS = {"SNOMEDCT_US", "NCI", "MSH"}


def conso_line(cui="C0000001", lat="ENG", sab="SNOMEDCT_US", name="concept one",
               ts="P", ispref="Y", suppress="N"):
    fields = [cui, lat, ts, "L0000001", "PF", "S0000001", ispref, "A0000001", "", "",
              "", sab, "PT", "D000001", name, "0", suppress, ""]
    return "|".join(fields) + "|\n"


def rel_line(cui1="C0000001", rel="CHD", cui2="C0000002", rela="isa", sab="SNOMEDCT_US"):
    fields = [cui1, "A1", "CUI", rel, cui2, "A2", "CUI", rela, "R1", "", sab, sab,
              "", "", "N", ""]
    return "|".join(fields) + "|\n"


def def_line(cui="C0000001", sab="SNOMEDCT_US", definition="a definition"):
    fields = [cui, "A1", "AT1", "", sab, definition, "N", ""]
    return "|".join(fields) + "|\n"


def sty_line(cui="C0000001", sty="Finding"):
    fields = [cui, "T047", "B2", sty, "AT1", ""]
    return "|".join(fields) + "|\n"


class TestParseConcepts:
    def test_single_allowed_row(self):
        records = list(parse_concepts(io.StringIO(conso_line()), VOCABS))
        assert len(records) == 1
        atom = records[0]
        assert atom.cui == "C0000001"
        assert atom.source_vocabulary == "SNOMEDCT_US"
        assert atom.is_preferred and atom.term_status == "P"
        assert atom.name == "concept one"

    def test_empty_stream(self):
        report = ParseReport()
        assert list(parse_concepts(io.StringIO(""), VOCABS, report=report)) == []
        assert report.lines == 0 and report.malformed == 0

    def test_language_and_vocabulary_filters(self):
        text = (
            conso_line(lat="FRE")
            + conso_line(sab="ICD10")
            + conso_line(cui="C0000002", name="kept")
        )
        report = ParseReport()
        records = list(parse_concepts(io.StringIO(text), VOCABS, report=report))
        assert [a.cui for a in records] == ["C0000002"]
        assert report.filtered == 2

    def test_suppressed_rows_excluded(self):
        text = conso_line(suppress="O") + conso_line(cui="C0000002")
        report = ParseReport()
        records = list(parse_concepts(io.StringIO(text), VOCABS, report=report))
        assert [a.cui for a in records] == ["C0000002"]
        assert report.suppressed == 1

    def test_malformed_counts_match_split_oracle(self):
        # 1000 lines, 3 made malformed: counts verified by a naive
        # per-line field-split oracle.
        rng = random.Random(5)
        lines = [conso_line(cui=f"C{i + 1:07d}", name=f"name {i}") for i in range(1000)]
        bad = rng.sample(range(1000), 3)
        for i in bad:
            lines[i] = lines[i].replace("|PT|", "|PT|EXTRA|", 1)
        text = "".join(lines)

        oracle_bad = sum(
            1
            for line in text.splitlines()
            if len(line.split("|")) != MRCONSO_FIELDS + 1
        )
        assert oracle_bad == 3

        report = ParseReport()
        records = list(parse_concepts(io.StringIO(text), VOCABS, report=report))
        assert len(records) == 997
        assert report.malformed == 3
        assert len(report.errors) == 3
        assert all(reason == "column count mismatch" for _, reason in report.errors)

    def test_invalid_cui_is_malformed(self):
        report = ParseReport()
        records = list(
            parse_concepts(io.StringIO(conso_line(cui="X0000001")), VOCABS, report=report)
        )
        assert records == [] and report.malformed == 1

    def test_streaming_returns_generator(self):
        result = parse_concepts(io.StringIO(conso_line()), VOCABS)
        assert iter(result) is result  # lazily evaluated, bounded memory


class TestParseRelations:
    def test_chd_row_maps_fields(self):
        records = list(parse_relations(io.StringIO(rel_line()), VOCABS))
        assert len(records) == 1
        rel = records[0]
        assert (rel.cui1, rel.rel, rel.cui2, rel.rela) == ("C0000001", "CHD", "C0000002", "isa")

    def test_self_loop_dropped_and_counted(self):
        report = ParseReport()
        records = list(
            parse_relations(io.StringIO(rel_line(cui2="C0000001")), VOCABS, report=report)
        )
        assert records == [] and report.self_loops == 1

    def test_vocabulary_filter_matches_field_split_oracle(self):
        rng = random.Random(11)
        sabs = ["SNOMEDCT_US", "NCI", "ICD10"]
        lines = [
            rel_line(cui1=f"C{i + 1:07d}", cui2=f"C{i + 2:07d}", sab=rng.choice(sabs))
            for i in range(500)
        ]
        text = "".join(lines)
        allow = {"SNOMEDCT_US", "NCI"}
        oracle = sum(1 for line in text.splitlines() if line.split("|")[10] in allow)
        records = list(parse_relations(io.StringIO(text), allow))
        assert len(records) == oracle

    def test_empty_rela_becomes_none(self):
        records = list(parse_relations(io.StringIO(rel_line(rela="")), VOCABS))
        assert records[0].rela is None


class TestParseAttributes:
    def test_semantic_types_union(self):
        sty = sty_line(sty="Disease or Syndrome") + sty_line(sty="Finding")
        attrs = parse_attributes(io.StringIO(""), io.StringIO(sty))
        assert attrs["C0000001"].semantic_types == {"Disease or Syndrome", "Finding"}

    def test_missing_definition_is_none(self):
        attrs = parse_attributes(io.StringIO(""), io.StringIO(sty_line()))
        assert attrs["C0000001"].definition is None

    def test_definition_priority_and_length(self):
        text = (
            def_line(sab="MSH", definition="short msh gloss")
            + def_line(sab="SNOMEDCT_US", definition="snomed definition")
            + def_line(sab="SNOMEDCT_US", definition="longer snomed definition wins")
        )
        attrs = parse_attributes(io.StringIO(text), io.StringIO(""))
        assert attrs["C0000001"].definition == "longer snomed definition wins"

    def test_map_size_matches_distinct_key_oracle(self):
        rng = random.Random(3)
        cuis = [f"C{rng.randrange(1, 120) :07d}" for _ in range(200)]
        def_text = "".join(def_line(cui=c, definition=f"def {c}") for c in cuis[:100])
        sty_text = "".join(sty_line(cui=c) for c in cuis[100:])
        oracle = len(set(cuis))
        attrs = parse_attributes(io.StringIO(def_text), io.StringIO(sty_text))
        assert len(attrs) == oracle


class TestFixtureCuis:
    def test_every_emitted_cui_matches_pattern(self, fixture_dir):
        atoms = parse_concepts(fixture_dir / "MRCONSO.RRF", VOCABS)
        assert all(CUI_PATTERN.match(a.cui) for a in atoms)
        rels = parse_relations(fixture_dir / "MRREL.RRF", VOCABS)
        assert all(
            CUI_PATTERN.match(r.cui1) and CUI_PATTERN.match(r.cui2) for r in rels
        )
