"""Canned model replies for schema-validation tests.

The allowed universe for all of these is C0000001..C0000005.
"""

from cuiset.curation import CLASSIFY_EXAMPLE_REPLY

ALLOWED = {f"C{i:07d}" for i in range(1, 6)}

# (raw reply, schema) pairs that must be REJECTED.
MALFORMED = [
    ("not json at all", "filter"),
    ('Sure! Here you go: {"selected_cuis": ["C0000001"]}', "filter"),  # prose prefix
    ('{"selected": ["C0000001"]}', "filter"),  # wrong key
    ('{"selected_cuis": ["C0000001"], "extra": 1}', "filter"),  # extra key
    ('{"selected_cuis": "C0000001"}', "filter"),  # not an array
    ('{"selected_cuis": ["X0000001"]}', "filter"),  # malformed CUI
    ('{"selected_cuis": [1234567]}', "filter"),  # non-string entry
    ('{"definitive": ["C0000001"]}', "classify"),  # missing second key
    (
        '{"definitive": ["C0000002"], "context_dependent": ["C0000002"]}',
        "classify",
    ),  # class conflict
    (
        '{"definitive": ["C0000001"], "context_dependent": ["C0000003"], "notes": "hi"}',
        "classify",
    ),  # extra key
]

# (raw reply, schema, expected parse) triples that must be ACCEPTED.
WELL_FORMED = [
    ('{"selected_cuis": ["C0000001"]}', "filter", {"selected": ["C0000001"]}),
    ('{"selected_cuis": []}', "filter", {"selected": []}),
    (
        '{"selected_cuis": ["C0000003", "C0000001", "C0000001"]}',
        "filter",
        {"selected": ["C0000001", "C0000003"]},  # deduped, ascending
    ),
    (
        '{"definitive": ["C0000001"], "context_dependent": ["C0000002", "C0000004"]}',
        "classify",
        {"definitive": ["C0000001"], "context_dependent": ["C0000002", "C0000004"]},
    ),
    (
        CLASSIFY_EXAMPLE_REPLY,  # the classification template's own example block
        "classify",
        {"definitive": ["C0000001", "C0000002"], "context_dependent": ["C0000003"]},
    ),
]
