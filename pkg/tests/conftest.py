import json

import pytest

from cuiset.embedding import DeterministicLocalProvider, embed_all, node_text
from cuiset.fixtures import generate_fixture
from cuiset.graph import DEFAULT_SEMANTIC_TYPES, build_graph, restrict_graph
from cuiset.retrieval import TargetConcept
from cuiset.rrf import parse_attributes, parse_concepts, parse_relations
from cuiset.vectorindex import VectorIndex

VOCABS = {"SNOMEDCT_US", "NCI", "MSH"}


@pytest.fixture(scope="session")
def fixture_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("fixture7")
    generate_fixture(out, seed=7, n_concepts=600)
    return out


@pytest.fixture(scope="session")
def manifest(fixture_dir):
    with open(fixture_dir / "manifest.json", "r", encoding="utf-8") as fh:
        return json.load(fh)


@pytest.fixture(scope="session")
def full_graph(fixture_dir):
    atoms = parse_concepts(fixture_dir / "MRCONSO.RRF", VOCABS)
    relations = parse_relations(fixture_dir / "MRREL.RRF", VOCABS)
    attributes = parse_attributes(fixture_dir / "MRDEF.RRF", fixture_dir / "MRSTY.RRF")
    return build_graph(atoms, relations, attributes)


@pytest.fixture(scope="session")
def restricted_graph(full_graph):
    return restrict_graph(full_graph, DEFAULT_SEMANTIC_TYPES)


@pytest.fixture(scope="session")
def provider():
    return DeterministicLocalProvider()


@pytest.fixture(scope="session")
def index(restricted_graph, provider):
    texts = [node_text(restricted_graph.nodes[c]) for c in sorted(restricted_graph.nodes)]
    matrix, cuis = embed_all(texts, provider, batch=256)
    return VectorIndex(matrix, cuis)


@pytest.fixture(scope="session")
def targets(manifest):
    return [
        TargetConcept(
            id=t["id"],
            name=t["name"],
            description=t["description"],
            target_cui=t["target_cui"],
            special_instructions=t["special_instructions"],
            fewshots=t["fewshots"],
        )
        for t in manifest["targets"]
    ]
