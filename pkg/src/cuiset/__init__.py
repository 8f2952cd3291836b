"""Concept-set curation toolkit: terminology ingestion, concept graph,
embedding retrieval, LLM filtering/classification, evaluation metrics,
and a clinician review service."""

__version__ = "0.1.0"
