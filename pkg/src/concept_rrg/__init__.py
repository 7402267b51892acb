"""Concept-aligned radiology report generation on a synthetic corpus."""
