"""Rubric-guided LLM grading pipeline for scanned handwritten math quizzes."""

__version__ = "0.1.0"
