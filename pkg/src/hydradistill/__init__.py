"""Rule-based trajectory teachers and a distilled vocabulary-scoring planner."""

__version__ = "0.1.0"
