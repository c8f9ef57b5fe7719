"""Query-guided visual token sampling on a synthetic temporal-grounding task."""

__version__ = "0.1.0"
