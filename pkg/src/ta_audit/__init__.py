"""Text-only answerability auditing and visually grounded dataset curation."""

__version__ = "0.1.0"
