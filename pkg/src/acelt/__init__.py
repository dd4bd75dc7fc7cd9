"""One-stage long-tailed classification with ally complementary experts."""

__version__ = "0.1.0"
