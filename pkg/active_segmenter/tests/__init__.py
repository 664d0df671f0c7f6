"""Active segmenter test suite."""
