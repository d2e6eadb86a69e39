"""Test package for the speaker-set extractor."""
