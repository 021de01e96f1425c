"""Tests for the sliced attention toolkit."""
