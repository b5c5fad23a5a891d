"""Tests for avalanche-bci."""
