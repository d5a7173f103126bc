"""Tests for flowsplat."""
