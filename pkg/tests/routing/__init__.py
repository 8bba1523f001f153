"""Tests for routing package."""
