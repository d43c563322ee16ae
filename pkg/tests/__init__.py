"""Test suite package."""

