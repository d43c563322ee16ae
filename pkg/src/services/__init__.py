"""Business logic services package."""

