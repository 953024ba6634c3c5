"""Data structures and transaction layers built on the latch API."""
