"""Benchmark, litmus, fairness, and verification harness."""
