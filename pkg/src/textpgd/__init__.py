"""Adversarial text attacks on small transformer classifiers: a PGD
embedding-space attack with semantic-similarity constraints and adaptive
per-token budgets, a greedy masked-LM substitution baseline, and an
evaluation harness for accuracy, perturbation, queries, similarity and
transferability."""

__version__ = "0.1.0"
