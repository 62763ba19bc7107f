"""Deterministic federated-learning simulator with behavioural-plane monitoring.

The package simulates a server and a set of clients that jointly train a
predictor and a counterfactual generator, injects model/data poisoning
attacks, defends with behavioural-score aggregation, and exports per-round
error/counterfactual behavioural planes.
"""

__version__ = "0.1.0"
