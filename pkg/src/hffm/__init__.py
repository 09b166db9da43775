"""Hierarchical federated fine-tuning of modular models over a three-tier
fog/edge network, with D2D relaying and wireless latency/energy accounting."""

__version__ = "0.1.0"
