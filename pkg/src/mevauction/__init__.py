"""Sealed-bid MEV auction simulation, PPO bidding agents and counterfactual replay evaluation."""

__version__ = "0.1.0"
