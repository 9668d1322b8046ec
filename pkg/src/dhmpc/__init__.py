"""Diffusing-horizon MPC toolkit."""
