"""Simulation and control of a two-strain consortium in a two-chamber bioreactor."""
