"""Lagrangian control of incompressible flows by harmonic boundary potentials."""
