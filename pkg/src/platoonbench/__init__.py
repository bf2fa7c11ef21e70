"""Benchmark harness for distributed hybrid MPC of vehicle platoons with
explicit gear management: two hybrid vehicle models, an MLD compiler, a
branch-and-bound MILP/MIQP solver, five controllers, and a closed-loop
benchmark engine with metrics and reporting."""

__version__ = "0.1.0"
