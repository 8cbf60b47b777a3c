"""Desk-scale imitation-learning testbed.

Trains small chunked policies on scripted demonstrations, detects when a
rolled-out policy stalls (near-zero motion for too long), escapes stalls with
targeted perturbations, and feeds stall labels back into preference-based
fine-tuning.
"""

__version__ = "0.1.0"
