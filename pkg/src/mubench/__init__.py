"""Desk-scale benchmark harness for approximate machine unlearning.

Trains reference image classifiers, applies a catalogue of unlearning
methods plus exact retraining, and scores them on utility retention,
membership-inference resistance, efficiency, and reliability.
"""

__version__ = "0.1.0"
