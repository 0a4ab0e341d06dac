"""iadalab: imbalance-aware domain adaptation at desk scale.

A numpy reverse-mode autodiff substrate, synthetic shifted domains, the IADA
model and objective, a multi-seed trainer, a theory toolkit and a CLI.
"""
__version__ = "0.1.0"
