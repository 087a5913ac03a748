"""Desk-scale 3D visual grounding for roadside monitoring scenes.

Synthetic LiDAR+language benchmark generation, a candidate-point grounding
model trained with reverse-mode autodiff, and rotated-box Acc@K evaluation
against constructive baselines.
"""

__version__ = "0.1.0"
