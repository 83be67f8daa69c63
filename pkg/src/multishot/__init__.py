"""Desk-scale multi-shot storyboarding and generation toolkit.

Pipeline: a rule-based director turns a theme into a storyboard, a flow-matching
transformer predicts a start-end frame pair per shot (conditioned on shot text,
cinematic attributes, and a packed memory of earlier pairs), and a clip
synthesizer interpolates each pair into a short video clip. Evaluation metrics
score intra-shot, cross-shot, and transition quality.
"""

__version__ = "0.1.0"
