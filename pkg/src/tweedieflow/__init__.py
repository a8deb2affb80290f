"""Rectified flows with Tweedie correction, distillation and two-stage adaptation at desk scale."""

__version__ = "0.1.0"
