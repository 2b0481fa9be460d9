"""Interpretation-guided adversarial example detection and rectification."""
