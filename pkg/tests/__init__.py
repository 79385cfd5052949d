"""
Unit tests for the Fast-Slow Homogenizer.
"""
