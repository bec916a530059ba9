"""
Unit and integration tests for arch-adapt.
"""
