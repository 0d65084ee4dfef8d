"""
Test suite for the counting pipeline
"""
