"""
Test package for epical
"""
