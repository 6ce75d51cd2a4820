"""
Diff-Prompt test suite.
"""
