"""
Utilities package for slashlab
"""
