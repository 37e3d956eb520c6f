"""
Command handlers for the slashlab command line
"""
