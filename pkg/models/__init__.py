"""
Pydantic models for experiment, data, training, slash-scoring and dump configuration
"""
