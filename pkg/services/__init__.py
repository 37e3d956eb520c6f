"""
Services package: RoPE, rank metrics, data, model, training, slash analysis and dump ingest
"""
