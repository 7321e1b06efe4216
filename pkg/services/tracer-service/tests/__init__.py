"""
Unit and integration tests for the tracer toolkit
"""
