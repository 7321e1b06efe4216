"""Domain services of the tracer toolkit"""
