"""Numerical engine: tensors, layers, training, metrics, data and run artifacts."""
