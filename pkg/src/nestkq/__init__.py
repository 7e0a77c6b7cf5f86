"""Nested expectations via nested kernel quadrature."""
