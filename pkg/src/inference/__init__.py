"""Inference engine: exponential families, belief propagation and mean field"""
