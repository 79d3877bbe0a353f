"""Gradient estimators, networks, optimizers and training"""
