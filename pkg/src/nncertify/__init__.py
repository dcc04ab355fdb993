"""Certify and attack the 1NN classifier exactly; train and evaluate small networks."""
__version__ = "0.1.0"
