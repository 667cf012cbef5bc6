"""Softdiff - desk-scale generalized linear-corruption diffusion."""
__version__ = '0.1.0'
