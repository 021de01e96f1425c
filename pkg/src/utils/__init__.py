"""
File helpers for the sliced attention toolkit.
"""

from .io import load_params, load_tokens, normalize_token_rows, save_params, save_tokens, write_json

__all__ = ["load_params", "load_tokens", "normalize_token_rows", "save_params", "save_tokens", "write_json"]
