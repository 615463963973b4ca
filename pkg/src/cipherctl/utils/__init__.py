"""Utility modules for cipherctl."""
