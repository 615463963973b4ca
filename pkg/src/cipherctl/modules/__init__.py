"""Core modules for cipherctl."""
