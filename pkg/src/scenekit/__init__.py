"""Acoustic scene classification toolkit."""
