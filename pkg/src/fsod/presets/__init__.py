"""Bundled run-config presets (JSON)."""
