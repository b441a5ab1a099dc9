"""Desk-scale few-shot object detection."""
