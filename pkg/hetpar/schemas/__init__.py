"""Pydantic schemas for configuration, plans and reports."""
