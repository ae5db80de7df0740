"""Measurement store and its REST front end."""
