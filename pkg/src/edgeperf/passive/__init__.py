"""Offline analysis of captured traffic."""
