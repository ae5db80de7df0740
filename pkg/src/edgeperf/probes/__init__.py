"""Active measurement endpoints and the probe wire protocol."""
