"""Multi-resolution discrete units from layered frame features."""
