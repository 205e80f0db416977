"""Configuration, metrics, output files, the fixed-step oracle and the CLI."""
