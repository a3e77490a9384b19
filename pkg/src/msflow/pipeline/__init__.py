"""Data ingestion, run configuration, checkpoint persistence, and the CLI."""
