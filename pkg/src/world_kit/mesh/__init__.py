"""Mesh decimation, compact encoding, export and distance oracles."""
