"""Dataset, checkpoint and file-format helpers."""
