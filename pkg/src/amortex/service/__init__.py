"""FastAPI service wrapping the library; the CLI is a thin client of the
same request/response models."""
