"""Caption, plan, edit and score loop that aligns an audio track with its paired video."""

__version__ = "0.1.0"
