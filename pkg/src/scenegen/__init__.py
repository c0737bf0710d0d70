"""Scene-aware person image generation pipeline."""
