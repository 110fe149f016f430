"""Fine-alignment of loosely aligned piano MIDI transcriptions to audio."""

__version__ = "0.1.0"
