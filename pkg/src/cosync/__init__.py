"""Flow-matching speech infilling with a three-phase diffusion transformer.

Synthesizes masked mel-spectrogram regions conditioned on text, lip
motion, and speaker-alignment features, and verifies the whole pipeline
on a synthetic audio-visual corpus.
"""

__version__ = "0.1.0"
