"""Speaker-adaptive visual speech recognition with learnable prompts, on numpy."""
__version__ = "0.1.0"
