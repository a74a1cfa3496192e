"""Reinforcement learning of recurrent output-feedback controllers with
stability certificates from sequentially convexified LMIs."""

__version__ = "0.1.0"

__all__ = ["matkit", "plants", "rnnctl", "iqc", "lmi", "conic", "trainer", "cli"]
