"""Two-stage instrumental-variable estimation for the additive subdistribution hazard model."""

__version__ = "0.1.0"
