"""Small fast-moving object tracking: benchmark tooling, a two-branch candidate
matcher built on a small autodiff engine, and a synthetic sequence generator."""

__version__ = "0.1.0"
