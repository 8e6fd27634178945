"""Curriculum engine: levels as programs, learnability-driven archive, replay and generation."""

__version__ = "0.1.0"
