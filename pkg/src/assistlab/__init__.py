"""Engine-assisted chess experiments: when should a strong engine step in for a weak one?"""

__version__ = "0.1.0"
