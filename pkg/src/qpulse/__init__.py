"""Machine-learning pulse design for qubit state preparation under non-Markovian noise."""
__version__ = "0.1.0"
