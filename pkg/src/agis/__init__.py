"""Desk-scale astrometric global iterative solution: scan simulator, block-iterative
solver, job whiteboard and DataTrain workers."""

__version__ = "0.1.0"
