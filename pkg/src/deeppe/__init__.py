"""Point-cloud registration toolkit with a learned pose evaluator.

Pipeline: descriptors extract correspondences, estimators emit candidate
poses, and an evaluator (statistics-based or the trained confidence
network) selects the final transformation.
"""

__version__ = "0.1.0"
