"""Black-box transfer-attack workbench.

Train a substitute (student) classifier against a sealed, label-only
teacher oracle, craft L-inf bounded adversarial examples on the student
with seven gradient-sign algorithms, and measure how well they transfer
back to the teacher.
"""

__version__ = "0.1.0"
