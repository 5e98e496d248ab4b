"""Numerical constants shared across the package.

=====================  ========  ==============================================
name                   value     used by
=====================  ========  ==============================================
EPS                    1e-12     every norm / denominator (l2 normalize, cosine,
                                 range rescaling guard, Dice)
ZERO_NORM_THRESHOLD    1e-12     squared norm below which a row is flagged
LOG_EPS                1e-300    floor applied inside ``log`` of probabilities
ADAM_EPS               1e-8      optimizer denominator
=====================  ========  ==============================================
"""

EPS = 1e-12
ZERO_NORM_THRESHOLD = 1e-12
LOG_EPS = 1e-300
ADAM_EPS = 1e-8
