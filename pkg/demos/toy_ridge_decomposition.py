"""
Exact attribution on a planted ridge problem
============================================

Ridge regression is the one setting where "which training example produced
this prediction" has a closed-form answer: the representer coefficients
alpha. This demo builds a problem designed so the answer is obvious ahead
of time: four examples live on the first feature axis, one carrier example
lives alone on the second axis, and the test point also lives on the second
axis. All predictive mass must come from the carrier, and it does, exactly.
"""

import numpy as np

from tfa import ToySetup, feature_contributions, leave_one_out_delta, representer_coefficients, ridge_fit

setup = ToySetup(axis_coords=(1.0, 1.0, 1.0, 1.0), c=2.0, lam=1.0)
problem = setup.problem()
x_test = setup.test_point(1.0)

print("training matrix X:")
print(problem.X)
print("targets y:", problem.y)
print("test point:", x_test)

# alpha_i weights y_i in the prediction; the axis examples decouple and get 0
alpha = representer_coefficients(problem, x_test)
print("\nrepresenter coefficients:", alpha)
print("prediction as alpha . y :", float(alpha @ problem.y))
print("prediction from weights :", float(ridge_fit(problem) @ x_test))

# beta splits each alpha across input features; only the carrier's second
# feature can carry anything
beta = feature_contributions(problem, x_test)
print("\nfeature contribution matrix (rows sum to alpha):")
print(beta)

# removing the carrier destroys the prediction, removing an axis example
# changes nothing; the leave-one-out deltas say so exactly
y_test = 1.0
print("\nleave-one-out change in squared test error:")
for i in range(len(problem.y)):
    print(f"  drop example {i}: {leave_one_out_delta(problem, i, x_test, y_test):+.6f}")
