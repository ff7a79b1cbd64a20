"""Keeping a network sensible far away from the training data.

A wide-and-deep network fitted to a call option should have slope 0 deep
out of the money and slope 1 deep in the money. We fit it twice on the same
widened sample: once as is, and once with the most extreme examples relabeled
by their intrinsic values and given extra weight. Slopes are read off ten
standard deviations either side of the spot.

Run: python demos/asymptotic_control.py  (about 20 seconds)
"""
from diffml import experiments

model, payoff = experiments.call_setup()
X, sigma = experiments.far_states(model)
print(f"spot {model.spot[0]:g}, horizon std {sigma:g}, states {X.ravel()}")
for controlled in (False, True):
    approx, res = experiments.asymptotic_fit(controlled)
    _, d = approx.predict(X)
    label = "with edge relabeling" if controlled else "without control"
    print(f"{label:22s} edges {res.edges.indices.size:4d}  slopes {d[0, 0]:+.4f} / {d[1, 0]:.4f}")
