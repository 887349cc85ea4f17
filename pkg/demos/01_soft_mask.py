"""Why the positive-instance mask matters.

A bag mixes negative instances with two positive classes, and only the
split between the positive classes is known.  Averaging class predictions
over the whole bag lets negatives pollute the estimate; weighting each
instance by its positive score removes them.
"""
import numpy as np

from lplp import masked_proportion, proportion_loss

rng = np.random.default_rng(0)

# 6 negatives, 3 of class 1, 1 of class 2 -> known partial proportion (0.75, 0.25)
truth = np.array([0] * 6 + [1] * 3 + [2] * 1)
p = np.array([0.75, 0.25])

# a class head that is right on positives but guesses on negatives
z = np.where(truth[:, None] == 1, [0.95, 0.05], [0.05, 0.95])
z[truth == 0] = rng.dirichlet([1, 1], size=6)

# the MIL head: confident on positives, low on negatives
s = np.where(truth > 0, 0.97, 0.04)

plain = z.mean(axis=0)
masked = masked_proportion(s, z).p_hat.value
print("partial proportion   ", p)
for name, est in (("plain bag average", plain), ("soft-masked average", masked)):
    print(f"{name:<21}", est.round(3), f"loss {float(proportion_loss(p, est).value):.4f}")

# the mask is a weighting, so its overall scale does not matter
print("scaled mask agrees:  ", np.allclose(masked_proportion(0.01 * s, z).p_hat.value, masked))
