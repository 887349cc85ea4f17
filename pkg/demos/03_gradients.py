"""Checking reverse-mode gradients against central differences.

The joint loss goes through the feature extractor, both heads, the pooling
and the soft mask; every parameter is perturbed in turn.
"""
import numpy as np

from lplp import ModelTriple, autodiff as ad, synth_gaussian_dataset
from lplp.mil import LSE
from lplp.trainer import joint_loss

data = synth_gaussian_dataset(2, 8, 6.0, 1, 1, 1, 1, 1, 1, 8, seed=0)
pos, neg = data.train
model = ModelTriple.init(8, 2, seed=0, hidden=(8, 4))


def loss(tape, theta):
    bound = model.bind_vector(theta)
    return joint_loss(model, pos, LSE(4.0), 0.01, tape, bound) + joint_loss(model, neg, LSE(4.0), 0.01, tape, bound)


print(ad.grad_check(loss, model.flat(), step=1e-5, tol=1e-4))

# a broken rule is caught: claim d/dx x^2 = x
def bad(t, th):
    return ad.sum_(ad.custom([th], th.value ** 2, lambda g: (g * th.value,), "bad_square"))


print(ad.grad_check(bad, np.array([0.3, -1.2])))
