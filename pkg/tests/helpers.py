import numpy as np

from kgwdro import Dataset


def regression_data(rng, N, d, noise=0.5, beta=None):
    X = rng.standard_normal((N, d))
    beta = rng.standard_normal(d) if beta is None else beta
    return Dataset(X, X @ beta + noise * rng.standard_normal(N)), beta


def classification_data(rng, N, d, beta=None, flip=0.1):
    X = rng.standard_normal((N, d))
    beta = rng.standard_normal(d) if beta is None else beta
    y = np.where(X @ beta > 0, 1.0, -1.0)
    y[rng.uniform(size=N) < flip] *= -1
    return Dataset(X, y, "classification"), beta
