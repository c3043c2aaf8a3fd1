"""Shared generators for the test suite."""


from fedfdp.lambda_solver import BoundConstants, coeffs_from_constants


def random_constants(rng, **overrides):
    """Random valid BoundConstants."""
    Q0 = rng.uniform(0.01, 1.0)
    mu = rng.uniform(0.01, 1.0)
    kw = dict(G=rng.uniform(0.05, 2), L=mu + rng.uniform(0, 5), mu=mu, Gamma=rng.uniform(0, 1),
              w_dist=rng.uniform(0, 5), Q0=Q0, Q1=Q0 + rng.uniform(0, 1.0),
              d=int(rng.integers(10, 5000)), B_hat=float(rng.integers(1, 64)),
              sigma=rng.uniform(0.5, 5), C=rng.uniform(0.05, 2))
    kw.update(overrides)
    return BoundConstants(**kw)


def feasible_constants(rng):
    """Random constants with Q0 > 0 and a3 < a4 a5 (an interior optimum exists)."""
    while True:
        k = random_constants(rng)
        c = coeffs_from_constants(k)
        if c.a3 < c.a4 * c.a5:
            return k
