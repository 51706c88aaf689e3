import numpy as np
import pytest

from uda_lab.domains import LinearUdaModel, MixtureDomain, MixtureDomainPair


def unit(theta):
    return np.array([np.cos(theta), np.sin(theta)])


def random_domain(rng):
    return MixtureDomain(rng.uniform(-2, 2, 2), rng.uniform(-2, 2, 2), rng.uniform(0.5, 2.0), unit(rng.uniform(0, 2 * np.pi)))


def random_config(rng):
    """(pair, model) drawn like the bound property suite."""
    pair = MixtureDomainPair(random_domain(rng), random_domain(rng))
    model = LinearUdaModel(unit(rng.uniform(0, 2 * np.pi)), rng.uniform(-5, 5), rng.uniform(-2, 2))
    return pair, model


def mc_slab_label(domain, u, z, n=1_000_000, half_width=1e-3, seed=0):
    """Rejection oracle for E[f(x) | u.x = z].

    Draws ``n`` points from the mixture and keeps those with
    ``|u.x - z| < half_width``. Returns (mean label, kept count).
    """
    rng = np.random.default_rng(seed)
    comp = rng.random(n) < 0.5
    means = np.where(comp[:, None], domain.mu_pos, domain.mu_neg)
    x = means + domain.sigma * rng.standard_normal((n, 2))
    keep = np.abs(x @ np.asarray(u, float) - z) < half_width
    f = x[keep] @ domain.label_normal > 0
    return float(f.mean()) if keep.any() else float("nan"), int(keep.sum())


def within_3se(estimate, kept, p0):
    """Binomial 3-SE test of a slab estimate against the closed-form value ``p0``."""
    se = np.sqrt(max(p0 * (1 - p0), 1.0 / kept) / kept)
    return abs(estimate - p0) <= 3 * se


def quantile_points(domain, u, probs=(0.1, 0.3, 0.5, 0.7, 0.9), seed=0):
    """z values at quantiles of the induced density, so every slab has mass."""
    rng = np.random.default_rng(seed)
    comp = rng.random(200_000) < 0.5
    means = np.where(comp[:, None], domain.mu_pos, domain.mu_neg)
    z = (means + domain.sigma * rng.standard_normal((len(comp), 2))) @ np.asarray(u, float)
    return np.quantile(z, probs)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
