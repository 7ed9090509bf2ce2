"""Numerical checks that the weighted Cloze losses are biased or unbiased as claimed.

The choice ``C`` is held fixed (one token per ``(s, t)``), so the only
randomness is exposure ``O ~ Ber(theta)`` and relevance ``R ~ Ber(gamma)``
and ``E[Y] = C * theta * gamma``. All losses here use the full
``|S| * |I| * T`` normalizer and unsmoothed propensities.
"""

import json
from dataclasses import asdict, dataclass

import numpy as np

from .losses import full_normalizer, log_softmax
from .propensity import static_from_temporal_avg
from .synth import SyntheticWorld, draw_exposure_relevance

KINDS = ("cloze", "ips", "itps")
GAP_TOL = 1e-12
BIAS_TOL = 1e-6


@dataclass
class ExpectationReport:
    kind: str
    analytic: float
    mc_mean: float
    mc_stderr: float
    n_draws: int
    ideal: float

    @property
    def gap(self):
        return self.analytic - self.ideal

    def mc_agrees(self, z=4.0):
        return abs(self.mc_mean - self.analytic) <= z * self.mc_stderr + 1e-15


def _chosen_terms(logits, mask, world, choice):
    """Indices and log-probabilities of the chosen item at masked positions."""
    choice = np.asarray(choice, dtype=np.int64)
    active = np.asarray(mask, dtype=bool) & (choice > 0)
    s, t = np.nonzero(active)
    c = choice[s, t] - 1
    logp = log_softmax(logits)[s, t, c]
    return s, c, t, logp


def _weights(kind, world, s, c, t, theta_static):
    theta = world.theta[s, c, t]
    if kind == "cloze":
        return np.ones_like(theta)
    if kind == "itps":
        return 1.0 / theta
    if kind == "ips":
        if theta_static is None:
            raise ValueError("ips needs a static propensity table")
        return 1.0 / np.asarray(theta_static)[s, c]
    raise ValueError(f"kind must be one of {KINDS}, got {kind!r}")


def ideal_expected_loss(logits, mask, world, choice):
    s, c, t, logp = _chosen_terms(logits, mask, world, choice)
    return float(-(world.gamma[s, c, t] * logp).sum() / full_normalizer(world.dims))


def analytic_expected_loss(kind, logits, mask, world, choice, theta_static=None):
    """Closed-form expectation of the ``kind`` loss with ``Y`` replaced by ``C * theta * gamma``."""
    s, c, t, logp = _chosen_terms(logits, mask, world, choice)
    w = _weights(kind, world, s, c, t, theta_static)
    ey = world.theta[s, c, t] * world.gamma[s, c, t]
    return float(-(ey * w * logp).sum() / full_normalizer(world.dims))


def mc_expected_loss(kind, logits, mask, world, choice, n_draws, seed, theta_static=None):
    """Monte Carlo mean and standard error of the ``kind`` loss over world draws.

    Exposure and relevance are drawn for every cell as in
    :func:`cloze_debias.synth.sample_world_draw` with the choice held fixed;
    draws are vectorized over a single generator seeded by ``seed``.
    """
    if n_draws < 100:
        raise ValueError("n_draws must be >= 100")
    s, c, t, logp = _chosen_terms(logits, mask, world, choice)
    w = _weights(kind, world, s, c, t, theta_static)
    O, R = draw_exposure_relevance(world.theta, world.gamma, n_draws, np.random.default_rng(seed))
    Y = O[:, s, c, t] & R[:, s, c, t]  # (n_draws, terms)
    samples = -(Y * (w * logp)).sum(axis=1) / full_normalizer(world.dims)
    # shifting by one sample keeps the variance and makes a constant sample exactly 0
    stderr = (samples - samples[0]).std(ddof=1) / np.sqrt(n_draws)
    return float(samples.mean()), float(stderr)


def expectation_report(kind, logits, mask, world, choice, n_draws, seed, theta_static=None):
    mean, se = mc_expected_loss(kind, logits, mask, world, choice, n_draws, seed, theta_static)
    return ExpectationReport(
        kind,
        analytic_expected_loss(kind, logits, mask, world, choice, theta_static),
        mean, se, n_draws,
        ideal_expected_loss(logits, mask, world, choice),
    )


def time_constant_world(world):
    """Same relevance, exposure replaced by its per-(s, i) mean at every timestep."""
    avg = static_from_temporal_avg(world.theta)
    theta = np.repeat(avg[:, :, None], world.T, axis=2)
    return SyntheticWorld(world.gamma, theta, 1.0, dict(world.provenance, time_constant=True))


def check_propositions(world, logits, n_draws=10_000, seed=0, mask=None, choice=None):
    """Pass/fail records for the three bias claims.

    ``cloze_biased``: the naive loss misses the ideal loss when some chosen
    masked item has exposure below one. ``ips_static``: with static exposure
    from the temporal average, the gap vanishes on a time-constant copy of the
    world and is nonzero on ``world`` (assumed time-varying). ``itps_unbiased``:
    zero gap on both worlds.
    """
    S, n_items, T = world.dims
    mask = np.ones((S, T), dtype=bool) if mask is None else mask
    choice = world.rational_choice() if choice is None else choice
    const = time_constant_world(world)
    records = []

    cloze = expectation_report("cloze", logits, mask, world, choice, n_draws, seed)
    records.append(_record("cloze_biased", abs(cloze.gap) > BIAS_TOL, [cloze], seed))

    ips_var = expectation_report("ips", logits, mask, world, choice, n_draws, seed,
                                 static_from_temporal_avg(world.theta))
    ips_const = expectation_report("ips", logits, mask, const, choice, n_draws, seed,
                                   static_from_temporal_avg(const.theta))
    ok = abs(ips_const.gap) <= GAP_TOL and abs(ips_var.gap) > BIAS_TOL
    records.append(_record("ips_static", ok, [ips_const, ips_var], seed))

    itps = [expectation_report("itps", logits, mask, w, choice, n_draws, seed) for w in (world, const)]
    ok = all(abs(r.gap) <= GAP_TOL and r.mc_agrees() for r in itps)
    records.append(_record("itps_unbiased", ok, itps, seed))
    return records


def _record(name, passed, reports, seed):
    return {
        "proposition": name,
        "pass": bool(passed),
        "seed": seed,
        "reports": [dict(asdict(r), gap=r.gap, mc_agrees=r.mc_agrees()) for r in reports],
    }


def two_step_world(theta_first=(0.8, 0.2), gamma=0.9):
    """``1 x 2 x 2`` world whose item 1 has exposure ``theta_first`` over the two steps."""
    theta = np.full((1, 2, 2), 0.5)
    theta[0, 0, :] = theta_first
    g = np.full((1, 2, 2), 0.3)
    g[0, 0, :] = gamma
    return SyntheticWorld(g, theta, 1.0, {"constructed": "two_step"})


def write_report(records, path):
    with open(path, "w") as fh:
        json.dump(records, fh, indent=2, sort_keys=True)
