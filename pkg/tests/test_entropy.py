import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wsicodec import tensor as T
from wsicodec.entropy import (
    P_MIN,
    TOTAL,
    CdfTable,
    FactorizedPrior,
    bin_mass,
    build_cdf_tables,
    quantize_pmf,
    rate_bits,
    table_rate_bits,
)
from wsicodec.gradcheck import numerical_grad, rel_error


def logistic(z):
    return 1.0 / (1.0 + math.exp(-z))


def test_pmf_zero_unit_scale():
    prior = FactorizedPrior(1)
    expected = logistic(0.5) - logistic(-0.5)
    assert prior.pmf(0, 0) == pytest.approx(expected, rel=1e-12)
    assert expected == pytest.approx(0.2450, abs=1e-4)


def test_pmf_symmetric_about_zero():
    prior = FactorizedPrior(1, log_scale=[0.7])
    qs = np.arange(-40, 41)
    np.testing.assert_array_equal(prior.pmf(qs, 0), prior.pmf(-qs, 0))


def test_bin_mass_sums_to_one():
    total = math.fsum(bin_mass(np.arange(-30, 31), 0.0, 1.0))
    assert abs(total - 1.0) < 1e-9


def test_pmf_floor():
    prior = FactorizedPrior(1)
    assert prior.pmf(200, 0) == P_MIN


@settings(max_examples=50, deadline=None)
@given(mu=st.floats(-5, 5), s=st.floats(-3, 3), lo=st.integers(-20, 0), width=st.integers(0, 40))
def test_range_pmf_normalized(mu, s, lo, width):
    prior = FactorizedPrior(1, loc=[mu], log_scale=[s])
    p = prior.range_pmf(0, lo, lo + width)
    assert abs(p.sum() - 1.0) < 1e-12
    assert np.all(p > 0)


def test_range_pmf_folds_tail_mass():
    prior = FactorizedPrior(1, log_scale=[0.0])
    p = prior.range_pmf(0, -2, 2)
    # interior bins plus both tails, before flooring, partition the line
    interior = bin_mass(np.arange(-1, 2), 0.0, 1.0)
    lower_tail = logistic(-1.5)
    assert p[0] == pytest.approx(lower_tail, rel=1e-12)
    np.testing.assert_allclose(p[1:4], interior, rtol=1e-12)


def test_rate_bits_uniform_table():
    table = CdfTable.from_pmf(0, 0, [0.25] * 4)
    assert table.counts.tolist() == [16384] * 4
    symbols = np.random.default_rng(0).integers(0, 4, 100)
    assert table_rate_bits(symbols, np.zeros(100, dtype=int), [table]) == pytest.approx(200.0)


def test_rate_bits_all_zero_latent():
    prior = FactorizedPrior(2)
    y = np.zeros((1, 2, 3, 5))
    per_symbol = -math.log2(logistic(0.5) - logistic(-0.5))
    assert rate_bits(y, prior) == pytest.approx(30 * per_symbol, rel=1e-12)
    assert per_symbol == pytest.approx(2.029, abs=1e-3)


@pytest.mark.parametrize("seed", range(5))
def test_rate_bits_gradients(seed):
    rng = np.random.default_rng(seed)
    loc = rng.normal(size=3)
    # keep every bin well above the probability floor, where the rate is smooth
    ls = rng.uniform(0.0, 1.0, size=3)
    y = loc[None, :, None, None] + rng.normal(scale=2.0, size=(2, 3, 4, 4))

    prior = FactorizedPrior(3)
    prior.loc = T.Tensor(loc, requires_grad=True, dtype=np.float64)
    prior.log_scale = T.Tensor(ls, requires_grad=True, dtype=np.float64)
    yt = T.Tensor(y, requires_grad=True, dtype=np.float64)
    rate_bits(yt, prior).backward()

    def with_prior(loc_v, ls_v, y_v):
        p = FactorizedPrior(3)
        p.loc = T.Tensor(loc_v, dtype=np.float64)
        p.log_scale = T.Tensor(ls_v, dtype=np.float64)
        return rate_bits(y_v, p)

    assert rel_error(prior.loc.grad, numerical_grad(lambda v: with_prior(v, ls, y), loc)) < 1e-3
    assert rel_error(prior.log_scale.grad, numerical_grad(lambda v: with_prior(loc, v, y), ls)) < 1e-3
    assert rel_error(yt.grad, numerical_grad(lambda v: with_prior(loc, ls, v), y)) < 1e-3


def test_rate_finite_for_huge_latents():
    prior = FactorizedPrior(1)
    y = T.Tensor(np.array([-1e4, -50.0, 0.0, 3.0, 1e4]).reshape(1, 1, 1, 5), requires_grad=True)
    r = rate_bits(y, prior)
    r.backward()
    assert np.isfinite(r.item())
    assert np.all(np.isfinite(y.grad)) and np.all(np.isfinite(prior.loc.grad))
    assert r.item() == pytest.approx(-math.log2(P_MIN) * 2 + rate_bits(np.array([-50.0, 0.0, 3.0]).reshape(1, 1, 1, 3), prior), rel=1e-5)


def test_floored_bins_have_zero_gradient():
    prior = FactorizedPrior(1)
    y = T.Tensor(np.array([40.0, -40.0]).reshape(1, 1, 1, 2), requires_grad=True)
    rate_bits(y, prior).backward()
    np.testing.assert_array_equal(y.grad, 0.0)


def test_quantize_pmf_equal():
    assert quantize_pmf([0.25] * 4).tolist() == [16384] * 4


def test_quantize_pmf_floor_rule():
    eps = 1e-9
    counts = quantize_pmf([0.5, 0.5 - eps, eps])
    assert counts.sum() == TOTAL
    assert counts[1] == 32767 and counts[2] >= 1 and counts[0] >= 32768


@settings(max_examples=100, deadline=None)
@given(mu=st.floats(-10, 10), s=st.floats(-2, 4), lo=st.integers(-60, 0), width=st.integers(0, 80))
def test_tables_strictly_increasing(mu, s, lo, width):
    prior = FactorizedPrior(1, loc=[mu], log_scale=[s])
    (table,) = build_cdf_tables(prior, [lo], [lo + width])
    cdf = np.asarray(table.cdf)
    assert cdf[0] == 0 and cdf[-1] == TOTAL
    assert np.all(np.diff(cdf) >= 1)


@pytest.mark.parametrize("seed", range(20))
def test_table_pmf_within_one_count(seed):
    rng = np.random.default_rng(seed)
    prior = FactorizedPrior(4, loc=rng.normal(size=4) * 3, log_scale=rng.normal(size=4))
    lo = rng.integers(-30, 0, size=4)
    hi = lo + rng.integers(0, 60, size=4)
    for c, table in enumerate(build_cdf_tables(prior, lo, hi)):
        target = prior.range_pmf(c, int(lo[c]), int(hi[c]))
        assert np.max(np.abs(table.probabilities() - target)) < 2.0 ** -16


def test_table_range_limit():
    with pytest.raises(ValueError, match="wider"):
        build_cdf_tables(FactorizedPrior(1), [0], [TOTAL])
    with pytest.raises(ValueError):
        build_cdf_tables(FactorizedPrior(1), [3], [2])


def test_table_rate_close_to_prior_rate():
    # symbols drawn from the prior itself; tables cover their observed range
    rng = np.random.default_rng(7)
    m = 6
    prior = FactorizedPrior(m, loc=rng.normal(size=m), log_scale=rng.uniform(-0.5, 2.0, size=m))
    n = 20000
    u = rng.uniform(size=(m, n))
    scale = np.exp(prior.log_scale.data.astype(np.float64))[:, None]
    draws = prior.loc.data[:, None] + scale * np.log(u / (1 - u))
    sym = np.sign(draws) * np.floor(np.abs(draws) + 0.5)
    sym = sym.astype(np.int64)
    tables = build_cdf_tables(prior, sym.min(axis=1), sym.max(axis=1))
    channels = np.repeat(np.arange(m), n)
    table_bits = table_rate_bits(sym.reshape(-1), channels, tables)
    prior_bits = rate_bits(sym.reshape(1, m, 1, n), prior)
    assert abs(table_bits - prior_bits) / sym.size < 0.01
