import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedrot.aggregation import (
    AggregationError,
    Strategy,
    aggregate_factorwise,
    aggregate_ideal,
    aggregation_error,
    lagrange_error_oracle,
    server_step,
)
from fedrot.errors import ProtocolError, UsageError
from fedrot.federation import FederationConfig, TaskSpec
from fedrot.lora import GlobalModel, LoraAdapter, semantic_update
from fedrot.numerics import frobenius_norm
from fedrot.tasks import TaskKind


def random_adapters(rng, n, d_out=5, d_in=4, rank=2):
    return [
        LoraAdapter(
            rng.standard_normal((d_out, rank)), rng.standard_normal((rank, d_in)), rank
        )
        for _ in range(n)
    ]


class TestAggregateIdeal:
    def test_mean_of_products(self):
        rng = np.random.default_rng(0)
        adapters = random_adapters(rng, 3)
        expected = sum(semantic_update(ad) for ad in adapters) / 3
        np.testing.assert_allclose(aggregate_ideal(adapters), expected, atol=1e-14)

    def test_single_client(self):
        rng = np.random.default_rng(1)
        (ad,) = random_adapters(rng, 1)
        np.testing.assert_allclose(aggregate_ideal([ad]), semantic_update(ad))

    def test_empty_rejected(self):
        with pytest.raises(UsageError):
            aggregate_ideal([])

    def test_shape_mismatch_rejected(self):
        rng = np.random.default_rng(2)
        ads = random_adapters(rng, 1) + random_adapters(rng, 1, d_out=6)
        with pytest.raises(UsageError):
            aggregate_ideal(ads)


class TestAggregateFactorwise:
    def test_means(self):
        rng = np.random.default_rng(3)
        adapters = random_adapters(rng, 4)
        out = aggregate_factorwise(adapters)
        np.testing.assert_allclose(out.b, sum(ad.b for ad in adapters) / 4)
        np.testing.assert_allclose(out.a, sum(ad.a for ad in adapters) / 4)

    def test_rank_preserved(self):
        rng = np.random.default_rng(4)
        assert aggregate_factorwise(random_adapters(rng, 3, rank=2)).rank == 2


class TestAggregationError:
    def test_scalar_paper_instance(self):
        # Two scalar clients with products 0.5 and 1.5: ideal mean is 1.0,
        # factor-wise mean of (2, 0.25) and (1.5, 1.0) gives 1.75 * 0.625.
        ads = [
            LoraAdapter(np.array([[2.0]]), np.array([[0.25]]), 1),
            LoraAdapter(np.array([[1.5]]), np.array([[1.0]]), 1),
        ]
        err = aggregation_error(ads)
        assert err.frobenius == pytest.approx(abs(1.75 * 0.625 - 1.0), rel=1e-12)

    def test_two_scalar_lagrange_value(self):
        # For N=2 scalars the identity gives E = -(b1-b2)(a1-a2)/4.
        ads = [
            LoraAdapter(np.array([[1.0]]), np.array([[0.5]]), 1),
            LoraAdapter(np.array([[2.0]]), np.array([[2.0 / 3.0]]), 1),
        ]
        expected = abs(-(1.0 - 2.0) * (0.5 - 2.0 / 3.0) / 4.0)
        assert aggregation_error(ads).frobenius == pytest.approx(expected, rel=1e-12)

    def test_identical_clients_zero_error(self):
        rng = np.random.default_rng(5)
        (ad,) = random_adapters(rng, 1)
        assert aggregation_error([ad.copy() for _ in range(4)]).frobenius == 0.0

    def test_single_client_zero_error(self):
        rng = np.random.default_rng(6)
        assert aggregation_error(random_adapters(rng, 1)).frobenius == 0.0

    def test_matches_lagrange_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            n = int(rng.integers(2, 9))
            ads = random_adapters(
                rng,
                n,
                d_out=int(rng.integers(2, 7)),
                d_in=int(rng.integers(2, 7)),
                rank=1,
            )
            direct = aggregation_error(ads).frobenius
            oracle = frobenius_norm(lagrange_error_oracle(ads))
            assert abs(direct - oracle) <= 1e-10

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 100_000), st.integers(2, 6))
    def test_property_lagrange_identity(self, seed, n):
        rng = np.random.default_rng(seed)
        ads = random_adapters(rng, n, d_out=4, d_in=5, rank=3)
        direct = semantic_update(aggregate_factorwise(ads)) - aggregate_ideal(ads)
        np.testing.assert_allclose(direct, lagrange_error_oracle(ads), atol=1e-10)

    def test_combine_sums_layers(self):
        combined = AggregationError.combine(
            [AggregationError(1.0, [1.0]), AggregationError(2.5, [2.0, 0.5])]
        )
        assert combined.frobenius == pytest.approx(3.5)
        assert combined.per_layer == [1.0, 2.0, 0.5]


def make_config(strategy, n_clients=3, rank=2):
    return FederationConfig(
        strategy=strategy,
        n_clients=n_clients,
        rank=rank,
        dims=(5, 4),
        rounds=4,
        local_steps=1,
        learning_rate=0.1,
        task=TaskSpec(kind=TaskKind.LOWRANK_REGRESSION),
    )


class FakeReport:
    def __init__(self, adapter):
        self.adapter = adapter


class TestServerStep:
    def _history(self, rng):
        ad = LoraAdapter(rng.standard_normal((5, 2)), rng.standard_normal((2, 4)), 2)
        return [GlobalModel(np.zeros((5, 4)), ad)]

    def test_fedit_factorwise(self):
        rng = np.random.default_rng(8)
        history = self._history(rng)
        reports = [FakeReport(ad) for ad in random_adapters(rng, 3)]
        model, err = server_step(Strategy.FEDIT, reports, 1, make_config(Strategy.FEDIT), history)
        expected = aggregate_factorwise([r.adapter for r in reports])
        np.testing.assert_array_equal(model.adapter.b, expected.b)
        np.testing.assert_array_equal(model.adapter.a, expected.a)
        assert err.frobenius >= 0.0

    def test_ffa_keeps_global_a_bitwise(self):
        rng = np.random.default_rng(9)
        history = self._history(rng)
        reports = [FakeReport(ad) for ad in random_adapters(rng, 3)]
        model, _ = server_step(
            Strategy.FFA_LORA, reports, 1, make_config(Strategy.FFA_LORA), history
        )
        assert (model.adapter.a == history[0].adapter.a).all()

    def test_rolora_alternates_frozen_factor(self):
        rng = np.random.default_rng(10)
        history = self._history(rng)
        reports = [FakeReport(ad) for ad in random_adapters(rng, 3)]
        config = make_config(Strategy.ROLORA)
        odd, _ = server_step(Strategy.ROLORA, reports, 1, config, history)
        assert (odd.adapter.a == history[0].adapter.a).all()
        even, _ = server_step(Strategy.ROLORA, reports, 2, config, history)
        assert (even.adapter.b == history[0].adapter.b).all()

    def test_ideal_is_diagnostics_only(self):
        rng = np.random.default_rng(11)
        history = self._history(rng)
        reports = [FakeReport(ad) for ad in random_adapters(rng, 3)]
        with pytest.raises(UsageError):
            server_step(Strategy.IDEAL, reports, 1, make_config(Strategy.IDEAL), history)

    def test_report_count_mismatch(self):
        rng = np.random.default_rng(12)
        history = self._history(rng)
        reports = [FakeReport(ad) for ad in random_adapters(rng, 2)]
        with pytest.raises(ProtocolError):
            server_step(Strategy.FEDIT, reports, 1, make_config(Strategy.FEDIT), history)
