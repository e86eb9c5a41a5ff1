"""Count rule, continuous scores, delta matrices, intersection boosting."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from unpoison.data import LabeledExample
from unpoison.detect import (DeltaConfig, DeltaMatrix, DetectionReport,
                             continuous_scores, delta_matrix,
                             detect_influence_shift, flag_count_rule,
                             multi_point_intersection)
from unpoison.errors import ConfigurationError, InputError
from unpoison.influence import InfluenceConfig, fit_curvature
from unpoison.models import with_predicted_label
from unpoison.transforms import TransformSpec, make_transform_suite


def _matrix(deltas: np.ndarray) -> DeltaMatrix:
    n = len(deltas)
    return DeltaMatrix(np.zeros(n), deltas, np.arange(n, dtype=np.int64),
                       suite=(), test_id=0, train_digest="t")


class TestCountRule:
    def test_all_zero_matrix_below_negative_tau(self):
        m = _matrix(np.zeros((5, 4)))
        assert flag_count_rule(m, tau=-1.0, n_tol=1) == frozenset()

    def test_strongly_negative_row_flagged(self):
        deltas = np.zeros((3, 4))
        deltas[1] = -10.0
        for n_tol in range(4):
            assert flag_count_rule(_matrix(deltas), 0.0, n_tol) == frozenset({1})

    def test_loosest_setting_needs_one_hit(self):
        deltas = np.zeros((2, 4))
        deltas[0, 2] = -5.0
        assert flag_count_rule(_matrix(deltas), -1.0, n_tol=3) == frozenset({0})

    def test_monotone_in_tau_and_n_tol(self):
        g = np.random.default_rng(3)
        m = _matrix(g.normal(0, 5, size=(40, 6)))
        for n_tol in range(3):
            wide = flag_count_rule(m, -1.0, n_tol)
            narrow = flag_count_rule(m, -3.0, n_tol)
            assert narrow <= wide  # more negative tau never enlarges
        for tau in (-2.0, 0.0):
            small = flag_count_rule(m, tau, 0)
            large = flag_count_rule(m, tau, 2)
            assert small <= large  # raising n_tol never shrinks


class TestContinuousScores:
    def test_order_statistic_example(self):
        m = _matrix(np.array([[-5.0, -5.0, -5.0, 0.0]]))
        assert continuous_scores(m, n_tol=1)[0] == 5.0

    def test_constant_row(self):
        m = _matrix(np.full((1, 6), 2.5))
        for n_tol in range(6):
            assert continuous_scores(m, n_tol)[0] == -2.5

    @given(deltas=arrays(np.float64, (30, 5),
                         elements=st.floats(-50, 50)),
           tau=st.floats(-10, 1), n_tol=st.integers(0, 4))
    @settings(max_examples=200, deadline=None)
    def test_threshold_sweep_equals_count_rule(self, deltas, tau, n_tol):
        m = _matrix(deltas)
        by_rule = flag_count_rule(m, tau, n_tol)
        by_score = frozenset(
            int(i) for i in m.ids[continuous_scores(m, n_tol) > -tau])
        assert by_rule == by_score


class TestDeltaMatrix:
    @pytest.fixture(scope="class")
    def fitted(self, tiny_mlp_fit):
        arch, train_set, ckpt = tiny_mlp_fit
        curv = fit_curvature(ckpt, train_set, InfluenceConfig(backend="ekfac"))
        target = with_predicted_label(ckpt, train_set.example(2))
        return train_set, ckpt, curv, target

    def test_identity_column_exactly_zero(self, fitted):
        train_set, ckpt, curv, target = fitted
        suite = [TransformSpec("identity", "keep", 3, seed=9),
                 TransformSpec("blur", "random_distinct", 3, seed=10)]
        matrix = delta_matrix(ckpt, curv, target, suite, train_set)
        assert np.all(matrix.deltas[:, 0] == 0.0)
        assert matrix.deltas.shape == (len(train_set), 2)

    def test_detector_report_round_trip(self, fitted):
        train_set, ckpt, curv, target = fitted
        cfg = DeltaConfig(n_b=4, tau=0.0, n_tol=1, seed=5)
        report, matrix = detect_influence_shift(ckpt, curv, target, train_set, cfg)
        again = DetectionReport.from_json(report.to_json())
        assert again.flagged_ids == report.flagged_ids
        assert np.allclose(again.scores, report.scores)
        assert again.digest() == report.digest()
        # report flags match its stated threshold rule
        by_threshold = frozenset(
            int(i) for i in report.ids[report.scores > report.threshold])
        assert by_threshold == report.flagged_ids
        assert matrix.n_b == 4

    def test_suite_respects_channel_count(self, fitted):
        train_set, ckpt, curv, target = fitted
        cfg = DeltaConfig(n_b=6, tau=0.0, n_tol=1, seed=5)
        report, matrix = detect_influence_shift(ckpt, curv, target, train_set, cfg)
        assert all(s.image_op != "color_switch" for s in matrix.suite)


class TestDeltaConfig:
    def test_n_tol_bounds(self):
        with pytest.raises(ConfigurationError):
            DeltaConfig(n_b=4, n_tol=4)
        with pytest.raises(ConfigurationError):
            DeltaConfig(n_b=4, n_tol=-1)


class TestIntersection:
    def _report(self, flagged, digest="d"):
        ids = np.arange(10, dtype=np.int64)
        return DetectionReport("influence-shift", frozenset(flagged), ids,
                               np.zeros(10), 0.0, {}, digest)

    def test_strict_intersection(self):
        reports = [self._report({1, 2, 3}), self._report({2, 3, 4}),
                   self._report({3, 2, 9})]
        assert multi_point_intersection(reports, m_tol=0) == frozenset({2, 3})

    def test_union_at_loosest(self):
        reports = [self._report({1}), self._report({2}), self._report({3})]
        assert multi_point_intersection(reports, m_tol=2) == \
            frozenset({1, 2, 3})

    def test_mismatched_digests_rejected(self):
        with pytest.raises(InputError):
            multi_point_intersection([self._report({1}, "a"),
                                      self._report({1}, "b")], 0)

    def test_needs_two_reports(self):
        with pytest.raises(InputError):
            multi_point_intersection([self._report({1})], 0)
