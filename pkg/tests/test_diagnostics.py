"""Tests for collapse metrics and CSV round-tripping."""

import pytest
import torch
from hypothesis import given, strategies as st

from e2po import diagnostics
from e2po.diagnostics import (CSV_HEADER, MetricsRow, dispersion, export_csv,
                              mode_coverage, parse_csv, smooth, zero_std_ratio)
from e2po.errors import E2POError
from e2po.rewardlab import TaskSpec

DT = torch.float64


class TestZeroStdRatio:
    def test_examples(self):
        assert zero_std_ratio([True, True, False, False]) == 0.5
        assert zero_std_ratio([False]) == 0.0
        assert zero_std_ratio([True] * 7) == 1.0

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            zero_std_ratio([])

    @given(st.lists(st.booleans(), min_size=1, max_size=50))
    def test_in_unit_interval(self, flags):
        assert 0.0 <= zero_std_ratio(flags) <= 1.0


class TestSmooth:
    def test_first_value_passthrough(self):
        assert smooth([3.0, 5.0], 0.5) == [3.0, 4.0]

    def test_alpha_one_is_identity(self):
        xs = [1.0, -2.0, 7.0]
        assert smooth(xs, 1.0) == xs

    def test_recursion(self):
        out = smooth([0.0, 10.0, 10.0], 0.1)
        assert out[1] == pytest.approx(1.0)
        assert out[2] == pytest.approx(0.1 * 10.0 + 0.9 * 1.0)

    def test_invalid_alpha(self):
        with pytest.raises(ValueError):
            smooth([1.0], 0.0)
        with pytest.raises(ValueError):
            smooth([1.0], 1.5)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            smooth([], 0.5)

    @given(st.lists(st.floats(0.0, 100.0), min_size=1, max_size=30),
           st.floats(0.01, 1.0))
    def test_stays_within_series_range(self, xs, alpha):
        out = smooth(xs, alpha)
        assert all(min(xs) - 1e-9 <= v <= max(xs) + 1e-9 for v in out)


class TestDispersion:
    def test_collinear_oracle(self):
        # points 0, 1, 2 on a line: pairwise distances 1, 2, 1, mean 4/3
        x = torch.tensor([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]], dtype=DT)
        assert dispersion(x) == pytest.approx(4.0 / 3.0)

    def test_identical_points_zero(self):
        assert dispersion(torch.ones(5, 2, dtype=DT)) == pytest.approx(0.0)

    def test_needs_two_points(self):
        with pytest.raises(ValueError):
            dispersion(torch.ones(1, 2, dtype=DT))


class TestModeCoverage:
    def test_all_on_one_mode(self):
        task = TaskSpec()
        x = task.centers[3].unsqueeze(0).expand(10, -1)
        assert mode_coverage(x, task) == pytest.approx(1.0 / 8.0)

    def test_full_coverage(self):
        task = TaskSpec()
        assert mode_coverage(task.centers, task) == pytest.approx(1.0)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            mode_coverage(torch.empty(0, 2, dtype=DT), TaskSpec())


def _row(i):
    return MetricsRow(iteration=i, reward_mean=0.5 + i, reward_std=0.25,
                      zero_std_ratio=0.1 * i, smoothed_std=0.2,
                      dispersion=1.5, mode_coverage=0.875,
                      l_emb_final=-12.25, wallclock_s=0.0)


class TestCsv:
    def test_header_is_frozen(self):
        assert CSV_HEADER == ("iteration,reward_mean,reward_std,zero_std_ratio,"
                              "smoothed_std,dispersion,mode_coverage,"
                              "l_emb_final,wallclock_s")

    def test_round_trip(self, tmp_path):
        rows = [_row(0), _row(1), _row(2)]
        path = tmp_path / "m.csv"
        export_csv(rows, path)
        assert parse_csv(path) == rows

    def test_byte_stability(self, tmp_path):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        export_csv([_row(0), _row(1)], a)
        export_csv([_row(0), _row(1)], b)
        assert a.read_bytes() == b.read_bytes()

    def test_golden_first_line(self, tmp_path):
        path = tmp_path / "m.csv"
        export_csv([_row(0)], path)
        lines = path.read_text().splitlines()
        assert lines[0] == CSV_HEADER
        assert lines[1] == "0,0.5,0.25,0,0.2,1.5,0.875,-12.25,0"

    def test_parse_rejects_wrong_header(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("iteration,reward\n0,1.0\n")
        with pytest.raises(E2POError):
            parse_csv(path)

    def test_export_unwritable_path(self, tmp_path):
        with pytest.raises(E2POError):
            export_csv([_row(0)], tmp_path / "no" / "dir" / "m.csv")
