import json

import numpy as np
import pytest
from conftest import full_grid_indices, low_rank_values, obs_from_values

from tenfit.core import DesignSpace, Normalizer, ObservationSet
from tenfit.errors import ContractError, SplitError, StratumExhaustedError
from tenfit.harness import (
    RegionSpec,
    SamplingPlan,
    aggregate_error_grids,
    biased_split,
    ood_sweep,
    per_cell_errors,
    renormalize_splits,
    region_from_values,
    run_experiment,
    uniform_split,
)
from tenfit.modelio import write_dataset
from tenfit.optim import TrainConfig


def random_obs(shape, n, seed, low=0.0, high=1.0):
    rng = np.random.default_rng(seed)
    grid = full_grid_indices(shape)
    picked = rng.choice(len(grid), size=n, replace=False)
    return ObservationSet(
        space=DesignSpace.from_shape(shape),
        indices=grid[picked],
        values=rng.uniform(low, high, size=n),
        normalizer=Normalizer(low, high),
    )


def as_row_set(obs):
    return {tuple(i) + (v,) for i, v in zip(obs.indices, obs.values)}


class TestUniformSplit:
    def test_eighty_percent_of_600(self):
        obs = random_obs((10, 10, 10), 600, seed=0)
        train, test = uniform_split(obs, 0.8, seed=1)
        assert train.n == 480
        assert test.n == 120

    def test_deterministic(self):
        obs = random_obs((5, 4), 10, seed=2)
        a = uniform_split(obs, 0.5, seed=9)
        b = uniform_split(obs, 0.5, seed=9)
        assert as_row_set(a[0]) == as_row_set(b[0])
        assert as_row_set(a[1]) == as_row_set(b[1])

    def test_partition_laws(self):
        obs = random_obs((6, 6), 20, seed=3)
        train, test = uniform_split(obs, 0.7, seed=4)
        assert as_row_set(train) | as_row_set(test) == as_row_set(obs)
        assert not as_row_set(train) & as_row_set(test)

    def test_input_order_independent(self):
        obs = random_obs((6, 6), 20, seed=5)
        shuffled = obs.take(np.random.default_rng(0).permutation(obs.n))
        a = uniform_split(obs, 0.6, seed=11)
        b = uniform_split(shuffled, 0.6, seed=11)
        assert as_row_set(a[0]) == as_row_set(b[0])

    def test_degenerate_fraction_rejected(self):
        obs = random_obs((4, 4), 4, seed=6)
        with pytest.raises(ContractError):
            uniform_split(obs, 1.0, seed=0)
        with pytest.raises(SplitError):
            uniform_split(obs, 0.99, seed=0)  # round(3.96) = 4 -> empty test side


class TestBiasedSplit:
    def region(self):
        return RegionSpec(axis_a="p0", axis_b="p1", a_range=(0, 2), b_range=(0, 2))

    def test_counts_exact(self):
        obs = random_obs((6, 6, 4), 120, seed=7)
        region = self.region()
        train, test = biased_split(obs, region, n_in=30, n_out=10, seed=8)
        in_train = int(region.mask(train).sum())
        assert (in_train, train.n - in_train) == (30, 10)
        assert train.n + test.n == obs.n

    def test_n_out_zero_boundary(self):
        obs = random_obs((6, 6, 4), 120, seed=9)
        region = self.region()
        train, test = biased_split(obs, region, n_in=20, n_out=0, seed=10)
        assert not (~region.mask(train)).any()
        out_total = int((~region.mask(obs)).sum())
        assert int((~region.mask(test)).sum()) == out_total

    def test_whole_projection_region_degenerates_to_uniform(self):
        obs = random_obs((4, 4), 16, seed=11)
        region = RegionSpec(axis_a="p0", axis_b="p1", a_range=(0, 3), b_range=(0, 3))
        train, test = biased_split(obs, region, n_in=8, n_out=0, seed=12)
        assert train.n == 8 and test.n == 8

    def test_complement_membership_recount(self):
        obs = random_obs((4, 9, 11, 3), 600, seed=13)
        region = RegionSpec(axis_a="p1", axis_b="p2", a_range=(0, 4), b_range=(0, 5))
        train, test = biased_split(obs, region, n_in=150, n_out=30, seed=14)
        assert test.n == 420
        train_rows = as_row_set(train)
        test_rows = as_row_set(test)
        for row in as_row_set(obs):  # brute-force row-by-row filter
            assert (row in train_rows) != (row in test_rows)

    def test_stratum_exhausted_named(self):
        obs = random_obs((4, 4), 16, seed=15)
        region = RegionSpec(axis_a="p0", axis_b="p1", a_range=(0, 0), b_range=(0, 0))
        with pytest.raises(StratumExhaustedError, match="in-region"):
            biased_split(obs, region, n_in=10, n_out=0, seed=0)
        with pytest.raises(StratumExhaustedError, match="out-of-region"):
            biased_split(obs, region, n_in=0, n_out=100, seed=0)

    def test_deterministic(self):
        obs = random_obs((6, 6, 4), 100, seed=16)
        region = self.region()
        a = biased_split(obs, region, 20, 5, seed=17)
        b = biased_split(obs, region, 20, 5, seed=17)
        assert as_row_set(a[0]) == as_row_set(b[0])

    def test_many_random_plans_membership(self):
        rng = np.random.default_rng(18)
        obs = random_obs((6, 5, 4, 3), 300, seed=19)
        for _ in range(20):
            axes = rng.choice(4, size=2, replace=False)
            sizes = (6, 5, 4, 3)
            a_lo = int(rng.integers(0, sizes[axes[0]]))
            a_hi = int(rng.integers(a_lo, sizes[axes[0]]))
            b_lo = int(rng.integers(0, sizes[axes[1]]))
            b_hi = int(rng.integers(b_lo, sizes[axes[1]]))
            region = RegionSpec(
                axis_a=f"p{axes[0]}", axis_b=f"p{axes[1]}",
                a_range=(a_lo, a_hi), b_range=(b_lo, b_hi),
            )
            available_in = int(region.mask(obs).sum())
            available_out = obs.n - available_in
            n_in = int(rng.integers(0, available_in + 1))
            n_out = int(rng.integers(0, available_out + 1))
            if n_in + n_out in (0, obs.n):
                continue
            train, test = biased_split(obs, region, n_in, n_out, seed=int(rng.integers(1 << 30)))
            assert int(region.mask(train).sum()) == n_in
            assert train.n == n_in + n_out
            assert train.n + test.n == obs.n
            assert not as_row_set(train) & as_row_set(test)


class TestRegionSpec:
    def test_axes_must_differ(self):
        with pytest.raises(ContractError):
            RegionSpec(axis_a="p0", axis_b="p0", a_range=(0, 1), b_range=(0, 1))

    def test_interval_bounds_checked(self):
        space = DesignSpace.from_shape((3, 3))
        region = RegionSpec(axis_a="p0", axis_b="p1", a_range=(0, 5), b_range=(0, 1))
        with pytest.raises(ContractError):
            region.validate(space)

    def test_from_value_labels(self):
        space = DesignSpace.from_shape((4, 3))
        region = region_from_values(space, "p0", "p1", (1.0, 2.0), (0.0, 1.0))
        assert region.a_range == (1, 2)
        assert region.b_range == (0, 1)


class TestRenormalization:
    def test_train_scope_rescales_to_unit_interval(self):
        obs = random_obs((5, 5), 20, seed=20, low=2.0, high=10.0)
        # values stored in [0,1] of normalizer(2,10); simulate train rows
        train, test = uniform_split(obs, 0.5, seed=21)
        train2, test2 = renormalize_splits(train, test, "train")
        assert train2.values.min() == pytest.approx(0.0, abs=1e-12)
        assert train2.values.max() == pytest.approx(1.0, abs=1e-12)
        # round-trip consistency: original units preserved
        back = train2.normalizer.denormalize(train2.values)
        orig = train.normalizer.denormalize(train.values)
        assert back == pytest.approx(orig, rel=1e-12)

    def test_full_scope_is_identity(self):
        obs = random_obs((5, 5), 20, seed=22)
        train, test = uniform_split(obs, 0.5, seed=23)
        train2, test2 = renormalize_splits(train, test, "full")
        assert train2 is train and test2 is test


class TestPerCellErrors:
    def test_all_correct_gives_zero_grid(self):
        obs = random_obs((4, 3, 2), 20, seed=24)
        grid = per_cell_errors(obs.values, obs, axes=("p0", "p1"))
        observed = grid.count > 0
        assert np.all(grid.mean[observed] == 0.0)
        assert np.all(np.isnan(grid.mean[~observed]))

    def test_single_row_cell(self):
        space = DesignSpace.from_shape((3, 3))
        obs = ObservationSet(
            space=space,
            indices=np.array([[1, 2]]),
            values=np.array([0.7]),
            normalizer=Normalizer(0, 1),
        )
        grid = per_cell_errors(np.array([0.5]), obs, axes=("p0", "p1"))
        assert grid.mean[1, 2] == pytest.approx(0.2)
        assert grid.std[1, 2] == 0.0
        assert grid.count[1, 2] == 1
        assert grid.count.sum() == 1

    def test_sparse_coverage_leaves_absent_cells(self):
        obs = random_obs((6, 6, 3), 10, seed=25)
        grid = per_cell_errors(np.zeros(10), obs, axes=("p0", "p1"))
        assert np.isnan(grid.mean).any()
        assert (grid.count == 0).any()

    def test_alignment_contract(self):
        obs = random_obs((3, 3), 5, seed=26)
        with pytest.raises(ContractError):
            per_cell_errors(np.zeros(4), obs, axes=("p0", "p1"))

    def test_aggregation_of_identical_grids_has_zero_std(self):
        # dyadic errors make the cross-iteration mean exact, so std is exactly 0
        space = DesignSpace.from_shape((3, 3))
        obs = ObservationSet(
            space=space,
            indices=np.array([[0, 0], [1, 2], [2, 1]]),
            values=np.array([0.25, 0.5, 0.75]),
            normalizer=Normalizer(0, 1),
        )
        grid = per_cell_errors(np.zeros(3), obs, axes=("p0", "p1"))
        agg = aggregate_error_grids([grid, grid, grid])
        observed = agg.count > 0
        assert np.all(agg.std[observed] == 0.0)
        assert np.all(agg.mean[observed] == grid.mean[observed])
        assert np.array_equal(agg.count, grid.count * 3)

    def test_aggregation_of_identical_grids_float_tolerance(self):
        obs = random_obs((3, 3), 6, seed=27)
        grid = per_cell_errors(np.zeros(6), obs, axes=("p0", "p1"))
        agg = aggregate_error_grids([grid, grid, grid])
        observed = agg.count > 0
        assert np.all(agg.std[observed] <= 1e-15)


class TestOodSweep:
    def setup_obs(self):
        values = low_rank_values((4, 3, 3), 2, seed=30)
        return obs_from_values((4, 3, 3), values)

    def region(self):
        return RegionSpec(axis_a="p0", axis_b="p1", a_range=(0, 1), b_range=(0, 1))

    def test_requires_increasing_counts(self):
        cfg = TrainConfig(rank=2, epochs=5, lr=0.05)
        with pytest.raises(ContractError):
            ood_sweep(self.setup_obs(), self.region(), 5, [4, 4], cfg, ["cpd"], iterations=1)

    def test_exhaustion_propagates(self):
        cfg = TrainConfig(rank=2, epochs=5, lr=0.05)
        with pytest.raises(StratumExhaustedError):
            ood_sweep(self.setup_obs(), self.region(), 5, [1000], cfg, ["cpd"], iterations=1)

    def test_metrics_restricted_to_ood_rows(self):
        obs = self.setup_obs()
        region = self.region()
        cfg = TrainConfig(rank=2, epochs=30, lr=0.05, seed=1)
        table = ood_sweep(obs, region, 6, [3], cfg, ["cpd"], iterations=2)
        row = table["models"]["cpd"][0]
        # independent recount of OOD test rows for iteration 0
        train, test = biased_split(obs, region, 6, 3, seed=cfg.seed + 0)
        train, test = renormalize_splits(train, test, "train")
        expected_n = int((~region.mask(test)).sum())
        assert row["per_iteration"][0]["n"] == expected_n

    def test_sweep_deterministic(self):
        obs = self.setup_obs()
        cfg = TrainConfig(rank=2, epochs=20, lr=0.05, seed=2)
        a = ood_sweep(obs, self.region(), 6, [2, 4], cfg, ["cpd"], iterations=2)
        b = ood_sweep(obs, self.region(), 6, [2, 4], cfg, ["cpd"], iterations=2)
        assert a == b


class TestRunExperiment:
    def make_dataset(self, tmp_path):
        values = low_rank_values((4, 3, 3), 2, seed=40)
        values = (values - values.min()) / (values.max() - values.min())
        obs = obs_from_values((4, 3, 3), values, normalizer=Normalizer(0.0, 1.0))
        data_dir = tmp_path / "data"
        write_dataset(obs, data_dir)
        return data_dir

    def experiment_config(self, data_dir, with_failure=False):
        models = [
            {"kind": "cpd", "rank": 2, "epochs": 120, "lr": 0.05},
            {"kind": "cpd_s", "rank": 2, "epochs": 120, "lr": 0.05, "lambda_smooth": 0.1},
        ]
        if with_failure:
            models.append({"kind": "cpd", "name": "cpd_diverging", "rank": 2, "epochs": 30, "lr": 1e160})
        return {
            "dataset": str(data_dir),
            "iterations": 3,
            "seed": 7,
            "normalization": "train",
            "models": models,
            "plans": [
                {"kind": "uniform", "fraction": 0.8},
                {
                    "kind": "biased",
                    "region": {"axis_a": "p0", "axis_b": "p1", "a_range": [0, 1], "b_range": [0, 1]},
                    "n_in": 10,
                    "n_out": 6,
                },
            ],
        }

    def test_full_run_outputs(self, tmp_path):
        data_dir = self.make_dataset(tmp_path)
        out_dir = tmp_path / "out"
        summary = run_experiment(self.experiment_config(data_dir), out_dir)
        assert not summary["failures"]
        for plan in ("uniform", "biased"):
            for model in ("cpd", "cpd_s"):
                assert model in summary["aggregates"][plan]
        assert (out_dir / "summary.json").exists()
        assert (out_dir / "fms_uniform_vs_biased.json").exists()
        assert (out_dir / "grids" / "biased__cpd.json").exists()
        assert (out_dir / "factors" / "uniform__cpd").is_dir()
        fms_payload = json.loads((out_dir / "fms_uniform_vs_biased.json").read_text())
        assert len(fms_payload["per_iteration"]) == 3
        assert -1.0 <= fms_payload["mean"] <= 1.0

    def test_aggregates_match_persisted_iterations(self, tmp_path):
        data_dir = self.make_dataset(tmp_path)
        out_dir = tmp_path / "out"
        summary = run_experiment(self.experiment_config(data_dir), out_dir)
        for plan in ("uniform", "biased"):
            for model in ("cpd", "cpd_s"):
                values = []
                for it in range(3):
                    payload = json.loads(
                        (out_dir / "per_iteration" / f"{plan}__{model}__{it:03d}.json").read_text()
                    )
                    values.append(payload["metrics"]["mae"])
                agg = summary["aggregates"][plan][model]["mae"]
                assert agg["mean"] == pytest.approx(float(np.mean(values)), abs=1e-12)
                assert agg["std"] == pytest.approx(float(np.std(values)), abs=1e-12)

    @pytest.mark.filterwarnings("ignore:overflow", "ignore:invalid value")
    def test_failures_recorded_not_fatal(self, tmp_path):
        data_dir = self.make_dataset(tmp_path)
        summary = run_experiment(
            self.experiment_config(data_dir, with_failure=True), tmp_path / "out"
        )
        # one DivergenceError per (plan, iteration) cell of the diverging model
        assert len(summary["failures"]) == 6
        assert all(f["model"] == "cpd_diverging" for f in summary["failures"])
        assert all(f["error"] == "DivergenceError" for f in summary["failures"])
        # healthy models unaffected
        assert "cpd" in summary["aggregates"]["uniform"]

    def test_reruns_identical(self, tmp_path):
        data_dir = self.make_dataset(tmp_path)
        a = run_experiment(self.experiment_config(data_dir), tmp_path / "out_a")
        b = run_experiment(self.experiment_config(data_dir), tmp_path / "out_b")
        assert a["aggregates"] == b["aggregates"]


class TestMetricAggregation:
    def test_identical_values_give_exact_mean_and_zero_std(self):
        from tenfit.harness import _aggregate_metric_dicts

        row = {"r2": 0.75, "mae": 0.125, "rmse": 0.25, "mape": 0.5}
        agg = _aggregate_metric_dicts([dict(row)] * 4)
        for key, value in row.items():
            assert agg[key]["mean"] == value
            assert agg[key]["std"] == 0.0
        assert agg["n_iterations"] == 4


class TestSamplingPlanValidation:
    def test_uniform_needs_fraction(self):
        with pytest.raises(ContractError):
            SamplingPlan(kind="uniform")

    def test_biased_needs_region(self):
        with pytest.raises(ContractError):
            SamplingPlan(kind="biased", n_in=5, n_out=2)

    def test_unknown_kind(self):
        with pytest.raises(ContractError):
            SamplingPlan(kind="stratified", fraction=0.5)
