"""Reference dataset generation and clustering-network training."""

import logging

import numpy as np
import pytest

from contactsim import learning
from contactsim.cluster import create_cluster_nets
from contactsim.cmaes import CmaesConfig
from contactsim.geometry import Shape
from contactsim.learning import TrajectoryDataset
from contactsim.scenario import BallField, Command, ScenarioConfig
from contactsim.solver import SolverConfig


def pressed_peg_cfg(**kw):
    """Peg held just off-axis so the handle walk presses it on the bore wall."""
    base = dict(
        mode="peg_in_hole",
        body_shape=Shape.cylinder(0.024985, 0.1),
        target_shape=Shape.hole(0.0250175, 0.07, 0.06, 0.06, 0.08),
        command=Command("hold"),
        mass=0.3,
        node_count=300,
        dt=0.01,
        steps=10,
        seed=3,
        start=np.array([2e-4, 0.0, 0.03]),
        solver=SolverConfig(dt=1e-3, relaxation=1.0, max_outer_iters=3000),
        cluster_mode="none",
    )
    base.update(kw)
    return ScenarioConfig(**base)


@pytest.fixture(scope="module")
def peg_cfg():
    return pressed_peg_cfg()


@pytest.fixture(scope="module")
def dataset(peg_cfg):
    return learning.generate_reference(peg_cfg, seed=11, steps=60)


@pytest.fixture(scope="module")
def nets():
    return create_cluster_nets(m_c=4, knn=3, seed=5)


@pytest.fixture(scope="module")
def context(peg_cfg, dataset):
    return learning.cost_context(peg_cfg, dataset.dt)


@pytest.fixture(scope="module")
def prepared(context, dataset, nets):
    return learning.prepare_records(context, dataset, nets.lo, nets.hi)


def random_dataset(n, seed=0, dt=1e-3):
    rng = np.random.default_rng(seed)
    states = rng.normal(size=(n, 13))
    states[:, 3:7] /= np.linalg.norm(states[:, 3:7], axis=1, keepdims=True)
    return TrajectoryDataset(
        np.arange(n), states, rng.normal(size=(n, 6)), rng.normal(size=(n, 6)), dt
    )


class TestTrajectoryDataset:
    def test_save_load_roundtrip_is_exact(self, tmp_path):
        ds = random_dataset(7, seed=4)
        path = tmp_path / "rows.txt"
        ds.save(path)
        back = TrajectoryDataset.load(path)
        assert back.dt == ds.dt
        assert np.array_equal(back.steps, ds.steps)
        assert np.array_equal(back.states, ds.states)
        assert np.array_equal(back.applied, ds.applied)
        assert np.array_equal(back.reference, ds.reference)

    def test_single_row_file_loads(self, tmp_path):
        ds = random_dataset(1, seed=2)
        path = tmp_path / "one.txt"
        ds.save(path)
        assert len(TrajectoryDataset.load(path)) == 1

    def test_load_rejects_missing_dt_header(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("# no step size here\n" + " ".join(["0.0"] * 26) + "\n")
        with pytest.raises(ValueError, match="dt"):
            TrajectoryDataset.load(path)

    def test_load_rejects_wrong_column_count(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("# trajectory dataset dt=0.001\n1 2 3\n")
        with pytest.raises(ValueError, match="columns"):
            TrajectoryDataset.load(path)

    def test_split_is_contiguous_seventy_thirty(self):
        ds = random_dataset(10)
        train, test = ds.train_test()
        assert len(train) == 7 and len(test) == 3
        assert np.array_equal(train.steps, ds.steps[:7])
        assert np.array_equal(test.steps, ds.steps[7:])
        assert np.array_equal(train.states, ds.states[:7])
        assert np.array_equal(test.reference, ds.reference[7:])

    def test_split_rejects_degenerate_fractions(self):
        ds = random_dataset(1)
        with pytest.raises(ValueError):
            ds.train_test()
        with pytest.raises(ValueError):
            random_dataset(5).train_test(train_fraction=1.0)

    def test_rejects_nonpositive_dt(self):
        with pytest.raises(ValueError, match="dt"):
            random_dataset(3, dt=0.0)


class TestGenerateReference:
    def test_kept_plus_discarded_covers_every_step(self, dataset):
        assert len(dataset) + dataset.discarded == 60
        assert np.all(np.diff(dataset.steps) > 0)
        assert dataset.steps[0] >= 0 and dataset.steps[-1] < 60
        assert dataset.dt == 1e-3

    def test_first_row_is_the_start_state(self, dataset, peg_cfg):
        assert dataset.steps[0] == 0
        np.testing.assert_allclose(dataset.states[0, :3], peg_cfg.start, atol=1e-15)
        np.testing.assert_allclose(dataset.states[0, 3:7], [1, 0, 0, 0], atol=1e-15)
        np.testing.assert_allclose(dataset.states[0, 7:], 0.0, atol=1e-15)

    def test_coupling_appears_in_applied_wrench(self, dataset):
        assert np.all(np.abs(dataset.applied).max(axis=1) > 0)

    def test_same_seed_reproduces_rows_bit_for_bit(self, peg_cfg, dataset):
        again = learning.generate_reference(peg_cfg, seed=11, steps=60)
        assert np.array_equal(again.steps, dataset.steps)
        assert np.array_equal(again.states, dataset.states)
        assert np.array_equal(again.applied, dataset.applied)
        assert np.array_equal(again.reference, dataset.reference)

    def test_different_seed_walks_elsewhere(self, peg_cfg, dataset):
        other = learning.generate_reference(peg_cfg, seed=12, steps=60)
        assert not (
            len(other) == len(dataset) and np.array_equal(other.states, dataset.states)
        )

    def test_nonconverged_steps_are_dropped_and_logged(self, caplog):
        cfg = pressed_peg_cfg(
            solver=SolverConfig(dt=1e-3, relaxation=1.0, max_outer_iters=1)
        )
        with caplog.at_level(logging.WARNING, logger="contactsim.learning"):
            ds = learning.generate_reference(cfg, seed=11, steps=12)
        assert ds.discarded > 0
        assert len(ds) + ds.discarded == 12
        assert any("dropping step" in r.message for r in caplog.records)

    def test_rejects_multi_body_scenarios(self):
        cfg = ScenarioConfig(
            mode="ball_slab",
            body_shape=Shape.ball(0.01),
            target_shape=Shape.slab(0.1, 0.1, 0.02),
            command=Command("hold"),
            balls=BallField(count=4),
            node_count=100,
        )
        with pytest.raises(ValueError, match="single-body"):
            learning.generate_reference(cfg, seed=0, steps=10)


class TestCostPipeline:
    def test_passthrough_records_cost_exactly_zero(self, nets, prepared, context):
        small = [r for r in prepared if len(r.positions) <= nets.m_c]
        assert small, "walk never left the passthrough regime"
        assert learning.clustering_cost(nets, small, context) == 0.0

    def test_clustered_records_cost_something(self, nets, prepared, context):
        big = [r for r in prepared if len(r.positions) > nets.m_c]
        assert big, "walk never pressed hard enough to cluster"
        assert learning.clustering_cost(nets, big, context) > 0.0

    def test_cost_is_deterministic(self, nets, prepared, context):
        a = learning.clustering_cost(nets, prepared, context)
        b = learning.clustering_cost(nets, prepared, context)
        assert a == b

    def test_baseline_differs_from_oracle_solver(self, prepared, context):
        cost = learning.baseline_cost(prepared, context, 4)
        assert np.isfinite(cost) and cost > 0.0

    def test_features_precomputed_per_record(self, prepared):
        for rec in prepared:
            n = len(rec.positions)
            assert rec.features.shape == (n, 19)
            assert rec.normals.shape == (n, 3)

    def test_empty_record_list_rejected(self, nets, context):
        with pytest.raises(ValueError):
            learning.clustering_cost(nets, [], context)
        with pytest.raises(ValueError):
            learning.baseline_cost([], context, 4)

    def test_context_rejects_multi_body(self):
        cfg = ScenarioConfig(
            mode="ball_slab",
            body_shape=Shape.ball(0.01),
            target_shape=Shape.slab(0.1, 0.1, 0.02),
            command=Command("hold"),
            node_count=100,
        )
        with pytest.raises(ValueError, match="single-body"):
            learning.cost_context(cfg, 1e-3)


class TestOptimize:
    def small_dataset(self, dataset):
        return TrajectoryDataset(
            dataset.steps[:12],
            dataset.states[:12],
            dataset.applied[:12],
            dataset.reference[:12],
            dataset.dt,
        )

    def test_trains_only_on_the_leading_split(
        self, nets, dataset, context, monkeypatch, tmp_path
    ):
        ds = self.small_dataset(dataset)
        seen = []
        original = learning.prepare_records

        def spy(ctx, subset, lo, hi):
            seen.append(len(subset))
            return original(ctx, subset, lo, hi)

        monkeypatch.setattr(learning, "prepare_records", spy)
        log_path = tmp_path / "generations.txt"
        best, result = learning.cmaes_optimize(
            nets,
            ds,
            context,
            CmaesConfig(population=6, sigma0=0.2, max_generations=3, seed=2),
            log_path=log_path,
        )
        train_len = int(round(0.7 * len(ds)))
        assert seen == [train_len]

        assert np.array_equal(best.flatten(), result.x)
        assert all(
            b <= a for a, b in zip(result.history, result.history[1:])
        ), "best-so-far cost went up"

        lines = log_path.read_text().splitlines()
        assert lines[0].startswith("#")
        table = np.loadtxt(log_path)
        assert table.shape == (result.generations, 3)
        np.testing.assert_allclose(table[:, 1], result.history)
        assert np.all(table[:, 2] > 0)

    def test_optimize_is_deterministic(self, nets, dataset, context):
        ds = self.small_dataset(dataset)
        cfg = CmaesConfig(population=4, sigma0=0.2, max_generations=2, seed=7)
        _, first = learning.cmaes_optimize(nets, ds, context, cfg)
        _, second = learning.cmaes_optimize(nets, ds, context, cfg)
        assert np.array_equal(first.x, second.x)
        assert np.array_equal(first.history, second.history)
