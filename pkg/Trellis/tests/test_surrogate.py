import numpy as np
import pytest
from sklearn.ensemble import RandomForestRegressor
from sklearn.model_selection import KFold, cross_val_score
from sklearn.tree import DecisionTreeRegressor

import surrogate
from conftest import synthetic_archive
from search_space import DEFAULT_TABLE, ArchitectureEncoding, sample_uniform
from surrogate import (
    KINDS,
    ArchiveTooSmallError,
    GridGaussianProcessRegressor,
    LengthMismatchError,
    TrainingArchive,
    append_archive_record,
    compare_surrogates,
    featurize,
    featurize_many,
    fit,
    holdout_scores,
    ktau,
    load_archive,
    load_surrogate,
    read_archive_records,
    save_surrogate,
    select_best,
)
from trainer import FitnessRecord

OFFSETS = np.cumsum((0,) + DEFAULT_TABLE.bounds[:-1])


def additive_function(seed=123):
    rng = np.random.default_rng(seed)
    effects = [rng.normal(size=b) for b in DEFAULT_TABLE.bounds]
    return lambda enc: float(sum(effects[i][g] for i, g in enumerate(enc)))


# --- Featurization --------------------------------------------------------------------

def test_all_zero_encoding_features():
    x = featurize(ArchitectureEncoding((0, 0, 0, 0, 0, 0)))
    assert x.shape == (33,)
    np.testing.assert_array_equal(np.flatnonzero(x), [0, 4, 7, 13, 21, 29])


def test_one_hot_positions_follow_genes():
    rng = np.random.default_rng(0)
    encodings = [sample_uniform(DEFAULT_TABLE, rng) for _ in range(200)]
    X = featurize_many(encodings)
    for enc, row in zip(encodings, X):
        assert row.sum() == 6
        np.testing.assert_array_equal(np.flatnonzero(row), OFFSETS + np.asarray(enc.to_list()))


def test_distinct_encodings_have_distinct_features():
    archive = synthetic_archive(500, lambda enc: 0.0)
    X = featurize_many(archive.encodings)
    assert len({row.tobytes() for row in X}) == 500


# --- Regressors -----------------------------------------------------------------------

@pytest.mark.parametrize("kind", KINDS)
def test_constant_targets_give_constant_predictions(kind):
    archive = synthetic_archive(40, lambda enc: 0.42)
    model = fit(kind, archive)
    others = synthetic_archive(20, lambda enc: 0.0, seed=9).encodings
    np.testing.assert_allclose(model.predict_many(others), 0.42, atol=1e-9)


def test_near_noiseless_gp_interpolates():
    archive = synthetic_archive(30, lambda enc: 0.0)
    archive.values = np.random.default_rng(1).normal(size=30)
    gp = GridGaussianProcessRegressor(length_scales=(0.5,), noise_levels=(1e-10,))
    model = fit("gaussian_process", archive, estimator=gp)
    np.testing.assert_allclose(model.predict_many(archive.encodings), archive.values, atol=1e-6)


def test_gp_grid_keeps_best_likelihood():
    archive = synthetic_archive(60, additive_function())
    gp = GridGaussianProcessRegressor().fit(featurize_many(archive.encodings), archive.values)
    assert gp.length_scale_ in (0.5, 1.0, 2.0, 4.0)
    assert gp.noise_ in (1e-6, 1e-4, 1e-2)
    assert np.isfinite(gp.log_marginal_likelihood_)


def test_tree_on_single_gene_target_splits_only_that_gene():
    archive = synthetic_archive(80, lambda enc: [0.0, 1.0, 3.0, 6.0][enc[0]])
    model = fit("decision_tree", archive)
    tree = model.estimator.tree_
    used = set(tree.feature[tree.feature >= 0])
    assert used <= {0, 1, 2, 3}
    np.testing.assert_allclose(model.predict_many(archive.encodings), archive.values)


def test_unbounded_tree_reproduces_training_targets():
    archive = synthetic_archive(50, additive_function())
    model = fit("decision_tree", archive, estimator=DecisionTreeRegressor(random_state=0))
    np.testing.assert_allclose(model.predict_many(archive.encodings), archive.values)


def test_forest_prediction_is_mean_of_trees():
    archive = synthetic_archive(60, additive_function())
    model = fit("random_forest", archive)
    X = featurize_many(archive.encodings[:10])
    by_tree = np.mean([tree.predict(X) for tree in model.estimator.estimators_], axis=0)
    np.testing.assert_allclose(model.predict_many(archive.encodings[:10]), by_tree)


def test_degenerate_forest_equals_tree():
    archive = synthetic_archive(60, additive_function())
    archive.values = archive.values + np.random.default_rng(2).normal(scale=0.1, size=60)
    forest = fit("random_forest", archive, estimator=RandomForestRegressor(
        n_estimators=1, max_features=None, bootstrap=False, max_depth=8, min_samples_leaf=2,
        random_state=0))
    tree = fit("decision_tree", archive)
    np.testing.assert_allclose(forest.predict_many(archive.encodings),
                               tree.predict_many(archive.encodings))


def test_unknown_kind():
    with pytest.raises(ValueError):
        surrogate.make_estimator("svr")


def test_archive_needs_two_distinct_encodings():
    enc = ArchitectureEncoding((0, 1, 2, 3, 4, 0))
    archive = TrainingArchive([enc, enc, enc], np.array([0.1, 0.2, 0.3]), False, "acc")
    with pytest.raises(ArchiveTooSmallError):
        fit("decision_tree", archive)


# --- KTau -----------------------------------------------------------------------------

def test_ktau_examples():
    assert ktau([1, 2, 3, 4], [1, 2, 3, 4]) == pytest.approx(1.0)
    assert ktau([1, 2, 3, 4], [4, 3, 2, 1]) == pytest.approx(-1.0)
    assert ktau([1, 3, 2, 4], [1, 2, 3, 4]) == pytest.approx(2 / 3, abs=1e-3)
    assert ktau([1, 1, 1], [1, 2, 3]) == 0.0


def test_ktau_ignores_monotone_transforms():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=30), rng.normal(size=30)
    assert ktau(a, b) == pytest.approx(ktau(np.exp(a), b ** 3))


def test_ktau_length_mismatch():
    with pytest.raises(LengthMismatchError):
        ktau([1, 2, 3], [1, 2])


# --- Selection ------------------------------------------------------------------------

def test_selected_surrogate_has_lowest_cv_mse():
    archive = synthetic_archive(60, additive_function())
    model, report = select_best(archive, folds=5, seed=0)
    means = {k: v["mean"] for k, v in report.cv_mse.items()}
    assert set(means) == set(KINDS)
    assert report.selected == min(means, key=means.get)
    assert model.kind == report.selected


def test_selection_is_deterministic():
    archive = synthetic_archive(40, additive_function())
    _, a = select_best(archive, folds=4, seed=3)
    _, b = select_best(archive, folds=4, seed=3)
    assert a.to_dict() == b.to_dict()


def test_step_function_prefers_trees_over_smooth_gp():
    archive = synthetic_archive(120, lambda enc: 1.0 if enc[2] >= 3 else 0.0)
    tree_mse = surrogate.cross_validated_mse("decision_tree", archive, 5, 0).mean()
    forest_mse = surrogate.cross_validated_mse("random_forest", archive, 5, 0).mean()

    smooth = GridGaussianProcessRegressor(length_scales=(50.0,), noise_levels=(1e-2,))
    smooth_mse = -cross_val_score(smooth, featurize_many(archive.encodings), archive.values,
                                  cv=KFold(5, shuffle=True, random_state=0),
                                  scoring="neg_mean_squared_error").mean()
    assert min(tree_mse, forest_mse) < smooth_mse


def test_more_folds_than_records():
    archive = synthetic_archive(4, additive_function())
    with pytest.raises(ArchiveTooSmallError):
        select_best(archive, folds=5)


def test_compare_surrogates_table():
    archive = synthetic_archive(50, additive_function())
    table = compare_surrogates(archive, runs=3)
    assert list(table["kind"]) == sorted(KINDS)
    assert {"mse_mean", "mse_std", "ktau_mean", "ktau_std"} <= set(table.columns)
    assert (table["mse_mean"] >= 0).all()


@pytest.mark.slow
def test_selected_surrogate_ranks_additive_holdout():
    truth = additive_function(seed=11)
    noise = np.random.default_rng(5)
    archive = synthetic_archive(200, lambda enc: truth(enc) + noise.normal(scale=0.01), seed=2)
    train, holdout = archive.subset(range(160)), archive.subset(range(160, 200))
    model, _ = select_best(train, folds=5, seed=0)
    assert ktau(model.predict_many(holdout.encodings), holdout.values) >= 0.8


def test_holdout_scores_fields():
    archive = synthetic_archive(50, additive_function())
    scores = holdout_scores("random_forest", archive, fraction=0.2, seed=0)
    assert scores["holdout_size"] == 10
    assert -1.0 <= scores["ktau"] <= 1.0
    assert scores["mse"] >= 0.0


# --- Archive and persistence ----------------------------------------------------------

def test_archive_file_round_trip(tmp_path):
    path = tmp_path / "archive.jsonl"
    assert read_archive_records(path) == []
    records = [
        FitnessRecord(ArchitectureEncoding((0, 1, 2, 3, 4, 1)), "mae", 0.5, True, 1.0, 0, id="s0000"),
        FitnessRecord(ArchitectureEncoding((1, 1, 2, 3, 4, 1)), "mae", float("inf"), True, 2.0, 0,
                      diverged=True, id="s0001"),
        FitnessRecord(ArchitectureEncoding((2, 1, 2, 3, 4, 1)), "mae", 0.25, True, 1.5, None,
                      id="s0002"),
    ]
    for record in records:
        append_archive_record(path, record)
    back = read_archive_records(path)
    assert [r.id for r in back] == ["s0000", "s0001", "s0002"]
    assert back[1].diverged and back[1].value == float("inf")
    assert back[2].seed is None

    archive = load_archive(path)
    assert len(archive) == 2
    assert archive.minimize and archive.metric_name == "mae"


def test_surrogate_file_round_trip(tmp_path):
    archive = synthetic_archive(30, additive_function())
    model = fit("random_forest", archive)
    restored = load_surrogate(save_surrogate(model, tmp_path / "surrogate.joblib"))
    assert restored.kind == "random_forest"
    np.testing.assert_array_equal(restored.predict_many(archive.encodings),
                                  model.predict_many(archive.encodings))
