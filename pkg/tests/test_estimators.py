"""Estimator surface: sklearn conventions, validation helpers, fit/predict."""

import numpy as np
import pytest
from sklearn.base import clone

import ktgraph as kt
from ktgraph import GraphEnsembleClassifier, GraphRandomSearch
from ktgraph.estimators import check_image_array, check_labels


class TestInputValidation:
    def test_channels_last_transposed(self):
        X = np.zeros((4, 16, 16, 3), dtype=np.float32)
        out = check_image_array(X)
        assert out.shape == (4, 3, 16, 16)

    def test_channels_first_passthrough(self):
        X = np.zeros((4, 3, 16, 16), dtype=np.float64)
        out = check_image_array(X)
        assert out.shape == (4, 3, 16, 16)
        assert out.dtype == np.float32

    def test_uint8_scaled(self):
        X = np.full((2, 3, 8, 8), 255, dtype=np.uint8)
        out = check_image_array(X)
        assert out.max() == pytest.approx(1.0)

    def test_bad_rank_rejected(self):
        with pytest.raises(ValueError, match="4-D"):
            check_image_array(np.zeros((4, 16, 16)))

    def test_bad_channels_rejected(self):
        with pytest.raises(ValueError, match="channels"):
            check_image_array(np.zeros((4, 5, 16, 16)))

    def test_labels_encoded(self):
        encoded, classes = check_labels(np.array(["cat", "dog", "cat"]), 3)
        assert classes.tolist() == ["cat", "dog"]
        assert encoded.tolist() == [0, 1, 0]

    def test_labels_length_checked(self):
        with pytest.raises(ValueError, match="length"):
            check_labels(np.array([0, 1]), 3)

    def test_single_class_rejected(self):
        with pytest.raises(ValueError, match="2 classes"):
            check_labels(np.array([1, 1, 1]), 3)


@pytest.fixture(scope="module")
def xy():
    ds = kt.synthetic_dataset(3, 30, 32, seed=8, noise=0.05)
    # labels shifted to nonzero values to exercise class re-encoding
    return ds.images, ds.labels + 5


class TestGraphEnsembleClassifier:
    def test_sklearn_conventions(self):
        est = GraphEnsembleClassifier(epochs=3, seed=7)
        params = est.get_params()
        assert params["epochs"] == 3
        cloned = clone(est)
        assert cloned.get_params() == params

    def test_fit_predict_shapes_and_classes(self, xy):
        X, y = xy
        est = GraphEnsembleClassifier(
            graph="dml-2", epochs=4, batch_size=45, width=4, seed=0
        ).fit(X, y)
        assert est.classes_.tolist() == [5, 6, 7]
        pred = est.predict(X)
        assert pred.shape == (len(X),)
        assert set(pred.tolist()) <= {5, 6, 7}
        proba = est.predict_proba(X)
        assert proba.shape == (len(X), 3)
        np.testing.assert_allclose(proba.sum(axis=1), 1.0, atol=1e-5)

    def test_learns_the_easy_shapes(self, xy):
        X, y = xy
        est = GraphEnsembleClassifier(
            graph="independent-2", epochs=10, batch_size=15, width=8, seed=1
        ).fit(X, y)
        assert est.score(X, y) > 0.9

    def test_graph_object_accepted(self, xy):
        X, y = xy
        g = kt.make_preset("independent-2")
        est = GraphEnsembleClassifier(graph=g, epochs=1, batch_size=90, width=4)
        est.fit(X, y)
        assert est.graph_ == g

    def test_invalid_graph_rejected(self, xy):
        X, y = xy
        g = kt.uniform_graph(
            2, kt.LossDesign.PROB_CLOSER, kt.GateKind.CUTOFF,
            label_gate=kt.GateKind.CUTOFF,
        )
        est = GraphEnsembleClassifier(graph=g, epochs=1)
        with pytest.raises(kt.InvalidGraphError):
            est.fit(X, y)

    def test_unfitted_predict_rejected(self, xy):
        X, _ = xy
        with pytest.raises(RuntimeError, match="fit"):
            GraphEnsembleClassifier().predict(X)

    def test_node_count_matches_graph(self, xy):
        X, y = xy
        est = GraphEnsembleClassifier(
            graph="independent-3", epochs=1, batch_size=90, width=4
        ).fit(X, y)
        assert len(est.models_) == 3
        res = est.evaluate_nodes(X, y)
        assert len(res.per_node_accuracy) == 3


class TestGraphRandomSearch:
    def test_search_fit_and_refit(self, xy, tmp_path):
        X, y = xy
        search = GraphRandomSearch(
            num_nodes=2,
            budget=3,
            epochs=2,
            batch_size=45,
            width=4,
            guard=1,
            seed=0,
            log_path=tmp_path / "trials.jsonl",
        ).fit(X, y)
        assert len(search.trials_) == 3
        assert kt.validate_graph(search.best_graph_) == []
        assert search.best_trial_id_ in {0, 1, 2}
        pred = search.predict(X)
        assert pred.shape == (len(X),)
        assert (tmp_path / "trials.jsonl").exists()

    def test_no_refit_blocks_predict(self, xy):
        X, y = xy
        search = GraphRandomSearch(
            num_nodes=2, budget=1, epochs=1, batch_size=90, width=4, refit=False
        ).fit(X, y)
        assert hasattr(search, "best_graph_")
        with pytest.raises(RuntimeError, match="refit"):
            search.predict(X)

    def test_clone_compatible(self):
        search = GraphRandomSearch(budget=5, guard=2)
        assert clone(search).get_params() == search.get_params()
