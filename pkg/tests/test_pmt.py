import numpy as np
import pytest

from dnnmut import analysis, nn_core, pmt
from dnnmut.data import DataMutationSpec
from dnnmut.errors import ConfigError, DataError, DimensionError
from dnnmut.mutation_engine import ModelMutationSpec, MutantRecord, ProgramMutationSpec, generate_pool
from dnnmut.pmt import MutantFeatures, PmtModel


class Labeled:
    def __init__(self, ref, pool):
        self.baseline = nn_core.accuracy(ref.net, ref.data, "val")
        self.features = [pmt.extract_features(r, ref.net, self.baseline) for r in pool]
        self.X = pmt.feature_matrix(self.features)
        self.killed = analysis.kill_matrix(ref.net, pool, ref.data, "test").killed_mutants


@pytest.fixture(scope="module")
def labeled(reference):
    return Labeled(reference, reference.pool)


@pytest.fixture(scope="module")
def other_version(reference):
    r = reference
    m = r.cfg["mutation"]
    pool, _ = generate_pool(r.net, r.data, r.op_mix, m["count"], m["quality_ratio"], base_seed=10_000,
                            max_attempts=m["max_attempts"])
    return Labeled(r, pool)


# --- features ---------------------------------------------------------------


def test_copy_has_zero_delta_and_drop(moons_net):
    rec = MutantRecord(0, "model_level", ModelMutationSpec("NS", 0.5), moons_net, 0.9, True)
    f = pmt.extract_features(rec, moons_net, 0.9)
    assert f.weight_delta_norm == 0.0 and f.gate_accuracy_drop == 0.0 and f.layer_position == 0.0
    assert sum(f.operator_onehot) == 1.0 and f.operator_onehot[pmt.OPERATOR_KINDS.index("NS")] == 1.0


def test_gf_magnitude_is_product(moons_net):
    spec = ModelMutationSpec("GF", 0.1, 0.5)
    rec = MutantRecord(1, "model_level", spec, moons_net, 0.8, True)
    assert pmt.extract_features(rec, moons_net, 0.9).perturbation_magnitude == pytest.approx(0.05)


def test_layer_position_tracks_mutated_layer(moons_net):
    from dnnmut.mutation_engine import apply_model_operator
    spec = ModelMutationSpec("NAI", 0.5, seed=1)
    rec = MutantRecord(0, "model_level", spec, apply_model_operator(moons_net, spec), 0.9, True)
    f = pmt.extract_features(rec, moons_net, 0.95)
    assert f.layer_position == 0.0 and f.weight_delta_norm > 0
    assert f.gate_accuracy_drop == pytest.approx(0.05)


def test_architecture_change_rules(moons_net):
    wider = nn_core.random_network(0, [2, 16, 2])
    prog = MutantRecord(0, "source_level_program", ProgramMutationSpec("layer_addition", 0, "relu", None, 8),
                        wider, 0.9, True)
    assert pmt.extract_features(prog, moons_net, 0.9).weight_delta_norm == 1.0
    bad = MutantRecord(1, "source_level_data", DataMutationSpec("label_error", 0.1), wider, 0.9, True)
    with pytest.raises(DimensionError):
        pmt.extract_features(bad, moons_net, 0.9)


def test_extract_is_pure(reference):
    rec = reference.pool[3]
    assert pmt.extract_features(rec, reference.net, 1.0) == pmt.extract_features(rec, reference.net, 1.0)


def test_accuracy_drop_correlates_with_kills(labeled):
    drop = labeled.X[:, pmt.FEATURE_NAMES.index("gate_accuracy_drop")]
    k = labeled.killed.astype(float)
    # point-biserial correlation is Pearson r against a 0/1 variable
    r = np.corrcoef(drop, k)[0, 1]
    assert 0.0 < k.mean() < 1.0
    assert r > 0


# --- predictor --------------------------------------------------------------


def test_separable_feature_is_fit_exactly():
    x = np.linspace(-1, 1, 40)[:, None]
    y = (x[:, 0] > 0.05).astype(int)
    model = pmt.train_predictor(x, y, seed=3)
    _, pred = pmt.predict_many(model, x)
    assert np.mean(pred == y) == 1.0


def test_training_is_seeded_and_monotone():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(50, 3))
    y = (X[:, 0] + 0.5 * rng.normal(size=50) > 0).astype(int)
    a, hist = pmt.train_predictor(X, y, seed=11, return_history=True)
    b = pmt.train_predictor(X, y, seed=11)
    assert np.array_equal(a.weights, b.weights) and a.bias == b.bias
    assert np.all(np.diff(hist) <= 1e-12) and a.training_meta["loss_non_increasing"]


def test_training_errors():
    X = np.zeros((19, 2))
    with pytest.raises(DataError, match="insufficient mutants"):
        pmt.train_predictor(X, [0, 1] * 9 + [0])
    with pytest.raises(DataError, match="degenerate training set"):
        pmt.train_predictor(np.zeros((25, 2)), [1] * 25)
    with pytest.raises(DimensionError):
        pmt.train_predictor(np.zeros((25, 2)), [1, 0] * 10)


def test_holdout_accuracy_beats_baseline(labeled):
    train, held = pmt.split_holdout(len(labeled.X), 0.5, 8)
    model = pmt.train_predictor(labeled.X[train], labeled.killed[train], seed=8)
    _, pred = pmt.predict_many(model, labeled.X[held])
    m = pmt.evaluate_pmt(pred, labeled.killed[held])
    assert m["accuracy"] >= m["baseline_accuracy"] + 0.05


def test_permutation_control_stays_near_baseline(labeled):
    train, held = pmt.split_holdout(len(labeled.X), 0.5, 8)
    shuffled = pmt.permuted_labels(labeled.killed, 8)
    assert sorted(shuffled) == sorted(labeled.killed)
    model = pmt.train_predictor(labeled.X[train], shuffled[train], seed=8)
    _, pred = pmt.predict_many(model, labeled.X[held])
    m = pmt.evaluate_pmt(pred, shuffled[held])
    assert abs(m["accuracy"] - m["baseline_accuracy"]) <= 0.1


def test_cross_version_prediction(labeled, other_version):
    model = pmt.train_predictor(labeled.X, labeled.killed, seed=1)
    _, pred = pmt.predict_many(model, other_version.X)
    m = pmt.evaluate_pmt(pred, other_version.killed)
    assert m["accuracy"] > m["baseline_accuracy"]


def test_zero_model_is_undecided():
    model = PmtModel(np.zeros(len(pmt.FEATURE_NAMES)), 0.0)
    f = MutantFeatures(0, tuple([1.0] + [0.0] * 13), 0.3, 0.1, 0.2, 0.05)
    assert pmt.predict_killed(model, f) == (0.5, True)


def test_probability_monotone_in_accuracy_drop():
    w = np.zeros(len(pmt.FEATURE_NAMES))
    w[-1] = 4.0
    model = PmtModel(w, -0.2)
    onehot = tuple([1.0] + [0.0] * 13)
    probs = [pmt.predict_killed(model, MutantFeatures(0, onehot, 0, 0, 0, d))[0] for d in np.linspace(-1, 1, 21)]
    assert np.all(np.diff(probs) > 0)


def test_width_mismatch():
    model = PmtModel(np.zeros(3), 0.0)
    with pytest.raises(DimensionError):
        pmt.predict_killed(model, [1.0, 2.0])
    with pytest.raises(DimensionError):
        pmt.predict_many(model, np.zeros((4, 5)))


def test_model_file_round_trip(tmp_path):
    model = PmtModel([0.5, -1.25], 0.125, {"seed": 2})
    pmt.save_model(model, tmp_path / "m.json")
    back = pmt.load_model(tmp_path / "m.json")
    assert np.array_equal(back.weights, model.weights) and back.bias == model.bias
    assert back.training_meta == {"seed": 2}


# --- evaluation -------------------------------------------------------------


def test_evaluate_examples():
    truth = [1, 0, 0, 1, 0]
    perfect = pmt.evaluate_pmt(truth, truth)
    assert perfect["accuracy"] == perfect["precision"] == perfect["recall"] == 1.0
    majority = pmt.evaluate_pmt([0] * 5, truth)
    assert majority["accuracy"] == majority["baseline_accuracy"] == 0.6
    m = pmt.evaluate_pmt([1, 1, 0, 0, 0], truth, pool_size=200, fraction_executed=0.25)
    assert (m["precision"], m["recall"]) == (0.5, 0.5)
    assert m["executions_avoided"] == 150.0


def test_evaluate_errors():
    with pytest.raises(DimensionError):
        pmt.evaluate_pmt([1, 0], [1])
    with pytest.raises(DataError):
        pmt.evaluate_pmt([], [])


def test_holdout_split():
    train, held = pmt.split_holdout(200, 0.5, 3)
    assert len(held) == 100 and set(train) | set(held) == set(range(200)) and not set(train) & set(held)
    assert np.array_equal(held, pmt.split_holdout(200, 0.5, 3)[1])
    with pytest.raises(ConfigError):
        pmt.split_holdout(10, 1.0, 0)


def test_feature_csv_header(tmp_path, labeled):
    pmt.write_feature_csv(tmp_path / "f.csv", labeled.features[:3], labeled.killed[:3])
    lines = (tmp_path / "f.csv").read_text().splitlines()
    assert lines[0] == ",".join(["mutant_id", *pmt.FEATURE_NAMES, "killed"])
    assert len(lines) == 4
