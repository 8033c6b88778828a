import io

import numpy as np
import pytest

from aeromag.classifier import (
    MlpModel, TrainingConfig, build_features, confusion_csv, confusion_matrix, gradient_check,
    init_model, loss_and_gradient, make_blobs, predict, si_labels, train_mlp,
)
from aeromag.errors import EmptySolutionSet, GeorefMismatch, LabelOutOfRange, ShapeMismatch, TooFewPoints
from aeromag.euler import SolutionSet, euler_sweep
from aeromag.geodata import GridGeoref
from aeromag.synthetics import HomogeneousSource, synth_homogeneous


def philox(seed):
    return np.random.Generator(np.random.Philox(key=seed))


def random_model(seed, hidden):
    r = philox(seed)
    m = init_model(r, 6, hidden, 6, feature_mean=r.normal(size=6), feature_std=r.uniform(0.5, 2, 6))
    m.b1 = r.normal(scale=0.1, size=hidden)
    m.b2 = r.normal(scale=0.1, size=6)
    return m, r


# -- gradients -------------------------------------------------------------------

def test_gradient_check_small():
    m, r = random_model(1, 5)
    X = r.normal(size=(16, 6))
    y = r.integers(0, 6, 16)
    assert gradient_check(m, X, y) <= 1e-5


@pytest.mark.slow
def test_gradient_check_full_size():
    m, r = random_model(2, 100)
    X = r.normal(size=(32, 6))
    y = r.integers(0, 6, 32)
    assert gradient_check(m, X, y) <= 1e-5


def test_duplicated_samples_double_gradient():
    m, r = random_model(3, 5)
    X = r.normal(size=(1, 6))
    y = np.array([4])
    l1, g1 = loss_and_gradient(m, X, y)
    l2, g2 = loss_and_gradient(m, np.vstack([X, X]), np.array([4, 4]))
    assert np.array_equal(g2, 2 * g1)
    assert l2 == 2 * l1


# -- prediction ------------------------------------------------------------------

def test_zero_output_layer_uniform():
    m, r = random_model(4, 100)
    m.w2[:] = 0.0
    m.b2[:] = 0.0
    p = predict(m, r.normal(size=(10, 6)))
    assert np.all(p == 1.0 / 6.0)


def test_rows_sum_to_one_and_pure():
    m, r = random_model(5, 100)
    X = r.normal(scale=50.0, size=(200, 6))
    X[7] = X[3]
    p = predict(m, X)
    assert np.abs(p.sum(axis=1) - 1.0).max() <= 1e-12
    assert np.array_equal(p[7], p[3])
    with pytest.raises(ShapeMismatch):
        predict(m, np.zeros((3, 5)))


# -- training --------------------------------------------------------------------

@pytest.fixture(scope="module")
def blobs():
    return make_blobs(100, seed=11)


@pytest.mark.parametrize("optimizer", ["scaled_conjugate_gradient", "gradient_descent_momentum"])
def test_blobs_separable(blobs, optimizer):
    X, y = blobs
    cfg = TrainingConfig(optimizer=optimizer, max_epochs=200, seed=3)
    model, hist = train_mlp(X, y, cfg)
    assert hist.validation_accuracy >= 0.95
    Xh, yh = make_blobs(50, seed=99)
    assert np.mean(np.argmax(predict(model, Xh), axis=1) == yh) >= 0.95
    assert len(hist.train_loss) == len(hist.validation_loss) >= 2


@pytest.mark.parametrize("optimizer", ["scaled_conjugate_gradient", "gradient_descent_momentum"])
def test_training_bit_reproducible(blobs, optimizer):
    X, y = blobs
    cfg = TrainingConfig(optimizer=optimizer, max_epochs=40, seed=21)
    a, ha = train_mlp(X, y, cfg)
    b, hb = train_mlp(X, y, cfg)
    assert np.array_equal(a.flat(), b.flat())
    assert ha.train_loss == hb.train_loss
    c, _ = train_mlp(X, y, TrainingConfig(optimizer=optimizer, max_epochs=40, seed=22))
    assert not np.array_equal(a.flat(), c.flat())


def test_gd_loss_monotone(blobs):
    X, y = blobs
    _, hist = train_mlp(X, y, TrainingConfig(optimizer="gradient_descent_momentum", max_epochs=150,
                                             learning_rate=0.5, seed=5))
    d = np.diff(hist.train_loss)
    assert np.all(d <= 1e-6)


def test_affine_feature_rescale_keeps_predictions(blobs):
    X, y = blobs
    cfg = TrainingConfig(max_epochs=200, seed=8)
    m1, _ = train_mlp(X, y, cfg)
    X2 = X.copy()
    X2[:, 2] = 1000.0 * X2[:, 2] - 42.0
    m2, _ = train_mlp(X2, y, cfg)
    assert np.array_equal(np.argmax(predict(m1, X), axis=1), np.argmax(predict(m2, X2), axis=1))


def test_constant_feature_flagged(blobs, caplog):
    X, y = blobs
    X = X.copy()
    X[:, 4] = 7.0
    m, hist = train_mlp(X, y, TrainingConfig(max_epochs=30, seed=1))
    assert m.constant_features == [4]
    assert m.feature_std[4] == 1.0
    assert "constant feature" in caplog.text
    assert np.all(np.isfinite(m.flat()))


def test_training_errors(blobs):
    X, y = blobs
    with pytest.raises(LabelOutOfRange):
        train_mlp(X, np.where(y == 5, 6, y))
    with pytest.raises(LabelOutOfRange):
        train_mlp(X, y - 0.5)
    with pytest.raises(ShapeMismatch):
        train_mlp(X[:-1], y)
    with pytest.raises(TooFewPoints):
        train_mlp(X[:11], y[:11])
    with pytest.raises(ValueError):
        TrainingConfig(optimizer="adam")
    with pytest.raises(ValueError):
        TrainingConfig(validation_fraction=1.0)
    with pytest.raises(ValueError):
        TrainingConfig(max_epochs=0)


def test_model_json_roundtrip(tmp_path):
    m, _ = random_model(6, 7)
    text = m.to_json(tmp_path / "m.json")
    for src in (text, str(tmp_path / "m.json"), io.StringIO(text)):
        back = MlpModel.from_json(src)
        assert np.array_equal(back.flat(), m.flat())
        assert np.array_equal(back.feature_std, m.feature_std)


# -- features ---------------------------------------------------------------------

def two_source_sweep():
    g = GridGeoref(0.0, 0.0, 100.0, 96, 96)
    srcs = [HomogeneousSource(*g.cell_center(48, 28), 300.0, 3e5, 1.0),
            HomogeneousSource(*g.cell_center(48, 68), 800.0, 1e3 * 800.0**3, 3.0)]
    parts = [synth_homogeneous(s, g, gradients=True) for s in srcs]
    grids = [a.with_values(a.values + b.values) for a, b in zip(*parts)]
    return srcs, grids, euler_sweep(*grids)


def test_build_features_shapes_and_labels():
    srcs, (T, Tx, Ty, Tz), sols = two_source_sweep()
    F, labels = build_features(sols, Tx, Ty)
    assert F.shape == (len(sols), 6) and np.all(np.isfinite(F))
    assert np.all((F[:, 0] >= 0) & (F[:, 0] <= 1) & (F[:, 1] >= 0) & (F[:, 1] <= 1))
    r, c = sols.window_row[0], sols.window_col[0]
    assert F[0, 5] == np.hypot(Tx.values[r, c], Ty.values[r, c])
    one, lab = build_features(sols.subset([0]), Tx, Ty)
    assert one.shape == (1, 6) and lab[0] in range(6)
    # class counts equal per-index solution counts of the sweep
    for k, s in enumerate((0.5, 1.0, 1.5, 2.0, 2.5, 3.0)):
        assert np.sum(labels == k) == np.sum(sols.si == s)
    for s in srcs:
        near = np.hypot(sols.x0 - s.x0, sols.y0 - s.y0) <= 1000.0
        assert np.bincount(labels[near], minlength=6).argmax() == si_labels([s.si])[0]


def test_si_label_ordering():
    assert si_labels([0.5, 3.0, 1.5]).tolist() == [0, 5, 2]
    with pytest.raises(LabelOutOfRange):
        si_labels([0.7])


def test_build_features_errors():
    _, (T, Tx, Ty, Tz), sols = two_source_sweep()
    with pytest.raises(EmptySolutionSet):
        build_features(SolutionSet.empty(), Tx, Ty)
    other = GridGeoref(5.0, 0.0, 100.0, 96, 96)
    from aeromag.geodata import Grid
    with pytest.raises(GeorefMismatch):
        build_features(sols, Grid(other, Tx.values), Grid(other, Ty.values))
    with pytest.raises(GeorefMismatch):
        build_features(sols, Tx, Grid(other, Ty.values))


def test_confusion():
    m = confusion_matrix([0, 0, 1, 5, 5], [0, 1, 1, 5, 0])
    assert m.sum() == 5 and m[0, 0] == 1 and m[0, 1] == 1 and m[5, 0] == 1
    csv = confusion_csv(m)
    lines = csv.splitlines()
    assert lines[0] == "true\\predicted,0.5,1,1.5,2,2.5,3"
    assert lines[1] == "0.5,1,1,0,0,0,0"
