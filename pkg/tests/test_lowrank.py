import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import path_graph
from dog.datasets import make_attributed_sbm
from dog.graph import AttributedGraph
from dog.lowrank import (
    DEFAULT_BETA_GRID,
    DEFAULT_GAMMA_GRID,
    DEFAULT_TAU_GRID,
    CvBudget,
    GcnModel,
    GcnTrainConfig,
    LowRankConfig,
    cross_validate,
    eigen_projection,
    evaluate_accuracy,
    feature_tnn,
    gcn_forward,
    gram_matrix,
    linear_gd_oracle,
    normalized_adjacency,
    one_hot_training_labels,
    rank_from_ratio,
    row_normalized,
    softmax_xent,
    train_node_classifier,
    truncated_nuclear_norm,
)


def direct_spectrum(h):
    lam = np.linalg.eigvalsh(h @ h.T)[::-1]
    return np.maximum(lam, 0.0)


def test_gram_examples():
    assert np.allclose(gram_matrix(np.eye(3)).eigenvalues, [1, 1, 1])
    assert np.allclose(gram_matrix(np.diag([2.0, 1.0])).eigenvalues, [4, 1])
    assert np.allclose(gram_matrix(np.diag([1.0, 2.0])).eigenvalues, [4, 1])


@given(st.integers(0, 2**31 - 1), st.integers(2, 100), st.integers(1, 12))
@settings(max_examples=40)
def test_gram_companion_matches_direct(seed, n, d):
    h = np.random.default_rng(seed).normal(size=(n, d))
    spectrum = gram_matrix(h)
    lam = direct_spectrum(h)
    m = min(n, d)
    assert np.allclose(spectrum.eigenvalues[:m], lam[:m], atol=1e-8 * max(1.0, lam[0]))
    assert np.all(spectrum.eigenvalues >= -1e-10)
    u = spectrum.eigenvectors
    assert u.shape[1] <= m
    assert np.allclose(u.T @ u, np.eye(u.shape[1]), atol=1e-8)
    k = h @ h.T
    assert np.allclose(k @ u, u * spectrum.eigenvalues[: u.shape[1]], atol=1e-8 * max(1.0, lam[0]))


def test_tnn_examples():
    h = np.diag([2.0, 1.0])
    value, _ = truncated_nuclear_norm(h, 1)
    assert value == pytest.approx(1.0)
    h = np.random.default_rng(0).normal(size=(7, 4))
    assert truncated_nuclear_norm(h, 0)[0] == pytest.approx(np.sum(h**2))
    assert truncated_nuclear_norm(h.T, 0)[0] == pytest.approx(np.sum(h**2))
    for bad in (-1, 4):
        with pytest.raises(ValueError):
            truncated_nuclear_norm(h, bad)


@pytest.mark.parametrize("shape", [(20, 6), (6, 20), (9, 9)])
def test_tnn_gradient_finite_differences(shape):
    rng = np.random.default_rng(1)
    checked = 0
    while checked < 5:
        h = rng.normal(size=shape)
        r0 = int(rng.integers(0, min(shape)))
        lam = direct_spectrum(h)
        if r0 > 0 and lam[r0 - 1] - lam[r0] <= 0.1:
            continue
        value, grad = truncated_nuclear_norm(h, r0)
        num = np.zeros_like(h)
        eps = 1e-6
        for idx in np.ndindex(*h.shape):
            hp, hm = h.copy(), h.copy()
            hp[idx] += eps
            hm[idx] -= eps
            num[idx] = (truncated_nuclear_norm(hp, r0)[0] - truncated_nuclear_norm(hm, r0)[0]) / (2 * eps)
        assert np.max(np.abs(num - grad)) / np.max(np.abs(num)) < 1e-4
        checked += 1


@given(st.integers(0, 2**31 - 1), st.integers(2, 15), st.integers(2, 15), st.integers(1, 6))
@settings(max_examples=40)
def test_tnn_monotone_and_rank_characterization(seed, n, d, rank):
    rng = np.random.default_rng(seed)
    rank = min(rank, n, d)
    h = rng.normal(size=(n, rank)) @ rng.normal(size=(rank, d))
    values = [truncated_nuclear_norm(h, r0)[0] for r0 in range(min(n, d))]
    assert all(a >= b - 1e-9 for a, b in zip(values, values[1:]))
    scale = max(1.0, values[0])
    for r0, v in enumerate(values):
        assert (v <= 1e-9 * scale) == (r0 >= rank)


def test_rank_from_ratio():
    assert rank_from_ratio(0.2, 2708, 64) == 13
    assert rank_from_ratio(0.9, 3, 3) == 2
    with pytest.raises(ValueError):
        rank_from_ratio(1.0, 10, 10)
    with pytest.raises(ValueError):
        LowRankConfig(tau=-1.0)
    with pytest.raises(ValueError):
        LowRankConfig(features="test")


def identity_model(d):
    return GcnModel(np.eye(d), np.eye(d), np.eye(d))


def test_gcn_lone_self_looped_node():
    x = np.array([[1.0, -2.0, 3.0]])
    g = AttributedGraph(x, np.zeros((0, 2), np.int64), np.array([0]), np.array(["train"]))
    rng = np.random.default_rng(0)
    m = GcnModel(rng.normal(size=(3, 4)), rng.normal(size=(4, 2)), rng.normal(size=(2, 3)))
    h, logits, _ = gcn_forward(m, g)
    expected = np.maximum(np.maximum(x @ m.w1, 0) @ m.w2, 0)
    assert np.allclose(h, expected)
    assert np.allclose(logits, expected @ m.w_cls)
    h, _, _ = gcn_forward(identity_model(3), g)
    assert np.allclose(h, np.maximum(x, 0))


def test_gcn_path_graph_normalization_by_hand():
    g = path_graph(3, n_features=2)
    a = normalized_adjacency(g).toarray()
    # degrees with self loops are (2, 3, 2)
    s2, s3 = 1 / np.sqrt(2), 1 / np.sqrt(3)
    expected = np.array([[1 / 2, s2 * s3, 0], [s2 * s3, 1 / 3, s2 * s3], [0, s2 * s3, 1 / 2]])
    assert np.allclose(a, expected)
    g.attributes[:] = np.abs(g.attributes)
    h, logits, _ = gcn_forward(identity_model(2), g)
    assert np.allclose(h, expected @ expected @ g.attributes)
    assert logits.shape == (3, 2)


def test_row_normalized_examples():
    x = np.array([[1.0, 3.0], [0.0, 0.0], [-1.0, 1.0]])
    assert np.allclose(row_normalized(x), [[0.25, 0.75], [0.0, 0.0], [-0.5, 0.5]])


def test_row_normalize_flag_rescales_inputs():
    x = np.array([[2.0, 0.0, 6.0]])
    g = AttributedGraph(x, np.zeros((0, 2), np.int64), np.array([0]), np.array(["train"]))
    rng = np.random.default_rng(1)
    w = rng.normal(size=(3, 4)), rng.normal(size=(4, 2)), rng.normal(size=(2, 3))
    h_raw, _, _ = gcn_forward(GcnModel(*w), g)
    h_norm, _, _ = gcn_forward(GcnModel(*w, row_normalize=True), g)
    assert np.allclose(h_norm, h_raw / 8.0)


def test_training_records_row_normalization():
    g = make_attributed_sbm(n_per_class=10, n_classes=2, n_features=8, seed=0)
    on = train_node_classifier(g, None, GcnTrainConfig(epochs=2)).model
    off = train_node_classifier(g, None, GcnTrainConfig(epochs=2, row_normalize=False)).model
    assert on.row_normalize and not off.row_normalize


def test_softmax_xent_matches_direct():
    rng = np.random.default_rng(0)
    logits, labels = rng.normal(size=(5, 3)) * 50, np.array([0, 2, 1, 1, 0])
    loss, grad = softmax_xent(logits, labels)
    shifted = logits - logits.max(1, keepdims=True)
    p = np.exp(shifted) / np.exp(shifted).sum(1, keepdims=True)
    assert loss == pytest.approx(-np.mean(np.log(p[np.arange(5), labels])))
    onehot = np.eye(3)[labels]
    assert np.allclose(grad, (p - onehot) / 5)


def test_accuracy_examples():
    x = np.eye(4)
    labels = np.array([0, 1, 2, 3])
    g = AttributedGraph(x, np.zeros((0, 2), np.int64), labels, np.full(4, "test"))
    assert evaluate_accuracy(identity_model(4), g) == 1.0
    zero = GcnModel(np.eye(4), np.eye(4), np.zeros((4, 4)))
    g2 = AttributedGraph(x, np.zeros((0, 2), np.int64), np.array([0, 0, 1, 2]), np.full(4, "test"))
    assert evaluate_accuracy(zero, g2) == 0.5
    with pytest.raises(ValueError):
        evaluate_accuracy(zero, g2, "val")


@pytest.fixture(scope="module")
def sbm():
    return make_attributed_sbm(n_per_class=40, n_classes=3, n_features=30, seed=0)


def test_tau_zero_equals_plain_training(sbm):
    tc = GcnTrainConfig(epochs=30, seed=3)
    plain = train_node_classifier(sbm, None, tc)
    zero = train_node_classifier(sbm, LowRankConfig(tau=0.0, gamma=0.2, eta=tc.lr), tc)
    for k, v in plain.model.params().items():
        assert v.tobytes() == zero.model.params()[k].tobytes()
    assert [r["val_acc"] for r in plain.history] == [r["val_acc"] for r in zero.history]


def test_eval_features_match_train_features_without_dropout(sbm):
    tc = GcnTrainConfig(epochs=20, seed=1, dropout=0.0)
    a = train_node_classifier(sbm, LowRankConfig(tau=0.1, gamma=0.2), tc).model
    b = train_node_classifier(sbm, LowRankConfig(tau=0.1, gamma=0.2, features="eval"), tc).model
    for k, v in a.params().items():
        assert np.allclose(v, b.params()[k], rtol=1e-9, atol=1e-12)


def test_eval_features_regularizer_shrinks_trailing_spectrum(sbm):
    tc = GcnTrainConfig(epochs=100, seed=0, select_on_val=False)
    cfg = LowRankConfig(tau=0.1, gamma=0.2, features="eval")
    r0 = rank_from_ratio(cfg.gamma, sbm.n_nodes, tc.feat_dim)
    plain = train_node_classifier(sbm, None, tc)
    reg = train_node_classifier(sbm, cfg, tc)
    assert feature_tnn(reg.model, sbm, r0) < feature_tnn(plain.model, sbm, r0)


def test_regularizer_shrinks_trailing_spectrum(sbm):
    tc = GcnTrainConfig(epochs=100, seed=0, select_on_val=False)
    cfg = LowRankConfig(tau=0.1, gamma=0.2)
    r0 = rank_from_ratio(cfg.gamma, sbm.n_nodes, tc.feat_dim)
    plain = train_node_classifier(sbm, None, tc)
    reg = train_node_classifier(sbm, cfg, tc)
    assert reg.r0 == r0
    assert feature_tnn(reg.model, sbm, r0) < feature_tnn(plain.model, sbm, r0)
    assert evaluate_accuracy(reg.model, sbm) > 0.8
    assert np.isfinite(reg.history[-1]["tnn"]) and np.isnan(plain.history[-1]["tnn"])


def test_training_errors():
    g = path_graph(3)
    g.split[:] = "test"
    with pytest.raises(ValueError):
        train_node_classifier(g, None, GcnTrainConfig(epochs=1))


def random_oracle_instance(rng, n=10, d=3, c=2, m=6):
    h = rng.normal(size=(n, d))
    y = np.eye(c)[rng.integers(0, c, n)]
    labeled = np.sort(rng.choice(n, m, replace=False))
    eta = 0.5 / np.linalg.norm(h, 2) ** 2
    return h, y, labeled, eta


def test_gd_oracle_examples():
    rng = np.random.default_rng(0)
    h, y, labeled, _ = random_oracle_instance(rng)
    it, closed = linear_gd_oracle(h, y, labeled, 0.01, 0)
    assert np.array_equal(it, -y[labeled]) and np.array_equal(closed, -y[labeled])
    it, closed = linear_gd_oracle(h, y, labeled, 0.01, 50)
    assert np.linalg.norm(it - closed) < 1e-8
    with pytest.raises(ValueError):
        linear_gd_oracle(h, y, labeled, 1.01 / np.linalg.norm(h, 2) ** 2, 5)


@given(st.integers(0, 2**31 - 1), st.integers(0, 200))
@settings(max_examples=50)
def test_gd_oracle_agreement(seed, t):
    rng = np.random.default_rng(seed)
    h, y, labeled, eta = random_oracle_instance(rng, n=int(rng.integers(4, 20)), d=int(rng.integers(1, 6)), m=3)
    it, closed = linear_gd_oracle(h, y, labeled, eta, t)
    assert np.linalg.norm(it - closed) < 1e-8


def test_gd_residual_decays_when_kernel_full_rank():
    rng = np.random.default_rng(4)
    h, y, labeled, eta = random_oracle_instance(rng, n=10, d=8, m=5)
    norms = [np.linalg.norm(linear_gd_oracle(h, y, labeled, eta, t)[0]) for t in range(0, 200, 10)]
    assert all(b < a for a, b in zip(norms, norms[1:]))


def test_eigen_projection_aligned_and_errors():
    rng = np.random.default_rng(0)
    h = rng.normal(size=(12, 4))
    spectrum = gram_matrix(h)
    y = np.stack([spectrum.eigenvectors[:, 0] * 3.0, np.abs(rng.normal(size=12))], axis=1)
    p, curve = eigen_projection(spectrum, y)
    assert abs(p[0, 0]) == pytest.approx(1.0)
    assert np.sqrt(np.cumsum(p[0] ** 2))[0] == pytest.approx(1.0)
    assert p.shape == (2, 4)
    with pytest.raises(ValueError):
        eigen_projection(spectrum, np.zeros((12, 2)))


@given(st.integers(0, 2**31 - 1), st.integers(5, 40), st.integers(1, 10), st.integers(1, 5))
@settings(max_examples=40)
def test_full_rank_concentration_is_one(seed, n, d, c):
    rng = np.random.default_rng(seed)
    spectrum = gram_matrix(rng.normal(size=(n, d)))
    y = np.eye(c)[rng.integers(0, c, n)]
    y[:c] = np.eye(c)  # every class keeps at least one node
    _, curve = eigen_projection(spectrum, y)
    assert abs(curve[-1] - 1.0) < 1e-8
    assert np.all(np.diff(curve) >= -1e-12)


def test_one_hot_training_labels():
    g = path_graph(3)
    g.labels[:] = [2, 0, 1]
    g.split[:] = ["train", "val", "train"]
    y = one_hot_training_labels(g, 3)
    assert y.tolist() == [[0, 0, 1], [0, 0, 0], [0, 1, 0]]


def test_default_grids():
    assert DEFAULT_GAMMA_GRID == (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
    assert DEFAULT_TAU_GRID == (0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4, 0.45, 0.5)
    assert DEFAULT_BETA_GRID == tuple(range(1, 11))


def test_cv_single_point_grid(sbm):
    out = cross_validate(sbm, {"gamma": (0.3,), "tau": (0.2,)}, CvBudget(folds=2, data_fraction=1.0), GcnTrainConfig(epochs=10))
    assert (out["gamma"], out["tau"], out["beta"]) == (0.3, 0.2, 0)
    assert list(out["scores"]) == [(0, 0.2, 0.3)]


def test_cv_beta_needs_augmenter(sbm):
    with pytest.raises(ValueError):
        cross_validate(sbm, {"gamma": (0.3,), "tau": (0.2,), "beta": (1, 2)})
    with pytest.raises(ValueError):
        cross_validate(sbm, {"gamma": (), "tau": (0.2,)})


def test_cv_rejects_fold_without_a_class():
    g = make_attributed_sbm(n_per_class=20, n_classes=2, n_train_per_class=2, seed=0)
    with pytest.raises(ValueError):
        cross_validate(g, {"gamma": (0.2,), "tau": (0.1,)}, CvBudget(folds=5, data_fraction=1.0))


def test_cv_beta_path_uses_augmented_graph(sbm):
    seen = []

    def augment(beta):
        seen.append(beta)
        return sbm

    out = cross_validate(sbm, {"gamma": (0.2,), "tau": (0.1,), "beta": (2, 1)}, CvBudget(folds=2, data_fraction=1.0), GcnTrainConfig(epochs=5), augment)
    assert seen == [1, 2]
    assert out["beta"] in (1, 2)


@pytest.mark.parametrize("seed", range(5))
def test_cv_prefers_no_regularization_on_clean_toy(seed):
    g = make_attributed_sbm(n_per_class=40, n_classes=2, n_features=20, p_in=0.15, p_out=0.0, signal=1.5, n_train_per_class=25, seed=seed)
    out = cross_validate(g, {"gamma": (0.2,), "tau": (0.0, 0.5, 5.0)}, CvBudget(folds=5, data_fraction=1.0, seed=seed), GcnTrainConfig(epochs=50, seed=seed))
    assert out["tau"] == 0.0
