import numpy as np
import pytest

from conftest import path_graph, random_graph
from dog.clustering import ClusterAssignment, balanced_kmeans, build_neighbor_maps
from dog.datasets import make_attributed_sbm
from dog.gae import (
    EncoderInputs,
    GaeConfig,
    GaeDecoder,
    GaeEncoder,
    binarize,
    decode_inter_cluster,
    decode_intra_cluster,
    decode_node_attributes,
    encode_all,
    encode_node,
    gae_loss,
    load_gae,
    save_gae,
    train_gae,
)
from dog.graph import AttributedGraph
from dog.nn import grad_check, sigmoid

EDGE_PREFIXES = ("dec.inter", "dec.g.", "dec.intra", "dec.cluster_embed")


def small_setup(seed=0, n=10, k=3, hidden=8, latent=6):
    rng = np.random.default_rng(seed)
    g = random_graph(rng, n, 0.3, n_features=5)
    clusters = balanced_kmeans(g.attributes, k, seed=seed)
    enc = GaeEncoder.init(rng, g.n_features, hidden, latent)
    dec = GaeDecoder.init(rng, g.n_features, hidden, latent, clusters)
    return g, clusters, build_neighbor_maps(g, clusters), enc, dec


def toy_graph():
    return make_attributed_sbm(n_per_class=25, n_classes=2, n_features=20, p_in=0.2, p_out=0.02, seed=0)


def test_isolated_node_and_shapes():
    x = np.arange(12, dtype=float).reshape(4, 3)
    g = AttributedGraph(x, np.array([[0, 1], [1, 2]]), np.zeros(4, int), np.full(4, "train"))
    enc = GaeEncoder.init(np.random.default_rng(0), 3, 8, 5)
    z = encode_node(enc, g, 3)
    assert z.shape == (5,) and np.all(np.isfinite(z))
    assert np.allclose(encode_all(enc, EncoderInputs.from_graph(g), chunk=3)[3], z)


def test_positional_embedding_breaks_ties():
    g = path_graph(3)
    g.attributes[2] = g.attributes[0]
    enc = GaeEncoder.init(np.random.default_rng(1), g.n_features, 8, 4)
    with_pos = encode_all(enc, EncoderInputs.from_graph(g, use_pos=True))
    without = encode_all(enc, EncoderInputs.from_graph(g, use_pos=False))
    assert not np.allclose(with_pos[0], with_pos[2])
    assert np.allclose(without[0], without[2])


def test_permutation_equivariance_without_positions(rng):
    g = random_graph(rng, 12, 0.3, n_features=4)
    perm = rng.permutation(12)
    inv = np.argsort(perm)
    h = AttributedGraph(g.attributes[perm], inv[g.edges], g.labels[perm], g.split[perm])
    enc = GaeEncoder.init(np.random.default_rng(2), 4, 8, 4)
    z = encode_all(enc, EncoderInputs.from_graph(g, use_pos=False))
    zp = encode_all(enc, EncoderInputs.from_graph(h, use_pos=False))
    assert np.allclose(zp, z[perm], atol=1e-12)


def test_decoders_ranges_and_shapes():
    g, clusters, nm, enc, dec = small_setup()
    z = np.zeros(6)
    x_hat = decode_node_attributes(dec, z)
    assert x_hat.shape == (g.n_features,) and np.all(np.isfinite(x_hat))
    zs = np.random.default_rng(0).normal(size=(7, 6))
    inter = decode_inter_cluster(dec, zs)
    assert inter.shape == (7, clusters.k) and np.all((inter > 0) & (inter < 1))
    rows = decode_intra_cluster(dec, zs, 1)
    assert rows.shape == (7, clusters.capacity) and np.all((rows > 0) & (rows < 1))
    assert np.allclose(decode_intra_cluster(dec, zs[2], 1), rows[2])
    with pytest.raises(ValueError):
        decode_intra_cluster(dec, z, clusters.k)


def test_binarize_threshold():
    assert binarize(np.array([0.7, 0.3, 0.5])).tolist() == [True, False, False]


def test_intra_rows_depend_on_cluster():
    _, _, _, _, dec = small_setup()
    z = np.ones(6)
    assert not np.allclose(decode_intra_cluster(dec, z, 0), decode_intra_cluster(dec, z, 1))


def test_loss_single_node_by_hand():
    g, clusters, nm, enc, dec = small_setup(seed=3)
    inp = EncoderInputs.from_graph(g)
    i = int(np.flatnonzero(nm.inter.any(1) & ~nm.inter.all(1))[0])
    ks = np.flatnonzero(nm.inter[i])
    k_neg = int(np.flatnonzero(~nm.inter[i])[0])
    dense = nm.dense_intra()
    owner = np.zeros(len(ks) + 1, dtype=np.int64)
    clus = np.append(ks, k_neg)
    target = dense[i, clus].astype(float)
    loss, _, parts = gae_loss([i], enc, dec, inp, nm, intra_pairs=(owner, clus, target))

    z = encode_node(enc, g, i)
    expected = np.sum((decode_node_attributes(dec, z) - g.attributes[i]) ** 2)
    expected += np.sum((decode_inter_cluster(dec, z) - nm.inter[i]) ** 2)
    for k in clus:
        row = decode_intra_cluster(dec, z, int(k))[: clusters.sizes[k]]
        expected += np.sum((row - dense[i, k, : clusters.sizes[k]]) ** 2)
    assert loss == pytest.approx(expected, rel=1e-12)
    assert loss >= 0 and set(parts) == {"node", "inter", "intra"}


def test_loss_is_zero_for_perfect_reconstruction():
    g, clusters, nm, enc, dec = small_setup(seed=4)
    inp = EncoderInputs.from_graph(g)
    g.attributes[:] = 0.0
    for layer in dec.attr:
        layer.weight[:] = 0.0
        layer.bias[:] = 0.0
    i = 0
    z = encode_node(enc, g, i)
    # Saturate the inter layer so it reproduces the true row up to rounding.
    dec.inter.weight[:] = 0.0
    dec.inter.bias[:] = np.where(nm.inter[i], 800.0, -800.0)
    loss, _, parts = gae_loss([i], enc, dec, inp, nm, intra_pairs=(np.zeros(0, int), np.zeros(0, int), np.zeros((0, clusters.capacity))))
    assert loss == 0.0
    assert np.all(np.isfinite(z))


@pytest.mark.parametrize("seed", range(4))
def test_loss_gradient(seed):
    g, clusters, nm, enc, dec = small_setup(seed=seed)
    inp = EncoderInputs.from_graph(g)
    params = {**enc.params(), **dec.params()}
    batch = np.arange(g.n_nodes)

    def fn():
        loss, grads, _ = gae_loss(batch, enc, dec, inp, nm, n_neg=2, rng=np.random.default_rng(7))
        return loss, grads

    assert grad_check(fn, params) < 1e-4


def test_phase_one_has_no_edge_gradients():
    g, clusters, nm, enc, dec = small_setup(seed=5)
    _, grads, parts = gae_loss(np.arange(g.n_nodes), enc, dec, EncoderInputs.from_graph(g), nm, edges=False)
    for name, v in grads.items():
        if name.startswith(EDGE_PREFIXES):
            assert not np.any(v)
    assert parts["inter"] == parts["intra"] == 0.0
    g2 = toy_graph()
    clusters = balanced_kmeans(g2.attributes, 5, seed=0)
    cfg = GaeConfig(hidden=16, latent_dim=8, phase1_epochs=3, phase2_epochs=0, batch_size=16)
    init = train_gae(g2, clusters, GaeConfig(**{**cfg.__dict__, "phase1_epochs": 0}))
    trained = train_gae(g2, clusters, cfg)
    for name, v in init.decoder.edge_params().items():
        assert np.array_equal(trained.decoder.edge_params()[name], v)
    assert not np.array_equal(trained.decoder.attr[0].weight, init.decoder.attr[0].weight)


def test_zero_epochs_and_bitwise_determinism(tmp_path):
    g = toy_graph()
    clusters = balanced_kmeans(g.attributes, 5, seed=0)
    cfg = GaeConfig(hidden=16, latent_dim=8, phase1_epochs=0, phase2_epochs=0)
    m = train_gae(g, clusters, cfg)
    rng = np.random.default_rng(cfg.seed)
    enc = GaeEncoder.init(rng, g.n_features, 16, 8)
    for k, v in enc.params().items():
        assert np.array_equal(m.encoder.params()[k], v)
    for k, v in m.params().items():
        assert np.array_equal(m.ema[k], v)

    cfg = GaeConfig(hidden=16, latent_dim=8, phase1_epochs=2, phase2_epochs=2, batch_size=16)
    paths = []
    for run in range(2):
        path = tmp_path / f"gae{run}.ckpt"
        save_gae(str(path), train_gae(g, clusters, cfg))
        paths.append(path)
    assert paths[0].read_bytes() == paths[1].read_bytes()
    back = load_gae(str(paths[0]))
    ref = train_gae(g, clusters, cfg)
    for k, v in ref.params().items():
        assert np.array_equal(back.params()[k], v)
        assert np.array_equal(back.ema[k], ref.ema[k])
    z = encode_all(back.with_ema().encoder, EncoderInputs.from_graph(g))
    assert np.all(np.isfinite(z))


def test_non_finite_loss_aborts():
    g = toy_graph()
    g.attributes[0, 0] = np.nan
    clusters = ClusterAssignment(5, 10, np.repeat(np.arange(5), 10))
    with pytest.raises(FloatingPointError):
        train_gae(g, clusters, GaeConfig(hidden=8, latent_dim=4, phase1_epochs=1, phase2_epochs=0))


# Toy training run shared by the targets below: 50 nodes, 2 classes, K = 5,
# 200 + 200 epochs, minibatches of 10 so each epoch takes several steps.
@pytest.fixture(scope="module")
def toy_run():
    g = toy_graph()
    clusters = balanced_kmeans(g.attributes, 5, seed=0)
    nm = build_neighbor_maps(g, clusters)
    cfg = GaeConfig(hidden=64, latent_dim=16, phase1_epochs=200, phase2_epochs=200, batch_size=10)
    init = train_gae(g, clusters, GaeConfig(**{**cfg.__dict__, "phase1_epochs": 0, "phase2_epochs": 0}))
    trained = train_gae(g, clusters, cfg)
    inp = EncoderInputs.from_graph(g)

    def full_loss(model):
        # every cluster is scored, so the value does not depend on sampling
        _, _, parts = gae_loss(np.arange(g.n_nodes), model.encoder, model.decoder, inp, nm, n_neg=clusters.k, rng=np.random.default_rng(0))
        return parts

    return g, clusters, nm, inp, init, trained, full_loss


def test_toy_attribute_error_drops_tenfold(toy_run):
    g, clusters, nm, inp, init, trained, full_loss = toy_run
    before, after = full_loss(init)["node"], full_loss(trained)["node"]
    assert after <= before / 10


def test_toy_inter_rows_recovered(toy_run):
    g, clusters, nm, inp, init, trained, full_loss = toy_run
    z = encode_all(trained.encoder, inp)
    exact = np.all(binarize(decode_inter_cluster(trained.decoder, z)) == nm.inter, axis=1)
    assert exact.mean() >= 0.9


def additive_intra_floor(nm, clusters, iters=20000):
    """Smallest masked squared error reachable by any intra decoder whose logit
    for (node i, cluster k, slot j) splits as a[i, j] + b[k, j], which is what a
    single sigmoid layer over [z_i, g(k)] computes.  Fitted with free a, b."""
    m = nm.dense_intra().astype(float)
    mask = (np.arange(clusters.capacity)[None, :] < clusters.sizes[:, None])[None]
    n = m.shape[0]
    a = np.zeros((n, 1, m.shape[2]))
    b = np.zeros((1, m.shape[1], m.shape[2]))
    for _ in range(iters):
        p = sigmoid(a + b)
        d = 2 * (p - m) * p * (1 - p) * mask
        a -= d.sum(1, keepdims=True)
        b -= 0.1 * d.sum(0, keepdims=True)
    return float((((sigmoid(a + b) - m) * mask) ** 2).sum()) / n


def test_toy_intra_error_reaches_the_single_layer_floor(toy_run):
    g, clusters, nm, inp, init, trained, full_loss = toy_run
    floor = additive_intra_floor(nm, clusters)
    intra = full_loss(trained)["intra"]
    assert intra >= floor * 0.99
    assert intra <= floor * 1.25


@pytest.mark.xfail(
    strict=True,
    reason="intra error cannot drop below the additive floor (about 3.2 per node here) "
    "while the initial total is about 19.3, so a tenfold drop is out of reach",
)
def test_toy_full_loss_drops_tenfold(toy_run):
    g, clusters, nm, inp, init, trained, full_loss = toy_run
    before = sum(full_loss(init).values())
    after = sum(full_loss(trained).values())
    assert after < 0.1 * before


def test_toy_decoded_attributes_stay_node_specific(toy_run):
    # edge terms dominate phase 2; the attribute decoder must keep separating nodes
    g, clusters, nm, inp, init, trained, full_loss = toy_run
    x_hat = decode_node_attributes(trained.decoder, encode_all(trained.encoder, inp))
    assert x_hat.std(0).mean() >= 0.5 * g.attributes.std(0).mean()
