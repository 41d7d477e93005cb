import subprocess
import sys

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from casdc.dataset import Dataset, generate_synthetic, make_partition, split_dataset
from casdc.embedding import (
    EmbeddingModel,
    Triplet,
    TripletLossConfig,
    embed,
    mine_triplets,
    train_embedding,
    triplet_loss,
    triplet_loss_grad,
)
from casdc.errors import (
    ConfigurationError,
    EmptyTripletWarning,
    MiningError,
    ShapeMismatchError,
    TrainingError,
)
from casdc.dataset import Role
from casdc.networks import parameter_vector
from casdc.training import TrainConfig

from oracles import (
    central_difference,
    enumerate_hardest_positive,
    enumerate_triplets,
    rel_error,
    sq,
    triplet_loss_loop,
)


def _as_set(triplets):
    return {(t.anchor_idx, t.positive_idx, t.negative_idx) for t in triplets}


# ---------------------------------------------------------------- model


def test_zero_final_layer_gives_zero_embeddings():
    g = EmbeddingModel((5,), 8, hidden=16, seed=0)
    with torch.no_grad():
        g.backbone[-1].weight.zero_()
        g.backbone[-1].bias.zero_()
    x = np.random.default_rng(0).standard_normal((7, 5))
    np.testing.assert_array_equal(embed(g, x), np.zeros((7, 8)))


@pytest.mark.parametrize("normalize", [False, True])
def test_batch_matches_single_embeddings(normalize):
    g = EmbeddingModel((5,), 8, hidden=16, seed=1, normalize=normalize)
    x = np.random.default_rng(1).standard_normal((2, 5))
    batch = embed(g, x)
    assert batch.shape == (2, 8)
    # batch size changes the BLAS kernel, so allow last-ulp differences
    np.testing.assert_allclose(batch[0], embed(g, x[0]), rtol=0, atol=1e-12)
    np.testing.assert_allclose(batch[1], embed(g, x[1]), rtol=0, atol=1e-12)
    if normalize:
        np.testing.assert_allclose(np.linalg.norm(batch, axis=1), 1.0)


def test_conv_backbone_embeds_images():
    g = EmbeddingModel((1, 28, 28), 16, architecture_id="conv3", hidden=4, seed=0)
    x = np.random.default_rng(0).standard_normal((3, 1, 28, 28)).astype(np.float32)
    assert embed(g, x).shape == (3, 16)


def test_shape_mismatch_rejected():
    g = EmbeddingModel((5,), 4, hidden=8)
    with pytest.raises(ShapeMismatchError):
        embed(g, np.zeros((2, 6)))
    with pytest.raises(ValueError):
        EmbeddingModel((5,), 4, architecture_id="resnet")


_SUBPROC = """
import numpy as np
from casdc.embedding import EmbeddingModel, embed
g = EmbeddingModel((6,), 12, hidden=10, seed=42)
x = np.linspace(-1, 1, 6)
print(embed(g, x).tobytes().hex())
"""


def test_fixed_seed_embedding_identical_across_processes():
    outs = {subprocess.run([sys.executable, "-c", _SUBPROC], capture_output=True, text=True,
                           check=True).stdout for _ in range(2)}
    assert len(outs) == 1
    g = EmbeddingModel((6,), 12, hidden=10, seed=42)
    assert embed(g, np.linspace(-1, 1, 6)).tobytes().hex() == outs.pop().strip()


def test_checkpoint_round_trip(tmp_path):
    g = EmbeddingModel((5,), 8, hidden=16, seed=3, normalize=True)
    torch.save(g.checkpoint("abc"), tmp_path / "g.pt")
    h = EmbeddingModel.from_checkpoint(tmp_path / "g.pt")
    x = np.random.default_rng(0).standard_normal((4, 5))
    np.testing.assert_array_equal(embed(g, x), embed(h, x))
    assert h.normalize and h.embed_dim == 8


# ---------------------------------------------------------------- loss


def test_loss_margin_satisfied_is_zero():
    # d(a,p) = 0, d(a,n) = 0.5
    emb = torch.tensor([[0.0, 0.0], [0.0, 0.0], [0.5**0.5, 0.0]], dtype=torch.float64)
    assert triplet_loss(emb, [Triplet(0, 1, 2)], 0.1).item() == pytest.approx(0.0, abs=1e-15)


def test_loss_equidistant_gives_margin():
    emb = torch.tensor([[0.0, 0.0], [0.5**0.5, 0.0], [0.0, 0.5**0.5]], dtype=torch.float64)
    assert triplet_loss(emb, [Triplet(0, 1, 2)], 0.1).item() == pytest.approx(0.1, abs=1e-12)


def test_loss_is_mean_of_hinge_terms():
    # first triplet contributes 0.1, second is clamped to 0
    emb = torch.tensor([[0.0, 0.0], [0.5**0.5, 0.0], [0.0, 0.5**0.5], [3.0, 3.0]], dtype=torch.float64)
    loss = triplet_loss(emb, [Triplet(0, 1, 2), Triplet(0, 1, 3)], 0.1)
    assert loss.item() == pytest.approx(0.05, abs=1e-12)


def test_empty_triplets_warn_and_give_zero():
    emb = torch.zeros((3, 2), dtype=torch.float64, requires_grad=True)
    with pytest.warns(EmptyTripletWarning):
        loss = triplet_loss(emb, [], 0.1)
    assert loss.item() == 0.0 and not loss.requires_grad


def test_loss_errors():
    emb = torch.zeros((3, 2), dtype=torch.float64)
    with pytest.raises(ConfigurationError):
        triplet_loss(emb, [Triplet(0, 1, 2)], 0.0)
    with pytest.raises(IndexError):
        triplet_loss(emb, [Triplet(0, 1, 5)], 0.1)
    with pytest.raises(ConfigurationError):
        TripletLossConfig(margin=0)
    with pytest.raises(ConfigurationError):
        TripletLossConfig(mining_strategy="easy")


@settings(max_examples=100, deadline=None)
@given(
    data=st.lists(st.floats(-5, 5, allow_nan=False), min_size=12, max_size=12),
    margin=st.floats(0.01, 2.0),
)
def test_loss_nonnegative_and_matches_loop(data, margin):
    emb = np.array(data).reshape(4, 3)
    trips = [Triplet(0, 1, 2), Triplet(0, 1, 3), Triplet(1, 0, 3)]
    loss = triplet_loss(torch.tensor(emb), trips, margin).item()
    assert loss >= 0
    ref = triplet_loss_loop(emb.tolist(), [(0, 1, 2), (0, 1, 3), (1, 0, 3)], margin)
    assert loss == pytest.approx(ref, rel=1e-9, abs=1e-12)


def test_closed_form_and_autograd_gradients_match_finite_differences():
    rng = np.random.default_rng(0)
    for _ in range(20):
        emb = rng.standard_normal((8, 4))
        trips = [Triplet(int(a), int(p), int(n)) for a, p, n in rng.integers(0, 8, size=(6, 3))]
        trips = [t for t in trips if len({t.anchor_idx, t.positive_idx, t.negative_idx}) == 3]
        margin = 0.5
        kinks = [abs(sq(emb[t.anchor_idx], emb[t.positive_idx]) - sq(emb[t.anchor_idx], emb[t.negative_idx])
                     + margin) for t in trips]
        if not trips or min(kinks) < 1e-3:
            continue
        fd = central_difference(lambda e: triplet_loss(torch.tensor(e), trips, margin).item(), emb)
        t = torch.tensor(emb, requires_grad=True)
        triplet_loss(t, trips, margin).backward()
        assert rel_error(t.grad.numpy(), fd) < 1e-4
        assert rel_error(triplet_loss_grad(emb, trips, margin), fd) < 1e-4


# ---------------------------------------------------------------- mining


def test_mining_one_dimensional_example():
    # anchor 0, positive 1 (d=1), negatives 0.5 (d=0.25) and 1.3 (d=1.69), margin 1
    emb = np.array([[0.0], [1.0], [0.5], [1.3]])
    roles = ["KK", "KK", "KU", "KU"]
    hard = _as_set(mine_triplets(emb, roles, "hard", 1.0))
    semi = _as_set(mine_triplets(emb, roles, "semihard", 1.0))
    comb = _as_set(mine_triplets(emb, roles, "combined", 1.0))
    assert (0, 1, 2) in hard and (0, 1, 3) not in hard
    assert (0, 1, 3) in semi and (0, 1, 2) not in semi
    assert {(0, 1, 2), (0, 1, 3)} <= comb
    assert comb == hard | semi


def test_mining_far_negatives_yield_nothing():
    emb = np.array([[0.0, 0.0], [0.1, 0.0], [0.0, 0.1], [10.0, 10.0], [-10.0, 9.0]])
    roles = ["KK", "KK", "KK", "KU", "KU"]
    for strategy in ("hard", "semihard", "combined"):
        assert mine_triplets(emb, roles, strategy, 0.1) == []


def test_mining_precondition_errors_name_the_role():
    emb = np.zeros((3, 2))
    with pytest.raises(MiningError) as e:
        mine_triplets(emb, ["KK", "KU", "KU"], "hard", 0.1)
    assert e.value.deficient_role is Role.KK
    with pytest.raises(MiningError) as e:
        mine_triplets(emb, ["KK", "KK", "KK"], "hard", 0.1)
    assert e.value.deficient_role is Role.KU


def _random_batch(rng, n):
    emb = rng.standard_normal((n, 3))
    # inject exact ties in distance by duplicating some rows
    if n > 4:
        emb[n - 1] = emb[0]
    roles = np.array(["KK"] * n)
    roles[rng.permutation(n)[: max(1, n // 3)]] = "KU"
    if (roles == "KK").sum() < 2:
        roles[:2] = "KK"
    return emb, list(roles)


@pytest.mark.parametrize("strategy", ["hard", "semihard", "combined"])
def test_mining_all_positives_matches_enumeration(strategy):
    rng = np.random.default_rng(11)
    for _ in range(10):
        emb, roles = _random_batch(rng, int(rng.integers(4, 14)))
        got = _as_set(mine_triplets(emb, roles, strategy, 0.7, positive_selection="all"))
        assert got == enumerate_triplets(emb.tolist(), roles, strategy, 0.7)


@pytest.mark.parametrize("strategy", ["hard", "semihard"])
def test_mining_hardest_positive_matches_loop(strategy):
    rng = np.random.default_rng(12)
    for _ in range(10):
        emb, roles = _random_batch(rng, int(rng.integers(4, 14)))
        got = _as_set(mine_triplets(emb, roles, strategy, 0.7, positive_selection="hardest"))
        assert got == enumerate_hardest_positive(emb.tolist(), roles, 0.7, strategy)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10**6), n=st.integers(3, 16), margin=st.floats(0.01, 2.0),
       selection=st.sampled_from([None, "hardest", "random", "all"]),
       mode=st.sampled_from(["union", "alternate"]))
def test_mining_soundness(seed, n, margin, selection, mode):
    rng = np.random.default_rng(seed)
    emb, roles = _random_batch(rng, n)
    if "KU" not in roles:
        roles[-1] = "KU"
    if roles.count("KK") < 2:
        return
    trips = mine_triplets(emb, roles, "combined", margin, selection, mode, rng)
    assert trips == sorted(trips, key=lambda t: (t.anchor_idx, t.positive_idx, t.negative_idx))
    assert len(set(trips)) == len(trips)
    positives = {}
    for t in trips:
        a, p, ng = t.anchor_idx, t.positive_idx, t.negative_idx
        assert roles[a] == "KK" and roles[p] == "KK" and roles[ng] == "KU" and a != p
        dap, dan = sq(emb[a], emb[p]), sq(emb[a], emb[ng])
        assert dan < dap or dap <= dan < dap + margin
        positives.setdefault(a, set()).add(p)
    if selection in ("hardest", "random") and mode == "alternate":
        assert all(len(v) == 1 for v in positives.values())


# ---------------------------------------------------------------- training


def _small_split(sep=10.0, seed=100):
    src = generate_synthetic(10, 60, 10, sep, seed=seed)
    return split_dataset(src, make_partition(list(range(10)), 6, 0.5, seed=0))


def test_training_reduces_loss_and_reports_telemetry():
    src = generate_synthetic(10, 200, 10, 10.0, seed=100)
    kk, ku, _ = split_dataset(src, make_partition(list(range(10)), 6, 0.5, seed=0))
    g0 = EmbeddingModel((10,), 128, hidden=128, seed=0, normalize=True)
    tel = []
    train_embedding(kk, ku, g0, TripletLossConfig(margin=0.1),
                    TrainConfig(epochs=20, learning_rate=0.05, seed=0), tel)
    assert [s.epoch for s in tel] == list(range(20))
    assert tel[-1].mean_loss < tel[0].mean_loss
    assert all(s.count >= 0 for s in tel)


def test_training_is_deterministic_and_leaves_init_untouched():
    kk, ku, _ = _small_split()
    g0 = EmbeddingModel((10,), 16, hidden=16, seed=0, normalize=True)
    before = parameter_vector(g0)
    cfg = TrainConfig(epochs=3, learning_rate=0.05, seed=5)
    a = train_embedding(kk, ku, g0, TripletLossConfig(), cfg)
    b = train_embedding(kk, ku, g0, TripletLossConfig(), cfg)
    np.testing.assert_array_equal(parameter_vector(g0), before)
    assert parameter_vector(a).tobytes() == parameter_vector(b).tobytes()
    assert not np.array_equal(parameter_vector(a), before)


def test_zero_epochs_returns_init():
    kk, ku, _ = _small_split()
    g0 = EmbeddingModel((10,), 8, hidden=8)
    assert train_embedding(kk, ku, g0, TripletLossConfig(), TrainConfig(epochs=0)) is g0


def test_empty_ku_is_a_configuration_error():
    kk, _, _ = _small_split()
    empty = Dataset(np.zeros((0, 10)), np.zeros(0, dtype=np.int64), np.array([], dtype="<U2"))
    with pytest.raises(ConfigurationError):
        train_embedding(kk, empty, EmbeddingModel((10,), 8, hidden=8), TripletLossConfig(), TrainConfig())
    with pytest.raises(ConfigurationError):
        train_embedding(kk.subset([0]), kk, EmbeddingModel((10,), 8, hidden=8), TripletLossConfig(),
                        TrainConfig())


def test_divergence_raises_training_error_with_epoch():
    kk, ku, _ = _small_split()
    g0 = EmbeddingModel((10,), 8, hidden=8, seed=0)
    with torch.no_grad():
        g0.backbone[-1].bias[0] = float("inf")
    with pytest.raises(TrainingError) as e:
        train_embedding(kk, ku, g0, TripletLossConfig(), TrainConfig(epochs=2, seed=0))
    assert e.value.epoch == 0
