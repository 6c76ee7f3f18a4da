import math

import numpy as np
import pytest
import torch

from diffkillr.diffeo_gen import AugmentationConfig, DiffeoSpec, make_warp, sample_diffeo, warp_array
from diffkillr.errors import ConfigError, DimensionError, NumericError, ParameterError
from diffkillr.invariant_net import (EncoderModel, InvariantTrainConfig, embed, init_encoder, knn_accuracy, map_metric,
                                     match, match_embedding, nt_xent_loss, reconstruction_loss, train_invariant)
from diffkillr.patch_bank import BankEntry, CellBank, CellPatch, build_augmented_bank
from diffkillr.synth import ShapeSpec, gen_shape


# losses -----------------------------------------------------------------


def test_nt_xent_hand_value():
    z = torch.tensor([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, 1.0]])
    e = math.e
    assert nt_xent_loss(z, temperature=1.0).item() == pytest.approx(-math.log(e / (e + 2)), rel=1e-6)


def test_nt_xent_single_pair_is_zero():
    z = torch.tensor([[1.0, 2.0], [3.0, -1.0]])
    assert nt_xent_loss(z).item() == pytest.approx(0.0, abs=1e-7)


def test_nt_xent_ignores_norms(rng):
    z = torch.tensor(rng.standard_normal((6, 4)))
    scaled = z * torch.tensor(rng.uniform(0.1, 10, (6, 1)))
    assert nt_xent_loss(z).item() == pytest.approx(nt_xent_loss(scaled).item(), rel=1e-9)


def test_nt_xent_explicit_positives_match_default(rng):
    z = torch.tensor(rng.standard_normal((6, 3)))
    assert nt_xent_loss(z, positives=[3, 4, 5, 0, 1, 2]).item() == pytest.approx(nt_xent_loss(z).item())
    assert nt_xent_loss(z, reduction="none").shape == (6,)


def test_nt_xent_errors():
    with pytest.raises(ParameterError):
        nt_xent_loss(torch.zeros(3, 2))
    with pytest.raises(ParameterError):
        nt_xent_loss(torch.ones(2, 2), temperature=0.0)
    with pytest.raises(NumericError):
        nt_xent_loss(torch.tensor([[1.0, 0.0], [0.0, 0.0]]))


def test_reconstruction_loss_values():
    x = torch.zeros(2, 1, 2, 2)
    assert reconstruction_loss(x, x).item() == 0.0
    y = x.clone()
    y[0, 0, 0, 0] = 1.0
    y[1, 0, :, 0] = torch.tensor([1.0, math.sqrt(2.0)])
    # per-item summed errors 1 and 3, averaged over the batch
    assert reconstruction_loss(x, y).item() == pytest.approx(2.0)
    assert reconstruction_loss(x[:1], y[:1]).item() == pytest.approx(1.0)
    with pytest.raises(DimensionError):
        reconstruction_loss(x, torch.zeros(2, 1, 3, 3))


# training ---------------------------------------------------------------


def tiny_bank():
    shapes = [ShapeSpec("square", a=8.0), ShapeSpec("ellipse", a=5.0, b=2.5), ShapeSpec("star", a=5.0, b=2.5)]
    bank = CellBank([BankEntry(*gen_shape(s, 16, k)) for k, s in enumerate(shapes)])
    return build_augmented_bank(bank, 2, AugmentationConfig(patch_size=16), seed=0)


def small_cfg(**kw):
    return InvariantTrainConfig(embedding_dim=8, widths=(4, 8), batch_size=3, steps_per_epoch=2,
                                augmentation=AugmentationConfig(patch_size=16), **kw)


def test_zero_epochs_gives_usable_model():
    model = train_invariant(tiny_bank(), small_cfg(epochs=0))
    z = model.encode([r.patch for r in tiny_bank().records()])
    assert z.shape == (6, 8) and np.all(np.isfinite(z))
    np.testing.assert_allclose(np.linalg.norm(z, axis=1), 1.0, atol=1e-5)


def test_training_is_reproducible():
    a = train_invariant(tiny_bank(), small_cfg(epochs=2, seed=3))
    b = train_invariant(tiny_bank(), small_cfg(epochs=2, seed=3))
    assert a.loss_history == b.loss_history and a.digest() == b.digest()


def test_training_needs_two_archetypes_and_a_batch():
    with pytest.raises(ConfigError):
        train_invariant(CellBank(tiny_bank().entries[:1]), small_cfg(epochs=1))
    with pytest.raises(ConfigError):
        InvariantTrainConfig(batch_size=1)


def test_encoder_rejects_wrong_patch_size():
    with pytest.raises(DimensionError):
        init_encoder(size=16, dim=4, widths=(4, 8)).encode([np.zeros((32, 32, 1))])


def test_save_load_preserves_embeddings(tmp_path, rng):
    model = train_invariant(tiny_bank(), small_cfg(epochs=1))
    model.save(tmp_path / "enc.pt")
    loaded = EncoderModel.load(tmp_path / "enc.pt")
    x = [rng.random((16, 16, 1)) for _ in range(3)]
    np.testing.assert_array_equal(model.encode(x), loaded.encode(x))
    assert loaded.digest() == model.digest() and loaded.loss_history == model.loss_history


# matching ---------------------------------------------------------------


def test_single_record_bank_always_matches_it():
    bank = CellBank([BankEntry(*gen_shape(ShapeSpec("square", a=6.0), 16))])
    bank = build_augmented_bank(bank, 1, AugmentationConfig(patch_size=16), seed=0)
    model = init_encoder(size=16, dim=4, widths=(4, 8))
    r = match(model, CellPatch(np.random.default_rng(0).random((16, 16))), bank)
    assert (r.i, r.j) == (0, 0)


def test_identical_query_has_zero_distance():
    bank = tiny_bank()
    model = init_encoder(size=16, dim=8, widths=(4, 8))
    r = match(model, bank.record(1, 1).patch, bank)
    assert r.l2_distance == pytest.approx(0.0, abs=1e-6) and (r.i, r.j) == (1, 1)


def test_ties_keep_bank_order():
    bank = tiny_bank()
    emb = np.ones((6, 2))
    ranked = match_embedding(np.ones(2), emb, bank, top_k=6)
    assert [x.record for x in ranked] == list(range(6))


def test_map_of_separated_clusters_is_one(rng):
    e = np.concatenate([rng.normal(0, 0.01, (10, 3)), rng.normal(5, 0.01, (10, 3))])
    assert map_metric(e, [0] * 10 + [1] * 10) == pytest.approx(1.0)


def test_map_of_random_labels_is_near_half(rng):
    scores = [map_metric(rng.standard_normal((40, 4)), rng.permutation([0] * 20 + [1] * 20)) for _ in range(20)]
    assert abs(np.mean(scores) - 0.5) < 0.05


def test_map_single_class_warns():
    with pytest.warns(RuntimeWarning):
        assert map_metric(np.zeros((3, 2)), [1, 1, 1]) == 1.0


def test_knn_on_reference_set_and_bad_k(rng):
    e = rng.standard_normal((12, 3))
    y = np.arange(12) % 3
    assert knn_accuracy(e, y, e, y) == 1.0
    with pytest.raises(ParameterError):
        knn_accuracy(e, y, e, y, k=13)


# trained encoder ---------------------------------------------------------


@pytest.mark.slow
def test_augmentations_sit_closer_than_other_archetypes(encoder, entries):
    rng = np.random.default_rng(7)
    ratios = []
    for j, ent in enumerate(entries):
        z0 = embed(encoder, ent.patch)
        same = []
        for _ in range(5):
            spec = sample_diffeo(rng)
            same.append(np.linalg.norm(embed(encoder, CellPatch(warp_array(make_warp(spec, 32, 32),
                                                                               ent.patch.intensities))) - z0))
        other = [np.linalg.norm(embed(encoder, e.patch) - z0) for k, e in enumerate(entries) if k != j]
        ratios.append(np.mean(same) / np.min(other))
    assert np.mean(ratios) < 0.5, ratios


@pytest.mark.slow
def test_small_rotation_stays_close(encoder, entries):
    zs = encoder.encode([e.patch for e in entries])
    between = np.median([np.linalg.norm(a - b) for k, a in enumerate(zs) for b in zs[k + 1:]])
    for ent, z in zip(entries, zs):
        turned = warp_array(make_warp(DiffeoSpec("rotation", (15.5, 15.5), angle=0.1), 32, 32), ent.patch.intensities)
        assert np.linalg.norm(embed(encoder, CellPatch(turned)) - z) < between


@pytest.mark.slow
def test_loss_decreases(encoder):
    h = encoder.loss_history
    assert len(h) == 200 and np.mean(h[-50:]) < np.mean(h[:10])
