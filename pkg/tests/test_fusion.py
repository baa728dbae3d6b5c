"""Channel-gated fusion over patch features and modalities"""

import numpy as np
import pytest

import dcml_tensor as T
from dcml_fusion import FusionBlock, ModalityFusion, concat_features, fuse, fuse_modalities
from dcml_shared import ConfigError, DimensionError


def _zero_gate(block):
    for _, p in block.named_parameters():
        p.data[:] = 0.0


def test_concat_order_preserved():
    out = concat_features([T.Tensor([1.0, 2.0]), T.Tensor([3.0])])
    assert np.array_equal(out.numpy(), [1.0, 2.0, 3.0])


def test_concat_four_patch_features():
    parts = [T.Tensor(np.full(256, i, dtype=float)) for i in range(4)]
    assert concat_features(parts).shape == (1024,)


def test_concat_empty_rejected():
    with pytest.raises(DimensionError):
        concat_features([])


def test_zero_weights_halve_input(rng):
    block = FusionBlock(10, 4, rng)
    _zero_gate(block)
    F = T.Tensor(rng.standard_normal(10))
    result = fuse(F, block)
    assert np.allclose(result.s.numpy(), 0.5)
    assert np.allclose(result.output.numpy(), 0.5 * F.numpy())


def test_spatial_squeeze_averages_channels(rng):
    block = FusionBlock(3, 1, rng)
    x = np.zeros((1, 4, 4, 3))
    x[..., 0], x[..., 1], x[..., 2] = 1.0, -2.0, 0.25
    result = fuse(T.Tensor(x), block)
    assert np.allclose(result.z.numpy(), [[1.0, -2.0, 0.25]])
    assert result.gated.shape == (1, 4, 4, 3)


def test_matches_composed_oracle(f64, rng):
    block = FusionBlock(12, 4, rng)
    F = rng.standard_normal((3, 12))
    w1, b1 = block.delta1.weight.data, block.delta1.bias.data
    b1 = b1 + rng.standard_normal(b1.shape)
    block.delta1.bias.data = b1
    w2, b2 = block.delta2.weight.data, block.delta2.bias.data
    s = 1.0 / (1.0 + np.exp(-(np.maximum(F @ w1 + b1, 0) @ w2 + b2)))
    result = fuse(T.Tensor(F), block)
    assert np.max(np.abs(result.output.numpy() - s * F)) < 1e-6


def test_gate_strictly_inside_unit_interval(rng):
    block = FusionBlock(16, 2, rng)
    for scale in (1.0, 30.0):
        s = fuse(T.Tensor(rng.standard_normal((5, 16)) * scale), block).s.numpy()
        assert np.all(s > 0) and np.all(s < 1)


def test_gate_recomputed_from_z_reproduces_output(rng):
    block = FusionBlock(8, 2, rng)
    F = T.Tensor(rng.standard_normal((2, 8)))
    result = fuse(F, block)
    again = T.channel_scale(F, block.excite(result.z))
    assert np.array_equal(again.numpy(), result.output.numpy())


@pytest.mark.parametrize("dim,ratio,hidden", [(1664, 2, 832), (10, 4, 3), (1024, 4, 256), (7, 16, 1)])
def test_hidden_width_rounds_up(rng, dim, ratio, hidden):
    assert FusionBlock(dim, ratio, rng).hidden_dim == hidden


def test_channel_permutation_consistency(f64, rng):
    block = FusionBlock(6, 2, rng)
    F = rng.standard_normal((2, 6))
    perm = rng.permutation(6)
    permuted = FusionBlock(6, 2, rng)
    permuted.delta1.weight.data = block.delta1.weight.data[perm, :]
    permuted.delta1.bias.data = block.delta1.bias.data.copy()
    permuted.delta2.weight.data = block.delta2.weight.data[:, perm]
    permuted.delta2.bias.data = block.delta2.bias.data[perm]
    base = fuse(T.Tensor(F), block).output.numpy()
    moved = fuse(T.Tensor(F[:, perm]), permuted).output.numpy()
    assert np.allclose(moved, base[:, perm], atol=1e-12)


def test_fuse_modalities_equals_fuse_of_concat(rng):
    F, f_id, f_race = (T.Tensor(rng.standard_normal(n)) for n in (8, 4, 3))
    block = FusionBlock(15, 2, rng)
    direct = fuse(concat_features([F, f_id, f_race]), block).output.numpy()
    assert np.array_equal(fuse_modalities(F, f_id, f_race, block).output.numpy(), direct)


def test_fuse_modalities_zero_gate_and_unit_embedding(rng):
    F, f_id, f_race = (T.Tensor(rng.standard_normal(n)) for n in (8, 4, 3))
    block = FusionBlock(15, 2, rng)
    _zero_gate(block)
    result = fuse_modalities(F, f_id, f_race, block)
    joined = np.concatenate([F.numpy(), f_id.numpy(), f_race.numpy()])
    assert np.allclose(result.gated.numpy(), 0.5 * joined)
    assert abs(np.linalg.norm(result.embedding.numpy()) - 1.0) < 1e-6


def test_width_mismatch_rejected(rng):
    with pytest.raises(DimensionError):
        fuse(T.Tensor(np.ones(5)), FusionBlock(6, 2, rng))
    with pytest.raises(DimensionError):
        fuse_modalities(T.Tensor(np.ones(4)), T.Tensor(np.ones(2)), None, FusionBlock(7, 2, rng))


def test_projection_to_output_dim(rng):
    head = ModalityFusion({'face': 8, 'deaging': 4, 'race': 4}, 2, rng, output_dim=5)
    feats = {m: T.Tensor(rng.standard_normal((3, d))) for m, d in (('face', 8), ('deaging', 4), ('race', 4))}
    result = head(feats)
    assert result.gated.shape == (3, 16)
    assert result.embedding.shape == (3, 5)
    assert np.allclose(np.linalg.norm(result.embedding.numpy(), axis=1), 1.0, atol=1e-5)


def test_manual_mode_scales_each_modality(rng):
    head = ModalityFusion({'face': 2, 'race': 2}, 2, rng, mode='manual',
                          manual_weights={'face': 1.0, 'race': 0.5})
    result = head({'face': T.Tensor([[1.0, 1.0]]), 'race': T.Tensor([[2.0, 2.0]])})
    assert np.allclose(result.gated.numpy(), [[1.0, 1.0, 1.0, 1.0]])
    assert result.s is None


def test_concat_mode_is_plain_concatenation(rng):
    head = ModalityFusion({'face': 2, 'deaging': 1}, 2, rng, mode='concat')
    result = head({'face': T.Tensor([[3.0, 0.0]]), 'deaging': T.Tensor([[4.0]])})
    assert np.allclose(result.embedding.numpy(), [[0.6, 0.0, 0.8]])


def test_face_modality_required(rng):
    with pytest.raises(ConfigError):
        ModalityFusion({'race': 4}, 2, rng)
    with pytest.raises(ConfigError):
        ModalityFusion({'face': 4}, 2, rng, mode='weighted')


def test_gate_gradients_reach_weights(rng):
    block = FusionBlock(6, 2, rng)
    T.backward(T.sum_(fuse(T.Tensor(rng.standard_normal((2, 6))), block).output))
    assert all(p.grad is not None for p in block.parameters())
