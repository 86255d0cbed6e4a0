import numpy as np
import pytest

from rovit import autodiff as ad
from rovit.autodiff import ContractError, DimensionError, Tensor
from rovit.encoders import (DualEncoder, TextConfig, VitConfig, attention_block, image_forward,
                            load_checkpoint, patchify, save_checkpoint, self_attention,
                            text_forward, unpatchify, _init_block, _sub)
from rovit.losses import LossConfig, total_contrastive_loss


@pytest.fixture(scope="module")
def model():
    return DualEncoder.init(seed=3)


def _images(seed, n=2):
    return np.random.default_rng(seed).uniform(0, 1, size=(n, 32, 32, 3))


# ---- patchify

def test_patchify_shapes():
    assert patchify(np.zeros((4, 4, 1)), 2).shape == (4, 4)


def test_patchify_constant_rows_identical():
    p = patchify(np.full((8, 8, 3), 0.7), 4)
    assert np.all(p == p[0])


def test_patchify_ramp_matches_index_oracle():
    img = np.arange(64, dtype=float).reshape(8, 8, 1)
    p = patchify(img, 4)
    for r in range(2):
        for c in range(2):
            expect = [img[r * 4 + i, c * 4 + j, 0] for i in range(4) for j in range(4)]
            np.testing.assert_array_equal(p[r * 2 + c], expect)


def test_unpatchify_inverts():
    img = np.random.default_rng(0).normal(size=(2, 8, 12, 3))
    np.testing.assert_array_equal(unpatchify(patchify(img, 4), 4, 8, 12, 3), img)


def test_patchify_rejects_indivisible():
    with pytest.raises(DimensionError):
        patchify(np.zeros((6, 6, 1)), 4)


# ---- towers

@pytest.mark.parametrize("mode", ["learnable", "sincos", "none"])
def test_image_embeddings_unit_norm(model, mode):
    v = image_forward(model, _images(0, 3), mode).data
    assert np.all(np.abs(np.linalg.norm(v, axis=1) - 1.0) <= 1e-10)


def test_none_equals_all_zero_learnable(model):
    m = model.copy()
    m.params["image.pe"].data[:] = 0.0
    a = image_forward(m, _images(1), "learnable").data
    b = image_forward(m, _images(1), "none").data
    np.testing.assert_array_equal(a, b)


def test_cpe_mode_is_deterministic_under_fixed_seed(model):
    a = image_forward(model, _images(2), "cpe", np.random.default_rng(9)).data
    b = image_forward(model, _images(2), "cpe", np.random.default_rng(9)).data
    assert a.tobytes() == b.tobytes()


def test_crop_modes_need_rng(model):
    with pytest.raises(ContractError):
        image_forward(model, _images(2), "cpe")
    with pytest.raises(ContractError):
        image_forward(model, _images(2), "feat_crop_resize")


def test_text_embeddings(model):
    e = text_forward(model, [[1, 4, 7], [2, 5], [3]]).data
    assert np.all(np.abs(np.linalg.norm(e, axis=1) - 1.0) <= 1e-10)
    again = text_forward(model, [[1, 4, 7], [2, 5], [3]]).data
    assert e.tobytes() == again.tobytes()


def test_padding_does_not_leak(model):
    alone = text_forward(model, [[2, 5]]).data
    padded = text_forward(model, [[2, 5], [1, 4, 7, 9]]).data[0]
    np.testing.assert_allclose(alone[0], padded, atol=1e-12)


def test_token_permutation_changes_embedding():
    for seed in range(20):
        m = DualEncoder.init(seed=seed)
        e = text_forward(m, [[1, 5, 8], [5, 1, 8]]).data
        assert float(e[0] @ e[1]) < 1 - 1e-6


def test_text_input_errors(model):
    with pytest.raises(ValueError):
        text_forward(model, [[1, 999]])
    with pytest.raises(ValueError):
        text_forward(model, [list(range(1, 20))])


def test_image_shape_error(model):
    with pytest.raises(DimensionError):
        image_forward(model, np.zeros((1, 16, 16, 3)))


# ---- attention block

def _block(seed, d=8):
    params = {}
    _init_block(params, "b", d, 2, np.random.default_rng(seed))
    return _sub(params, "b")


def test_zero_output_projections_give_identity():
    p = _block(0)
    p["attn.wo"].data[:] = 0.0
    p["mlp.w2"].data[:] = 0.0
    x = np.random.default_rng(1).normal(size=(2, 5, 8))
    np.testing.assert_array_equal(attention_block(Tensor(x), p, heads=2).data, x)


def test_attention_rows_sum_to_one():
    p = _block(2)
    x = Tensor(np.random.default_rng(3).normal(size=(2, 5, 8)))
    _, attn = self_attention(x, _sub(p, "attn"), 4)
    assert np.max(np.abs(attn.data.sum(axis=-1) - 1.0)) < 1e-12


def test_attention_block_gradcheck():
    p = _block(4, d=4)
    x0 = np.random.default_rng(5).normal(size=(1, 3, 4))
    w = np.random.default_rng(6).normal(size=(1, 3, 4))
    x = Tensor(x0, requires_grad=True)
    ad.backward((attention_block(x, p, heads=2) * w).sum())
    plain = {k: Tensor(v.data) for k, v in p.items()}
    num = ad.finite_diff_grad(lambda a: (attention_block(a, plain, heads=2) * w).sum().item(), x0)
    assert ad.relative_error(x.grad, num) < 1e-4
    for v in p.values():
        v.grad = None


# ---- positional embedding sharing

def test_cpe_gradient_lands_on_shared_pe():
    m = DualEncoder.init(seed=1, vit=VitConfig(pe_mode="cpe"))
    names_learnable = set(DualEncoder.init(seed=1).params)
    assert set(m.params) == names_learnable
    V = image_forward(m, _images(4, 4), "cpe", np.random.default_rng(0))
    L = text_forward(m, [[1, 4, 7], [2, 5, 8], [3, 6, 9], [1, 6, 10]])
    ad.backward(total_contrastive_loss(V, L, m.tau, LossConfig("focal")))
    g = m.params["image.pe"].grad
    assert g is not None and np.abs(g).max() > 0


# ---- checkpoint

def test_checkpoint_round_trip(tmp_path, model):
    path = tmp_path / "m.rovt"
    save_checkpoint(model, path)
    back = load_checkpoint(path)
    assert back.vit == model.vit and back.text == model.text and back.cpe == model.cpe
    assert list(back.params) == list(model.params)
    for k in model.params:
        assert back.params[k].data.tobytes() == model.params[k].data.tobytes()
        assert back.params[k].shape == model.params[k].shape


def test_checkpoint_non_default_config(tmp_path):
    m = DualEncoder.init(vit=VitConfig(image_size=16, patch_size=4, dim=16, pe_mode="sincos"),
                         text=TextConfig(dim=16, depth=1), seed=2)
    save_checkpoint(m, tmp_path / "m.rovt")
    back = load_checkpoint(tmp_path / "m.rovt")
    assert back.vit.pe_mode == "sincos" and back.vit.grid == 4 and back.text.depth == 1


def test_checkpoint_bad_magic(tmp_path):
    p = tmp_path / "bad.rovt"
    p.write_bytes(b"NOPE" + bytes(8))
    with pytest.raises(ValueError):
        load_checkpoint(p)
