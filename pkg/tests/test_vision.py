import pytest
import torch

from concept_rrg.errors import ShapeError
from concept_rrg.vision import PatchEncoder, encode_image, patchify
from fdcheck import check_grads


def test_token_count_and_grid():
    enc = PatchEncoder(dim=16, patch_size=8, image_size=(64, 64))
    grid = encode_image(torch.rand(64, 64), enc)
    assert grid.tokens.shape == (64, 16)
    assert grid.grid_shape == (8, 8) and grid.patch_size == 8
    assert enc(torch.rand(3, 64, 64)).shape == (3, 64, 16)


def test_patchify_is_row_major():
    img = torch.arange(16.0).reshape(1, 4, 4)
    patches = patchify(img, 2)
    cols = 2
    for k in range(4):
        r, c = divmod(k, cols)
        torch.testing.assert_close(patches[0, k], img[0, 2 * r : 2 * r + 2, 2 * c : 2 * c + 2].reshape(-1))


def test_indivisible_image_rejected():
    with pytest.raises(ShapeError):
        PatchEncoder(dim=8, patch_size=8, image_size=(60, 64))
    enc = PatchEncoder(dim=8, patch_size=8, image_size=(64, 64))
    with pytest.raises(ShapeError):
        enc(torch.rand(60, 64))
    with pytest.raises(ShapeError):
        patchify(torch.rand(1, 10, 10), 4)


def test_zero_image_zero_params_gives_equal_tokens():
    enc = PatchEncoder(dim=8, patch_size=8, image_size=(32, 32), mixing_layers=2, pos_embed=True, bias=False)
    for p in enc.parameters():
        torch.nn.init.zeros_(p)
    tok = enc(torch.zeros(32, 32))
    assert torch.equal(tok, tok[:1].expand_as(tok))


def test_zero_image_random_patch_embedding_gives_equal_tokens():
    enc = PatchEncoder(dim=8, patch_size=8, image_size=(32, 32), mixing_layers=0, pos_embed=False, bias=False)
    tok = enc(torch.zeros(32, 32))
    assert torch.equal(tok, tok[:1].expand_as(tok))


def test_swapping_patches_swaps_tokens():
    torch.manual_seed(1)
    enc = PatchEncoder(dim=8, patch_size=8, image_size=(32, 32), mixing_layers=0, pos_embed=False)
    img = torch.rand(32, 32)
    swapped = img.clone()
    a, b = (slice(0, 8), slice(8, 16)), (slice(16, 24), slice(24, 32))
    swapped[a], swapped[b] = img[b], img[a]
    t0, t1 = enc(img), enc(swapped)
    ka, kb = 0 * 4 + 1, 2 * 4 + 3
    torch.testing.assert_close(t1[ka], t0[kb], rtol=0, atol=0)
    torch.testing.assert_close(t1[kb], t0[ka], rtol=0, atol=0)
    keep = [k for k in range(16) if k not in (ka, kb)]
    assert torch.equal(t1[keep], t0[keep])


def test_mixing_keeps_receptive_field_local():
    torch.manual_seed(2)
    enc = PatchEncoder(dim=8, patch_size=8, image_size=(64, 64), mixing_layers=1, pos_embed=True)
    img = torch.rand(64, 64)
    bumped = img.clone()
    bumped[0:8, 0:8] += 0.5
    changed = (enc(img) - enc(bumped)).abs().sum(dim=-1) > 0
    expected = torch.zeros(8, 8, dtype=torch.bool)
    expected[0:2, 0:2] = True
    assert torch.equal(changed.reshape(8, 8), expected)


def test_deterministic():
    enc = PatchEncoder(dim=8, patch_size=8, image_size=(32, 32))
    img = torch.rand(32, 32)
    assert torch.equal(enc(img), enc(img))


def test_gradient_matches_finite_differences(float64):
    torch.manual_seed(0)
    enc = PatchEncoder(dim=4, patch_size=4, image_size=(8, 8), mixing_layers=1, pos_embed=True)
    img = torch.rand(2, 8, 8)
    target = torch.randn(2, 4, 4)
    check_grads(lambda: ((enc(img) - target) ** 2).sum(), list(enc.parameters()))
