import math

import pytest
import torch

from concept_rrg.alignment import ConceptAligner, ConceptDecoder, align, alignment_loss, binary_ce
from concept_rrg.errors import DataError, ShapeError
from fdcheck import check_grads


def test_singleton_attention_is_one():
    torch.manual_seed(0)
    al = ConceptAligner(dim=8, heads=2, layers=2)
    out = align(torch.randn(1, 8), torch.randn(3, 8), torch.randn(1, 8), al)
    assert torch.equal(out.attn_a, torch.ones_like(out.attn_a))
    assert out.attn_a.shape == (2, 2, 1, 1)


def test_identical_visual_tokens_give_uniform_attention():
    torch.manual_seed(0)
    al = ConceptAligner(dim=8, heads=2, layers=2)
    visual = torch.randn(1, 8).expand(5, 8)
    out = al(torch.randn(3, 8), torch.randn(4, 8), visual)
    torch.testing.assert_close(out.attn_p, torch.full_like(out.attn_p, 0.2), rtol=0, atol=1e-7)


def test_shapes_batched_and_unbatched():
    al = ConceptAligner(dim=16, heads=4, layers=3)
    out = al(torch.randn(8, 16), torch.randn(10, 16), torch.randn(2, 64, 16))
    assert out.anat_aligned.shape == (2, 8, 16) and out.path_feats.shape == (2, 10, 16)
    assert out.attn_a.shape == (2, 3, 4, 8, 64) and out.attn_p.shape == (2, 3, 4, 10, 64)
    assert out.logits_a.shape == (2, 8, 2) and out.logits_p.shape == (2, 10, 2)
    single = al(torch.randn(8, 16), torch.randn(10, 16), torch.randn(64, 16))
    assert single.attn_p.shape == (3, 4, 10, 64)


def test_attention_rows_are_distributions():
    torch.manual_seed(3)
    al = ConceptAligner(dim=8, heads=4, layers=2)
    out = al(torch.randn(3, 8) * 5, torch.randn(2, 8) * 5, torch.randn(4, 16, 8) * 5)
    for attn in (out.attn_a, out.attn_p):
        assert (attn >= 0).all()
        assert ((attn.sum(-1) - 1).abs() <= 1e-6).all()


def test_dimension_mismatch():
    al = ConceptAligner(dim=8, heads=2)
    with pytest.raises(ShapeError):
        al(torch.randn(3, 8), torch.randn(2, 8), torch.randn(5, 6))
    with pytest.raises(ShapeError):
        ConceptDecoder(dim=8, heads=3)
    with pytest.raises(ShapeError):
        ConceptDecoder(dim=8, heads=2, layers=0)


@pytest.mark.parametrize("self_attn", [False, True])
def test_permutation_equivariance(self_attn):
    torch.manual_seed(4)
    al = ConceptAligner(dim=8, heads=2, layers=2, self_attn=self_attn)
    anat_queries, path_queries, vis = torch.randn(5, 8), torch.randn(4, 8), torch.randn(2, 9, 8)
    perm = torch.tensor([3, 0, 4, 1, 2])
    base, permuted = al(anat_queries, path_queries, vis), al(anat_queries[perm], path_queries, vis)
    torch.testing.assert_close(permuted.anat_aligned, base.anat_aligned[:, perm])
    torch.testing.assert_close(permuted.logits_a, base.logits_a[:, perm])
    torch.testing.assert_close(permuted.attn_a, base.attn_a[..., perm, :])
    torch.testing.assert_close(permuted.path_feats, base.path_feats)


def test_uniform_logits_give_ln2():
    for y in (0, 1):
        assert binary_ce(torch.zeros(1, 2, dtype=torch.float64), [y]).item() == pytest.approx(math.log(2), abs=1e-12)


def test_worked_example_both_labels():
    logits = torch.tensor([[1.0, -1.0]], dtype=torch.float64)
    assert binary_ce(logits, [1]).item() == pytest.approx(math.log(1 + math.exp(2)), abs=1e-12)
    assert binary_ce(logits, [1]).item() == pytest.approx(2.1269, abs=1e-4)
    assert binary_ce(logits, [0]).item() == pytest.approx(math.log(1 + math.exp(-2)), abs=1e-12)
    assert binary_ce(logits, [0]).item() == pytest.approx(0.1269, abs=1e-4)


def test_large_margin_loss_vanishes():
    assert binary_ce(torch.tensor([[-50.0, 50.0]]), [1]).item() < 1e-30


def test_loss_shift_invariance_and_nonnegativity():
    torch.manual_seed(5)
    logits = torch.randn(3, 6, 2, dtype=torch.float64)
    labels = torch.randint(0, 2, (3, 6))
    shifted = logits + torch.randn(3, 6, 1, dtype=torch.float64)
    torch.testing.assert_close(binary_ce(logits, labels), binary_ce(shifted, labels))
    assert (binary_ce(logits, labels) >= 0).all()


def test_non_binary_labels_rejected():
    with pytest.raises(DataError):
        binary_ce(torch.zeros(2, 2), [0, 2])
    with pytest.raises(ShapeError):
        binary_ce(torch.zeros(2, 2), [0, 1, 1])


def test_alignment_loss_pair():
    la, lp = alignment_loss(torch.zeros(4, 2), [0, 1, 0, 1], torch.zeros(3, 2), [1, 1, 0])
    assert la.item() == pytest.approx(math.log(2)) and lp.item() == pytest.approx(math.log(2))


def test_bce_gradient_matches_finite_differences(float64):
    torch.manual_seed(0)
    al = ConceptAligner(dim=4, heads=2, layers=2)
    anat_queries, path_queries, vis = torch.randn(3, 4), torch.randn(4, 4), torch.randn(2, 5, 4)
    anat_abnormal, path_present = torch.randint(0, 2, (2, 3)), torch.randint(0, 2, (2, 4))

    def f():
        out = al(anat_queries, path_queries, vis)
        la, lp = alignment_loss(out.logits_a, anat_abnormal, out.logits_p, path_present)
        return (la + lp).mean()

    check_grads(f, list(al.parameters()))
