import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import autograd_grad, central_difference, rel_error
from dcda.ccl import (
    Ablations,
    CclBatchWiring,
    Role,
    SegModel,
    ccl_loss,
    joint_loss,
    needed_outputs,
    predict,
    seg_loss,
    wire_batch,
)
from dcda.ccl.model import probs_to_mask
from dcda.errors import ShapeError, StateError
from dcda.types import DomainTag, ImageBatch, Mask, ProbMap, Stage, TrainPhase, normalize_probs


def probmap(vessel: torch.Tensor) -> ProbMap:
    return ProbMap(torch.stack([1 - vessel, vessel], dim=1))


def dice_oracle(p, g, s=1.0):
    """Plain-Python evaluation of the smoothed Dice loss."""
    p, g = p.flatten().tolist(), g.flatten().tolist()
    inter = sum(a * b for a, b in zip(p, g))
    return 1 - (2 * inter + s) / (sum(p) + sum(g) + s)


def test_seg_loss_2x2_hand_value():
    pred = probmap(torch.full((1, 2, 2), 0.5, dtype=torch.float64))
    gt = Mask(torch.tensor([[[1, 0], [1, 0]]]))
    assert seg_loss(pred, gt).item() == pytest.approx(0.4, abs=1e-9)


def test_seg_loss_perfect_prediction_on_large_mask():
    g = torch.zeros(1, 40, 40, dtype=torch.uint8)
    g[0, 10:20, 5:35] = 1
    v = seg_loss(probmap(g.double()), Mask(g)).item()
    assert 0 <= v <= 1e-3


def test_seg_loss_empty_masks():
    z = torch.zeros(1, 4, 4)
    assert seg_loss(probmap(z), Mask(z.to(torch.uint8))).item() == 0.0


def test_seg_loss_shape_mismatch():
    with pytest.raises(ShapeError):
        seg_loss(probmap(torch.zeros(1, 4, 4)), Mask(torch.zeros(1, 4, 5, dtype=torch.uint8)))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_seg_loss_matches_oracle_and_in_unit_interval(seed):
    g = torch.Generator().manual_seed(seed)
    p = torch.rand(2, 4, 4, generator=g, dtype=torch.float64)
    m = (torch.rand(2, 4, 4, generator=g) > 0.5).to(torch.uint8)
    v = seg_loss(probmap(p), Mask(m)).item()
    assert v == pytest.approx(dice_oracle(p, m.double()), abs=1e-12)
    assert 0 <= v <= 1


def test_ccl_loss_one_hot_agreement():
    v = torch.tensor([[[1.0, 0.0], [0.0, 1.0]]], dtype=torch.float64)
    assert ccl_loss(probmap(v), probmap(v)).item() <= 1e-6


def test_ccl_loss_uniform():
    u = probmap(torch.full((2, 3, 3), 0.5, dtype=torch.float64))
    assert ccl_loss(u, u).item() == pytest.approx(math.log(2), abs=1e-6)


def test_ccl_loss_confident_student():
    student = probmap(torch.full((1, 2, 2), 0.1, dtype=torch.float64))  # (0.9, 0.1)
    teacher = probmap(torch.zeros(1, 2, 2, dtype=torch.float64))        # (1, 0)
    assert ccl_loss(student, teacher).item() == pytest.approx(-math.log(0.9), abs=1e-6)
    assert ccl_loss(student, teacher).item() == pytest.approx(0.1053605, abs=1e-6)


def test_ccl_loss_shape_mismatch():
    with pytest.raises(ShapeError):
        ccl_loss(probmap(torch.zeros(1, 2, 2)), probmap(torch.zeros(1, 2, 3)))


@pytest.mark.parametrize("delta", [0.05, -0.05])
def test_ccl_loss_minimal_at_teacher(delta):
    teacher = probmap(torch.full((1, 2, 2), 0.5, dtype=torch.float64))
    base = ccl_loss(teacher, teacher).item()
    shifted = probmap(torch.full((1, 2, 2), 0.5 + delta, dtype=torch.float64))
    assert ccl_loss(shifted, teacher).item() > base


def test_ccl_loss_teacher_receives_no_gradient():
    t = torch.rand(1, 2, 3, 3, dtype=torch.float64, requires_grad=True)
    s = torch.rand(1, 2, 3, 3, dtype=torch.float64, requires_grad=True)
    ccl_loss(torch.softmax(s, 1), torch.softmax(t, 1)).backward()
    assert t.grad is None and s.grad is not None


def test_seg_loss_gradient():
    g = torch.Generator().manual_seed(0)
    p = torch.rand(1, 4, 4, generator=g, dtype=torch.float64)
    m = Mask((torch.rand(1, 4, 4, generator=g) > 0.5).to(torch.uint8))
    fn = lambda t: seg_loss(torch.stack([1 - t, t], 1), m)  # noqa: E731
    assert rel_error(autograd_grad(fn, p), central_difference(fn, p)) <= 1e-3


def test_ccl_loss_gradient():
    g = torch.Generator().manual_seed(1)
    logits = torch.randn(1, 2, 4, 4, generator=g, dtype=torch.float64)
    teacher = torch.softmax(torch.randn(1, 2, 4, 4, generator=g, dtype=torch.float64), 1)
    fn = lambda t: ccl_loss(t, teacher)  # noqa: E731
    student = torch.softmax(logits, 1)
    assert rel_error(autograd_grad(fn, student), central_difference(fn, student, h=1e-7)) <= 1e-3


# -- models and wiring

def tiny_model(role=Role.SOURCE_EXPERT, seed=0):
    torch.manual_seed(seed)
    return SegModel(role, encoder_depth=2, base_channels=4)


def images(n=2, size=16, domain=DomainTag.SOURCE, seed=0):
    g = torch.Generator().manual_seed(seed)
    return ImageBatch(torch.rand(n, 1, size, size, generator=g), domain)


def test_seg_model_output_is_probmap_of_input_size():
    m = tiny_model()
    out = m(images(3, 32))
    assert out.probs.shape == (3, 2, 32, 32)
    assert torch.allclose(out.probs.sum(1), torch.ones(3, 32, 32), atol=1e-5)


def test_default_architecture_depth_four():
    m = SegModel()
    assert len(m.down) == 4
    assert m(images(1, 32)).probs.shape == (1, 2, 32, 32)


def test_wire_batch_shapes_and_lineage():
    f_s, f_t = tiny_model(), tiny_model(Role.TARGET_EXPERT, 1)
    x, y = images(), images(domain=DomainTag.TARGET, seed=1)
    gt = Mask(torch.zeros(2, 16, 16, dtype=torch.uint8))
    w = wire_batch(f_s, f_t, x, y, y.with_pixels(y.pixels, DomainTag.SOURCE), x.with_pixels(x.pixels, DomainTag.TARGET), gt)
    for p in (w.f_s_x, w.f_s_xhat, w.f_t_y, w.f_t_yhat):
        assert p.probs.shape == (2, 2, 16, 16)
    assert w.lineage[0][:2] == ("f_t_yhat", "f_s_x") and w.lineage[0][2] == x.ids


def test_wire_batch_identical_models_with_swap_stub():
    f_s = tiny_model()
    f_t = tiny_model(Role.TARGET_EXPERT)
    f_t.load_state_dict(f_s.state_dict())
    f_s.eval()
    f_t.eval()
    x, y = images(), images(domain=DomainTag.TARGET, seed=1)
    x_hat = ImageBatch(y.pixels.clone(), DomainTag.SOURCE)
    y_hat = ImageBatch(x.pixels.clone(), DomainTag.TARGET)
    w = wire_batch(f_s, f_t, x, y, x_hat, y_hat, Mask(torch.zeros(2, 16, 16, dtype=torch.uint8)))
    assert torch.equal(w.f_t_yhat.probs, w.f_s_x.probs)


def test_wire_batch_mismatched_n():
    f = tiny_model()
    with pytest.raises(ShapeError):
        wire_batch(f, f, images(2), images(3, domain=DomainTag.TARGET), images(2), images(2),
                   Mask(torch.zeros(2, 16, 16, dtype=torch.uint8)))


# -- joint objective

def uniform_wiring(gt):
    u = probmap(torch.full(gt.labels.shape, 0.5, dtype=torch.float64))
    return CclBatchWiring(gt_x=gt, f_s_x=u, f_s_xhat=u, f_t_y=u, f_t_yhat=u)


def half_mask():
    return Mask(torch.tensor([[[1, 1], [0, 0]]], dtype=torch.uint8))


def test_joint_loss_before_tau_is_source_dice_only():
    gt = half_mask()
    loss, rep = joint_loss(uniform_wiring(gt), TrainPhase(Stage.JOINT, epoch=3, tau=5))
    assert loss.item() == pytest.approx(dice_oracle(torch.full((1, 2, 2), 0.5), gt.labels.double()))
    assert set(rep.values) == {"seg_source", "joint"}


def test_joint_loss_during_source_pretraining():
    gt = half_mask()
    loss, _ = joint_loss(uniform_wiring(gt), TrainPhase(Stage.SOURCE_PRETRAIN, epoch=50, tau=0))
    assert loss.item() == pytest.approx(0.4, abs=1e-9)


def test_joint_loss_uniform_after_tau():
    gt = half_mask()
    loss, rep = joint_loss(uniform_wiring(gt), TrainPhase(Stage.JOINT, epoch=1, tau=0))
    dice = dice_oracle(torch.full((1, 2, 2), 0.5), gt.labels.double())
    assert loss.item() == pytest.approx(2 * dice + 2 * math.log(2), abs=1e-9)
    assert rep["joint"] == pytest.approx(loss.item())


def test_joint_loss_perfect_agreement_is_small():
    g = torch.zeros(1, 40, 40, dtype=torch.uint8)
    g[0, :, 10:20] = 1
    p = probmap(g.double())
    w = CclBatchWiring(gt_x=Mask(g), f_s_x=p, f_s_xhat=p, f_t_y=p, f_t_yhat=p)
    loss, _ = joint_loss(w, TrainPhase(Stage.JOINT, 1, 0))
    assert loss.item() <= 2e-3


def test_joint_loss_refuses_drst_phase():
    with pytest.raises(StateError):
        joint_loss(uniform_wiring(half_mask()), TrainPhase(Stage.DRST_PRETRAIN))


@pytest.mark.parametrize("abl,keys", [
    (Ablations(no_ccl=True), {"seg_source", "seg_target"}),
    (Ablations(no_seg_after_tau=True), {"ccl"}),
    (Ablations(no_fs=True), {"seg_target"}),
])
def test_ablations_drop_terms(abl, keys):
    _, rep = joint_loss(uniform_wiring(half_mask()), TrainPhase(Stage.JOINT, 1, 0), abl)
    assert set(rep.values) - {"joint"} == keys


def test_all_terms_removed_gives_no_loss():
    loss, rep = joint_loss(uniform_wiring(half_mask()), TrainPhase(Stage.JOINT, 1, 0),
                           Ablations(no_ccl=True, no_seg_after_tau=True))
    assert loss is None and rep["joint"] == 0.0
    assert needed_outputs(TrainPhase(Stage.JOINT, 1, 0), Ablations(no_ccl=True, no_seg_after_tau=True)) == set()


def _grads(model):
    return [p.grad.clone() if p.grad is not None else torch.zeros_like(p) for p in model.parameters()]


def test_target_model_gets_no_gradient_before_tau():
    f_s, f_t = tiny_model(), tiny_model(Role.TARGET_EXPERT, 1)
    x, y = images(), images(domain=DomainTag.TARGET, seed=1)
    gt = Mask((torch.rand(2, 16, 16) > 0.7).to(torch.uint8))
    w = wire_batch(f_s, f_t, x, y, y, x, gt)
    loss, _ = joint_loss(w, TrainPhase(Stage.JOINT, 5, 5))
    loss.backward()
    assert all(p.grad is None for p in f_t.parameters())
    assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in f_s.parameters())


def test_consistency_terms_never_reach_source_model():
    f_s, f_t = tiny_model(), tiny_model(Role.TARGET_EXPERT, 1)
    x, y = images(), images(domain=DomainTag.TARGET, seed=1)
    w = wire_batch(f_s, f_t, x, y, y, x, Mask(torch.zeros(2, 16, 16, dtype=torch.uint8)))
    _, rep = joint_loss(w, TrainPhase(Stage.JOINT, 1, 0), Ablations(no_seg_after_tau=True))
    loss = ccl_loss(w.f_t_yhat, w.f_s_x) + ccl_loss(w.f_t_y, w.f_s_xhat)
    assert loss.item() == pytest.approx(rep["ccl"], rel=1e-6)
    loss.backward()
    assert all(p.grad is None for p in f_s.parameters())
    assert any(p.grad is not None for p in f_t.parameters())


def test_bidirectional_flag_lets_gradient_through():
    f_s, f_t = tiny_model(), tiny_model(Role.TARGET_EXPERT, 1)
    x, y = images(), images(domain=DomainTag.TARGET, seed=1)
    w = wire_batch(f_s, f_t, x, y, y, x, Mask(torch.zeros(2, 16, 16, dtype=torch.uint8)))
    loss, _ = joint_loss(w, TrainPhase(Stage.JOINT, 1, 0), Ablations(no_seg_after_tau=True, bidirectional_ccl=True))
    loss.backward()
    assert any(p.grad is not None for p in f_s.parameters())


# -- prediction

class FixedProbs(torch.nn.Module):
    def __init__(self, vessel):
        super().__init__()
        self.vessel = vessel

    def forward(self, batch):
        return probmap(self.vessel.expand(len(batch), *self.vessel.shape[-2:]))


def test_predict_confident_vessel():
    m = predict(FixedProbs(torch.full((4, 4), 0.9)), images(2, 4))
    assert m.labels.shape == (2, 4, 4) and bool((m.labels == 1).all())


def test_predict_tie_goes_to_background():
    m = predict(FixedProbs(torch.full((4, 4), 0.5)), images(1, 4))
    assert int(m.labels.sum()) == 0


def test_predict_checkerboard():
    idx = torch.arange(4)
    board = ((idx[:, None] + idx[None, :]) % 2).bool()
    probs = torch.where(board, torch.tensor(0.6), torch.tensor(0.4))
    m = predict(FixedProbs(probs), images(1, 4))
    expected = torch.tensor([[1 if (i + j) % 2 else 0 for j in range(4)] for i in range(4)], dtype=torch.uint8)
    assert torch.equal(m.labels[0], expected)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(-20, 20))
def test_prediction_invariant_to_logit_shift(seed, scale):
    g = torch.Generator().manual_seed(seed)
    logits = torch.randn(1, 2, 5, 5, generator=g, dtype=torch.float64)
    shift = torch.randn(1, 1, 5, 5, generator=g, dtype=torch.float64) * scale
    a = probs_to_mask(normalize_probs(logits)).labels
    b = probs_to_mask(normalize_probs(logits + shift)).labels
    assert torch.equal(a, b)


def test_predict_restores_training_mode():
    m = tiny_model()
    m.train()
    predict(m, images(1, 16))
    assert m.training
