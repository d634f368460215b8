"""Analytic gradients vs central finite differences for every loss.

Step 1e-5 in float64; max relative error must stay under 1e-4. The dice
predictions are drawn inside [0.1, 0.9] so the perturbed points stay in the
probability domain.
"""

import torch

from segkd.losses import combined_loss, dice_loss, mse_loss, perceptual_loss

STEP = 1e-5
MAX_REL_ERR = 1e-4


def central_difference(fn, x, step=STEP):
    grad = torch.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + step
        hi = fn()
        flat[i] = orig - step
        lo = fn()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * step)
    return grad


def assert_gradients_match(analytic, numeric):
    scale = numeric.abs().max().clamp(min=1.0)
    rel = (analytic - numeric).abs().max() / scale
    assert rel < MAX_REL_ERR, f"gradient mismatch: rel err {rel:.3e}"


def _shapes(gen, count):
    for _ in range(count):
        b = int(torch.randint(1, 3, (1,), generator=gen))
        c = int(torch.randint(1, 5, (1,), generator=gen))
        h = int(torch.randint(2, 6, (1,), generator=gen))
        w = int(torch.randint(2, 6, (1,), generator=gen))
        yield b, c, h, w


def test_mse_gradients():
    gen = torch.Generator().manual_seed(101)
    for shape in _shapes(gen, 6):
        teacher = torch.randn(*shape, generator=gen, dtype=torch.float64)
        student = torch.randn(*shape, generator=gen, dtype=torch.float64, requires_grad=True)
        loss = mse_loss(teacher, student)
        loss.total.backward()
        numeric = central_difference(
            lambda: mse_loss(teacher, student.detach()).item(), student.detach()
        )
        assert_gradients_match(student.grad, numeric)


def test_perceptual_gradients():
    gen = torch.Generator().manual_seed(202)
    for shape in _shapes(gen, 5):
        teacher = [
            torch.randn(*shape, generator=gen, dtype=torch.float64),
            torch.randn(shape[0], 2, 3, 3, generator=gen, dtype=torch.float64),
        ]
        student = [
            torch.randn(*shape, generator=gen, dtype=torch.float64, requires_grad=True),
            torch.randn(shape[0], 2, 3, 3, generator=gen, dtype=torch.float64,
                        requires_grad=True),
        ]
        loss = perceptual_loss(teacher, student)
        loss.total.backward()
        for t_list_idx in range(2):
            detached = [s.detach() for s in student]

            def fn(idx=t_list_idx, snapshot=detached):
                return perceptual_loss(teacher, snapshot).item()

            numeric = central_difference(fn, detached[t_list_idx])
            assert_gradients_match(student[t_list_idx].grad, numeric)


def test_combined_gradients():
    gen = torch.Generator().manual_seed(303)
    for shape in _shapes(gen, 5):
        teacher = torch.randn(*shape, generator=gen, dtype=torch.float64)
        tf = [torch.randn(shape[0], 3, 2, 2, generator=gen, dtype=torch.float64)]
        student = torch.randn(*shape, generator=gen, dtype=torch.float64, requires_grad=True)
        sf = [torch.randn(shape[0], 3, 2, 2, generator=gen, dtype=torch.float64,
                          requires_grad=True)]
        loss = combined_loss(teacher, student, tf, sf)
        loss.total.backward()

        s_detached = student.detach()
        numeric = central_difference(
            lambda: combined_loss(teacher, s_detached, tf, [sf[0].detach()]).item(),
            s_detached,
        )
        assert_gradients_match(student.grad, numeric)
        f_detached = sf[0].detach()
        numeric_f = central_difference(
            lambda: combined_loss(teacher, s_detached, tf, [f_detached]).item(),
            f_detached,
        )
        assert_gradients_match(sf[0].grad, numeric_f)


def test_dice_gradients():
    gen = torch.Generator().manual_seed(404)
    for shape in _shapes(gen, 6):
        b, _, h, w = shape
        pred = (0.1 + 0.8 * torch.rand(b, 1, h, w, generator=gen, dtype=torch.float64))
        pred.requires_grad_(True)
        truth = (torch.rand(b, 1, h, w, generator=gen, dtype=torch.float64) > 0.5).double()
        loss = dice_loss(pred, truth)
        loss.total.backward()
        detached = pred.detach()
        numeric = central_difference(lambda: dice_loss(detached, truth).item(), detached)
        assert_gradients_match(pred.grad, numeric)
