import numpy as np
import pytest
import torch

from dcda.types import set_prob_checks


@pytest.fixture(autouse=True)
def _prob_checks():
    set_prob_checks(True)
    yield
    set_prob_checks(False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def central_difference(fn, x: torch.Tensor, h: float = 1e-6) -> torch.Tensor:
    """Numerical gradient of scalar ``fn`` at ``x`` by central differences (float64)."""
    x = x.detach().clone().double()
    grad = torch.zeros_like(x)
    flat, gflat = x.view(-1), grad.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + h
        up = fn(x).item()
        flat[i] = orig - h
        down = fn(x).item()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad


def autograd_grad(fn, x: torch.Tensor) -> torch.Tensor:
    x = x.detach().clone().double().requires_grad_(True)
    (g,) = torch.autograd.grad(fn(x), x)
    return g


def rel_error(a: torch.Tensor, b: torch.Tensor) -> float:
    return ((a - b).abs().max() / b.abs().max().clamp_min(1e-12)).item()


TINY_OVERRIDES = dict(
    seed=1, image_size=16, batch_size=4, deterministic=True,
    epochs__drst=2, epochs__source=2, epochs__joint=2,
    data__test_count=4, data__split_seed=1,
    drst__enc_base=4, drst__content_ch=8, drst__style_dim=4, drst__n_down=2, drst__n_res=1,
    drst__disc_base=4, drst__disc_layers=2, drst__content_disc_base=4,
    seg__encoder_depth=2, seg__base_channels=4,
)


@pytest.fixture(scope="session")
def tiny_root(tmp_path_factory):
    from dcda.data import PhantomSpec, generate_phantoms

    root = tmp_path_factory.mktemp("tiny_phantoms")
    generate_phantoms(PhantomSpec(seed=2, image_size=16, n_images=12, test_count=4, width=(1.0, 2.0)), root)
    return root


@pytest.fixture
def tiny_config(tiny_root, tmp_path):
    from dcda import config as C

    return C.replace(C.RunConfig(), data__root=str(tiny_root), out_dir=str(tmp_path / "run"), **TINY_OVERRIDES)
