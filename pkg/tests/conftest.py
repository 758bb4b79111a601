import pytest
import torch

from dualmotion.lora import inject
from dualmotion.schedule import make_schedule
from dualmotion.unet import build_unet, micro_config

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def schedule():
    return make_schedule()


def perturb_(model, std=0.05, seed=123):
    """Give zero-initialized output projections some weight so every path carries signal."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if "proj_out" in name or torch.count_nonzero(p) == 0:
                p.add_(torch.randn(p.shape, generator=g, dtype=p.dtype) * std)
    return model


def analytic_gradients(model, sets, trainable, loss_fn):
    with inject(model, sets, trainable=[trainable]):
        return [g.detach() for g in torch.autograd.grad(loss_fn(), list(trainable.parameters()))]


def central_differences(model, sets, trainable, loss_fn, h):
    """Central-difference gradient of ``loss_fn`` for every factor of ``trainable``, in float64."""
    out = []
    with torch.no_grad():
        for p in trainable.parameters():
            fd = torch.zeros(p.shape, dtype=torch.float64)
            flat = p.view(-1)
            for idx in range(flat.numel()):
                orig = flat[idx].item()
                flat[idx] = orig + h
                with inject(model, sets):
                    up = loss_fn().item()
                flat[idx] = orig - h
                with inject(model, sets):
                    down = loss_fn().item()
                flat[idx] = orig
                fd.view(-1)[idx] = (up - down) / (2 * h)
            out.append(fd)
    return out


def relative_error(grad, fd) -> float:
    g = grad.double()
    return ((g - fd).norm() / max(g.norm(), fd.norm(), 1e-12)).item()


@pytest.fixture
def micro():
    return perturb_(build_unet(micro_config(), seed=0)).eval()


@pytest.fixture
def micro64():
    return perturb_(build_unet(micro_config(), seed=0, dtype=torch.float64)).eval()


# criterion id -> (passed, detail); filled by test_acceptance.py and echoed after the run
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[cid]
        terminalreporter.write_line(f"{cid} {'PASS' if ok else 'FAIL'}  {detail}")
