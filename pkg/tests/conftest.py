import sys

import numpy as np
import pytest
import torch

from lcco.backbone import BackboneSpec
from lcco.clip_provider import FixtureClip, PromptBank
from lcco.harness import CoSegmenter
from lcco.model import CoSegNet, ModelConfig
from lcco.toy import make_toy_set, toy_fixtures

VOCAB = ["red disk", "green disk", "blue disk", "cat", "dog", "car"]
DIM = 32
SIZE = 64


def central_fd_grad(fn, inputs, h=1e-6):
    """Central finite-difference gradient of the scalar ``fn(*inputs)`` for every input."""
    grads = []
    for x in inputs:
        g = torch.zeros_like(x)
        flat, gflat = x.view(-1), g.view(-1)
        for k in range(flat.numel()):
            orig = flat[k].item()
            flat[k] = orig + h
            up = fn(*inputs).item()
            flat[k] = orig - h
            down = fn(*inputs).item()
            flat[k] = orig
            gflat[k] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def grad_rel_error(fn, inputs, seed=0):
    """Max over inputs of ||autograd - FD|| / ||FD|| for a random projection of ``fn``'s output."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        out = fn(*inputs)
    w = torch.randn(out.shape, generator=gen, dtype=torch.float64)

    def scalar(*xs):
        return (fn(*xs) * w).sum()

    leaves = [x.detach().clone().requires_grad_(True) for x in inputs]
    analytic = torch.autograd.grad(scalar(*leaves), leaves)
    with torch.no_grad():
        numeric = central_fd_grad(scalar, [x.detach().clone() for x in inputs])
    errs = []
    for a, n in zip(analytic, numeric):
        errs.append(float((a - n).norm() / max(n.norm(), 1e-12)))
    return max(errs)


@pytest.fixture
def vocab():
    return list(VOCAB)


@pytest.fixture
def bank():
    return PromptBank(tuple(VOCAB))


@pytest.fixture
def toy_set():
    return make_toy_set(n=5, size=SIZE, class_index=0, seed=1)


@pytest.fixture
def toy_clip(toy_set, bank):
    return FixtureClip(toy_fixtures([(toy_set, 0)], bank, dim=DIM))


def small_model(seed=0, **toggles) -> CoSegNet:
    torch.manual_seed(seed)
    cfg = ModelConfig(input_size=(SIZE, SIZE), backbone=BackboneSpec(), clip_dim=DIM,
                      num_prompts=len(VOCAB), k=3, **toggles)
    return CoSegNet(cfg)


@pytest.fixture
def segmenter(toy_clip, bank):
    return CoSegmenter(small_model(), toy_clip, bank)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        subs = mod.RESULTS[n]
        ok = all(passed for _, passed, _ in subs)
        detail = "; ".join(f"{name}: {'ok' if passed else 'FAILED'} ({d})" for name, passed, d in subs)
        tr.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
