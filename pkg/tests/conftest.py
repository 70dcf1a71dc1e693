import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent))

from xdomcap import autodiff as ad  # noqa: E402
from xdomcap.captioner import Captioner, CaptionerConfig  # noqa: E402
from xdomcap.data import WorldConfig, generate_world  # noqa: E402

DATA = Path(__file__).resolve().parent / "data"


def grad_check(loss_fn, tensors, h=1e-5):
    """Largest relative error between backprop and central differences.

    ``loss_fn`` rebuilds the scalar loss from scratch on every call, so it
    must be deterministic (seed any RNG inside it).
    """
    for t in tensors:
        t.grad = np.zeros_like(t.data)
    loss_fn().backward()
    analytic = [t.grad.copy() for t in tensors]
    worst = 0.0
    for t, g in zip(tensors, analytic):
        def f():
            with ad.no_grad():
                return loss_fn().item()
        num = ad.numerical_grad(f, t.data, h)
        worst = max(worst, ad.relative_error(g, num))
    return worst


@pytest.fixture(scope="session")
def small_world():
    cfg = WorldConfig(n_source=300, n_target_images=150, n_target_sentences=150, n_eval=60, n_finetune=60,
                      min_frequency=1)
    return generate_world(cfg, seed=0)


@pytest.fixture
def tiny_captioner(small_world):
    cfg = CaptionerConfig(vocab_size=len(small_world.vocab), feature_dim=small_world.config.feature_dim,
                          embed_dim=6, hidden_dim=7, t_max=20)
    return Captioner(cfg, seed=3)
