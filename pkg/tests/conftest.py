import sys
from pathlib import Path

import numpy as np
import pytest
import torch

from darslp.skeleton import SkeletonLayout

sys.path.insert(0, str(Path(__file__).parent))

torch.set_num_threads(1)

# a small layout keeps loop-based oracles fast; shoulders at the default indices
SMALL_LAYOUT = SkeletonLayout({"body": 4, "right_hand": 3, "left_hand": 3, "face": 5})


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_layout():
    return SMALL_LAYOUT


def random_pose(rng, t, layout, spread=1.0):
    """Random pose sequence with well-separated shoulders."""
    x = rng.normal(scale=spread, size=(t, layout.total_joints, 3))
    x[:, layout.left_shoulder_idx] = x[:, layout.right_shoulder_idx] + rng.uniform(0.5, 2.0, size=(t, 3))
    return x


class Trained:
    """Artifacts of one desk-scale training run, shared across the session."""


# desk-scale generator: small enough for CPU, large enough to fit the synthetic corpus
DESK_GEN = dict(d_model=128, enc_layers=2, dec_layers=2, enc_heads=4, dec_heads=4, ffn_dim=256, T_max=64,
                dropout=0.1, norm_first=True, lr=5e-4, batch_size=16)


@pytest.fixture(scope="session")
def trained():
    from darslp.autoencoder import AEConfig, extract_latents, train_ae
    from darslp.corpus import split_samples, synth_corpus
    from darslp.generator import GeneratorConfig, split_losses, train_generator
    from darslp.latent_stats import compute_priors

    t = Trained()
    t.samples = synth_corpus(0, 120, 12, 12, T_max=64)
    sp = split_samples(t.samples)
    t.train, t.dev = sp["train"], sp["dev"]
    t.ae = train_ae(t.train, AEConfig(max_steps=2000, epochs=10_000), dev=t.dev)
    t.lat = extract_latents(t.samples, t.ae)
    t.prior = compute_priors([t.lat[s.id] for s in t.train], layout_hash=t.ae.layout_hash, source="train")
    cfg1 = GeneratorConfig(**DESK_GEN, max_epochs=400, phase=1)
    t.g1 = train_generator(t.train, t.lat, t.ae, cfg1, prior=t.prior, dev=t.dev)
    cfg2 = GeneratorConfig(**{**cfg1.to_dict(), "phase": 2, "max_epochs": 60})
    t.g2 = train_generator(t.train, t.lat, t.ae, cfg2, prior=t.prior, dev=t.dev, init=t.g1)
    t.dev_p1 = split_losses(t.g1, t.dev, t.lat, t.prior)
    t.dev_p2 = split_losses(t.g2, t.dev, t.lat, t.prior)
    return t


@pytest.fixture(scope="session")
def ae32():
    """Autoencoder overfit on a 32-sample synthetic corpus for at most 2000 steps."""
    import time

    from darslp.autoencoder import AEConfig, train_ae
    from darslp.corpus import synth_corpus

    samples = synth_corpus(11, 32, 8, 8, T_max=64)
    start = time.perf_counter()
    ckpt = train_ae(samples, AEConfig(max_steps=2000, epochs=10_000))
    ckpt.elapsed = time.perf_counter() - start
    return samples, ckpt


def pytest_collection_modifyitems(items):
    for item in items:
        if {"trained", "ae32"} & set(getattr(item, "fixturenames", ())) or item.module.__name__ == "test_acceptance":
            item.add_marker(pytest.mark.slow)
