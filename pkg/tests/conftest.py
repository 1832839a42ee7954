import numpy as np
import pytest
import torch

from micap.model import MICapModel, ModelConfig
from micap.synthdata import generate_dataset

torch.set_num_threads(1)


def tiny_config(vocab_size, **kw):
    base = dict(vocab_size=vocab_size, dim=16, heads=2, encoder_layers=1, combiner_layers=1,
                decoder_layers=1, frame_hw=(8, 8), patch=4, max_frames=4, audio_len=12,
                caption_len=16, max_len=8)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture(scope="session")
def tiny_archive():
    return generate_dataset(12, seed=3, dims=(8, 8), frames=2, test_count=4, references=2)


@pytest.fixture
def tiny_model(tiny_archive):
    torch.manual_seed(0)
    return MICapModel(tiny_config(len(tiny_archive.vocab))).eval()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(mod.RESULTS):
        terminalreporter.write_line(line)
