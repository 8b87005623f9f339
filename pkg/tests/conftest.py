import dataclasses

import numpy as np
import pytest
import torch

from vlhumor.corpus import DatasetManifest, ManifestEntry
from vlhumor.model import ModelConfig
from vlhumor.signal_prep import ProcessedSample


def pytest_collection_modifyitems(items):
    # run the (slow) acceptance module after everything else
    items.sort(key=lambda item: item.fspath.basename == "test_acceptance.py")


TINY = dict(
    dim=8, heads=2, layers=1, dropout=0.1,
    frames=4, frame_size=8, vision_patch=(2, 4, 4),
    mel_bins=8, audio_patch=(4, 4), max_mel_frames=16,
    max_sentence_tokens=4, max_comments=2,
    vocab_size=16, classifier_hidden=8, ffn_mult=2,
)


@pytest.fixture
def tiny_config():
    return ModelConfig(**TINY)


def make_tiny_sample(i: int, label=None, title_len=3, comment_lens=(2, 1),
                     mel_frames=16) -> ProcessedSample:
    rng = np.random.default_rng(1000 + i)
    title = [int(rng.integers(4, 16)) for _ in range(title_len)]
    comments = [[int(rng.integers(4, 16)) for _ in range(n)] for n in comment_lens]
    return ProcessedSample(
        id=f"tiny-{i:03d}",
        vision=rng.random((4, 3, 8, 8), dtype=np.float32),
        mel=rng.random((mel_frames, 8), dtype=np.float32),
        title_tokens=title,
        comment_tokens=comments,
        label=label,
    )


class FakeDataset:
    """Duck-typed stand-in for PrepDataset over in-memory tiny samples."""

    def __init__(self, n_unlabeled=6, n_labeled=8, vocab=16):
        self._vocab = vocab
        self.samples = {}
        order = []
        for i in range(n_unlabeled):
            s = make_tiny_sample(i, label=None)
            self.samples[s.id] = s
            order.append(s.id)
        for j in range(n_labeled):
            s = make_tiny_sample(n_unlabeled + j, label=j % 2)
            self.samples[s.id] = s
            order.append(s.id)
        self._order = order
        entries = [
            ManifestEntry(id=s, vision="v", audio="a", title="t", comments=[],
                          label=self.samples[s].label)
            for s in order
        ]
        self.manifest = DatasetManifest(entries=entries, provenance="fake")

    @property
    def ids(self):
        return list(self._order)

    @property
    def unlabeled_ids(self):
        return [s for s in self._order if self.samples[s].label is None]

    @property
    def labeled_ids(self):
        return [s for s in self._order if self.samples[s].label is not None]

    def label(self, sample_id):
        return self.samples[sample_id].label

    def vocab_size(self):
        return self._vocab

    def load(self, sample_id):
        s = self.samples[sample_id]
        return dataclasses.replace(
            s,
            vision=s.vision.copy(),
            mel=s.mel.copy(),
            title_tokens=list(s.title_tokens),
            comment_tokens=[list(c) for c in s.comment_tokens],
        )

    def split(self, sizes, seed):
        from vlhumor.corpus import split_labeled

        return split_labeled(self.manifest, sizes, seed)


@pytest.fixture
def fake_dataset():
    return FakeDataset()


def finite_difference_gradient(fn, params: list[torch.Tensor], h: float = 1e-6) -> torch.Tensor:
    """Central differences of a scalar function of the given parameter tensors."""
    grads = []
    with torch.no_grad():
        for p in params:
            flat = p.view(-1)
            g = torch.zeros_like(flat)
            for i in range(flat.numel()):
                keep = flat[i].item()
                step = h * max(1.0, abs(keep))
                flat[i] = keep + step
                up = fn()
                flat[i] = keep - step
                down = fn()
                flat[i] = keep
                g[i] = (up - down) / (2 * step)
            grads.append(g)
    return torch.cat(grads)


def relative_gradient_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    denom = max(analytic.norm().item(), numeric.norm().item(), 1e-12)
    return (analytic - numeric).norm().item() / denom
