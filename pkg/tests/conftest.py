import numpy as np
import pytest

from aide.core import ArchConfig, LabelRecord, Quality, Sample, TrainConfig


def random_mask(gen, shape, density=None):
    density = gen.uniform(0.05, 0.6) if density is None else density
    return (gen.random(shape) < density).astype(np.uint8)


def disk(size, cy, cx, r):
    yy, xx = np.mgrid[:size, :size]
    return ((yy - cy) ** 2 + (xx - cx) ** 2 <= r * r).astype(np.uint8)


def toy_samples(n=8, size=16, n_hq=2, seed=0, noisy=True):
    """Small disks with truth; LQ labels are shifted by one pixel."""
    gen = np.random.default_rng(seed)
    out = []
    for i in range(n):
        truth = disk(size, gen.integers(5, size - 5), gen.integers(5, size - 5), gen.uniform(2.5, 4))
        image = (0.2 + 0.6 * truth + 0.05 * gen.standard_normal((size, size))).clip(0, 1)[None].astype(np.float32)
        hq = i < n_hq
        label = truth if hq or not noisy else np.roll(truth, 1, axis=1)
        out.append(Sample(f"s{i:02d}", image, LabelRecord(f"s{i:02d}", label, Quality.HQ if hq else Quality.LQ),
                          truth))
    return out


def tiny_config(**kw):
    base = dict(Q=2, q_w=1, B=4, lr=0.05, K=2, arch=ArchConfig(base_channels=2, depth=3))
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture
def gen():
    return np.random.default_rng(12345)


# filled by test_acceptance.py, printed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
