import pytest
import torch

torch.set_num_threads(1)

# one-line verdicts from test_acceptance.py, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[0][1:])):
            terminalreporter.write_line(line)


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(1234)


def unit_rows(gen, n, d, dtype=torch.float64):
    x = torch.randn(n, d, generator=gen, dtype=dtype)
    return x / x.norm(dim=1, keepdim=True)


def unit_maps(gen, b, d, h, w, dtype=torch.float64):
    x = torch.randn(b, d, h, w, generator=gen, dtype=dtype)
    return x / x.norm(dim=1, keepdim=True)


def rand_mask(gen, shape, dtype=torch.float64):
    return (torch.rand(shape, generator=gen, dtype=dtype) > 0.5).to(dtype)


@pytest.fixture(scope="session")
def toy_data(tmp_path_factory):
    """4 labeled + 8 unlabeled 32x32 synthetic images and a held-out set of 3."""
    from minmaxsim.data import disjoint_split, scan_dataset
    from minmaxsim.synthdata import SynthConfig, generate_dataset, generate_unlabeled_variants

    root = tmp_path_factory.mktemp("toy")
    cfg = SynthConfig(n_images=4, size=(32, 32), seed=21)
    generate_dataset(cfg, root)
    generate_unlabeled_variants(cfg, 2, root)
    generate_dataset(SynthConfig(n_images=3, size=(32, 32), seed=21), root / "test", prefix="tst", start=4)
    labeled, unlabeled = scan_dataset(root)
    test, _ = scan_dataset(root / "test")
    manifest = disjoint_split(labeled, 1.0, 0, unlabeled=unlabeled, test=test)
    return root, manifest
