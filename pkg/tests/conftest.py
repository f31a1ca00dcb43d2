import pytest

from residualgan.datakit import SyntheticDomainConfig, SyntheticSceneConfig, generate_synthetic_pair
from residualgan.train_a import StageAConfig
from residualgan.train_b import StageBConfig


def tiny_scene(n_src=8, n_tgt=8, seed=0):
    return SyntheticSceneConfig(
        source=SyntheticDomainConfig("src", 20.0, 112, n_src),
        target=SyntheticDomainConfig(
            "tgt", 36.0, 64, n_tgt, gain=(1.1, 0.75, 1.2), offset=(-0.05, 0.1, -0.1),
            val_fraction=0.25, test_fraction=0.25,
        ),
        seed=seed,
    )


def tiny_stage_a(**kw):
    kw.setdefault("gen_depth", 4)
    kw.setdefault("gen_width", 8)
    kw.setdefault("disc_width", 8)
    kw.setdefault("epochs", 1)
    kw.setdefault("deterministic", True)
    return StageAConfig(**kw)


def tiny_stage_b(**kw):
    kw.setdefault("encoder_scale", "tiny")
    kw.setdefault("encoder_width", 8)
    kw.setdefault("disc_width", 8)
    kw.setdefault("batch_size", 4)
    kw.setdefault("epochs", 1)
    kw.setdefault("deterministic", True)
    return StageBConfig(**kw)


@pytest.fixture(scope="session")
def tiny_pair(tmp_path_factory):
    """(source, target) manifests: 8 tiles each, 112 px at 20 cm and 64 px at 36 cm."""
    return generate_synthetic_pair(tiny_scene(), tmp_path_factory.mktemp("tiny_pair"))


_ACCEPTANCE: list[str] = []


@pytest.fixture(scope="session")
def acceptance():
    """Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""

    def record(number, passed, detail):
        line = f"{'PASS' if passed else 'FAIL'} criterion {number}: {detail}"
        _ACCEPTANCE.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
