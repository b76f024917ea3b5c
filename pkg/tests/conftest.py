import pytest
import torch

from plcr.backbone import BackboneConfig
from plcr.model import PromptConfig, build_model
from plcr.pipeline import prepare_dataset, pretrain_backbone
from plcr.synthgen import SynthConfig, gen_dual_domain

torch.set_num_threads(1)

TOY_SYNTH = SynthConfig(n_clusters=2, users_per_domain=60, items_per_domain=20, min_len=6,
                        max_len=8, p_in=0.9, seed=3)
TOY_BACKBONE = BackboneConfig(d=8, blocks=1, heads=1, max_len=10, dropout=0.0, optimizer="adam",
                              lr=1e-2, epochs=5, batch_size=32, patience=0, seed=0)
TOY_PROMPT = PromptConfig(m1=2, m2=2, blocks=1, dropout=0.0)


@pytest.fixture(scope="session")
def toy_data():
    log_a, log_b = gen_dual_domain(TOY_SYNTH)
    return prepare_dataset(log_a, log_b, k=5, max_len=10, seed=0)


@pytest.fixture(scope="session")
def toy_backbone(toy_data):
    return pretrain_backbone(toy_data, TOY_BACKBONE, dtype=torch.float64)


@pytest.fixture
def toy_model(toy_data, toy_backbone):
    return build_model(toy_backbone, toy_data.id_ranges, TOY_PROMPT, seed=0)


# (criterion number, title, passed, detail) rows recorded by the acceptance suite
ACCEPTANCE_RESULTS: list[tuple[int, str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num, title, ok, detail in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(f"criterion {num:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
