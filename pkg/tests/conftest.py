from dataclasses import replace

import pytest
from hypothesis import settings

from twinembed.presets import toy_setup
from twinembed.train import modulus_mismatch, train

settings.register_profile("repro", derandomize=True, deadline=None, print_blob=True)
settings.load_profile("repro")

# criterion number -> (passed, detail), filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def toy():
    return toy_setup()


@pytest.fixture(scope="session")
def toy_runs(toy):
    """Full-loss and NCE-only 200-step runs from one shared initialisation."""
    base = toy.init_model(0)
    runs = {"init": base.copy(), "mm_init": modulus_mismatch(base, toy.probe, toy.train_cfg.seed)}
    for name, mask in (("full", ("nce", "icnce", "ictm")), ("nce", ("nce",))):
        runs[name] = train(base.copy(), toy.sentences, toy.vocab, toy.sts_dev, replace(toy.train_cfg, loss_mask=mask))
        runs[f"mm_{name}"] = modulus_mismatch(runs[name].model, toy.probe, toy.train_cfg.seed)
    return runs
