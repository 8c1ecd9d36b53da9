from __future__ import annotations

import pytest

from convforge.corpus import anonymize
from convforge.harness import resolve_settings
from convforge.lmbridge import TinyCausalLM, finetune_causal
from convforge.seqformat import encode_sl
from convforge.synthetic import synthetic_records

# filled by tests/test_acceptance.py, printed at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def tiny_settings():
    return resolve_settings("tiny")[0]


@pytest.fixture(scope="session")
def anon_records():
    return [anonymize(r)[0] for r in synthetic_records(200, seed=1)]


@pytest.fixture(scope="session")
def sl_model(anon_records, tiny_settings):
    """Tiny SL generator trained with the tiny profile on 200 synthetic records."""
    seqs = [encode_sl(r.summary, r.conversation) for r in anon_records]
    model = TinyCausalLM.from_texts([s.text for s in seqs])
    return finetune_causal(model, seqs, tiny_settings.generator)
