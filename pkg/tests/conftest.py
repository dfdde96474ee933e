import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from flowspeak.data import Utterance  # noqa: E402
from flowspeak.model import ModelConfig, SCGlowTTS  # noqa: E402
from flowspeak.text import SymbolVocabulary  # noqa: E402


def tiny_config(**kw) -> ModelConfig:
    base = dict(n_vocab=12, n_mels=8, spk_dim=4, encoder_channels=16, encoder_blocks=2,
                encoder_dropout=0.0, transformer_filter=32, dp_filter=16, dp_dropout=0.0,
                flow_blocks=2, flow_hidden=16, flow_kernel=3, flow_layers=2, flow_dropout=0.0)
    base.update(kw)
    return ModelConfig(**base)


def tiny_model(seed=0, dtype=torch.float64, **kw) -> SCGlowTTS:
    torch.manual_seed(seed)
    return SCGlowTTS(tiny_config(**kw)).to(dtype)


def random_utterances(n=6, n_mels=8, spk_dim=4, n_vocab=12, seed=0, speakers=2) -> list[Utterance]:
    rng = np.random.default_rng(seed)
    spk_vecs = [rng.normal(size=spk_dim).astype(np.float32) for _ in range(speakers)]
    out = []
    for i in range(n):
        n_tok = int(rng.integers(3, 7))
        n_frm = int(rng.integers(2 * n_tok, 3 * n_tok + 4))
        out.append(Utterance(
            utt_id=f"u{i:02d}",
            ids=rng.integers(3, n_vocab, size=n_tok).astype(np.int64),
            mel=rng.normal(size=(n_frm, n_mels)).astype(np.float32),
            spk=spk_vecs[i % speakers],
            audio_path=f"/data/u{i:02d}.wav",
            speaker_id=f"s{i % speakers}",
        ))
    return out


def tiny_vocab() -> SymbolVocabulary:
    return SymbolVocabulary.build([list("abcdefghi")])


@pytest.fixture
def utterances():
    return random_utterances()


CRITERIA: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    """``criterion(n, ok, detail)`` records one acceptance line, then the test asserts."""

    def record(number: int, ok: bool, detail: str) -> bool:
        CRITERIA[number] = (bool(ok), detail)
        print(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        ok, detail = CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
