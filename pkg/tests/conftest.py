import numpy as np
import pytest

from ramlc.encoder import EncoderConfig, VanillaClassifier
from ramlc.text_data import SynthParams, synth_generate

TINY = SynthParams(n_labels=6, n_train=40, n_dev=12, n_test=12, n_unlabeled=5, doc_len=(5, 12),
                   vocab_size=60, pool_size=4, seed=7)


@pytest.fixture(scope="session")
def tiny_corpus():
    return synth_generate(TINY)


def make_vanilla(corpus, dim=8, layers=1, heads=2, seed=0, dtype=np.float64, dropout=0.0):
    config = EncoderConfig(vocab_size=len(corpus.vocab), dim=dim, enc_layers=layers, enc_heads=heads,
                           ffn_dim=2 * dim, max_seq_len=corpus.max_seq_len, dropout=dropout)
    return VanillaClassifier(config, corpus.n_labels, corpus.vocab.fingerprint, seed=seed, dtype=dtype)


@pytest.fixture
def tiny_vanilla(tiny_corpus):
    return make_vanilla(tiny_corpus)


@pytest.fixture(scope="session")
def trained_pair(tiny_corpus):
    """A briefly trained phase-one model, its repository and a trained phase-two model."""
    from ramlc.ra_model import CrossAttentionConfig
    from ramlc.retrieval import build_repository
    from ramlc.trainer import TrainConfig, train_ra, train_vanilla

    enc = EncoderConfig(vocab_size=len(tiny_corpus.vocab), dim=16, enc_layers=1, enc_heads=2, ffn_dim=32,
                        max_seq_len=tiny_corpus.max_seq_len, dropout=0.0)
    cfg = TrainConfig(learning_rate=3e-3, batch_size=8, max_epochs=6, patience=6, seed=0)
    vanilla, _ = train_vanilla(cfg, tiny_corpus, enc)
    repo = build_repository(vanilla, tiny_corpus)
    ra, _ = train_ra(cfg, tiny_corpus, repo, vanilla, CrossAttentionConfig(ca_layers=1, ca_heads=2, k=3))
    return vanilla, repo, ra


# one line per acceptance criterion, printed after the test session
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
