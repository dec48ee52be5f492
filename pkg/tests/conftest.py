from __future__ import annotations

import numpy as np
import pytest

from elrea import adapters, corpus, model


@pytest.fixture(scope="session")
def vocab():
    return corpus.Vocab()


def tiny_config(**over):
    base = dict(vocab_size=99, d_model=16, n_layers=2, n_heads=2, d_ff=24, max_len=64)
    base.update(over)
    return model.LmConfig(**base)


def random_adapter(config, r, seed, dropout_p=0.0, targets=None):
    """Adapter with both factors nonzero so gradients flow through A and B."""
    a = adapters.init_lora(config, r, seed, dropout_p=dropout_p, targets=targets)
    rng = np.random.default_rng([seed, 7])
    for name in a.names():
        A, B = a.layers[name]
        a.layers[name] = (
            A + 0.1 * rng.standard_normal(A.shape),
            0.1 * rng.standard_normal(B.shape),
        )
    return a


def make_seq(vocab, instruction, response, seq_id="t-0"):
    ex = corpus.Example(id=seq_id, instruction=instruction, response=response)
    return corpus.tokenize(ex, vocab)
