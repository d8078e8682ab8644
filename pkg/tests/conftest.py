import numpy as np
import pytest
from hypothesis import settings

from fcsim import channel as ch
from fcsim import system as sy

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


def tiny_system(kind="orth_awgn", n_nodes=2, k=2, sigma2=0.1, normalize=False, decoder="standard",
                task="classification", out_dim=3, in_dim=3, seed=0, embedded=False, trainable_embed=False):
    spec = ch.ChannelSpec.make(kind, n_nodes, k, 1.0, sigma2)
    if embedded:
        emb = ch.make_embedding(spec.k_total, n_nodes, seed)
        encs = [sy.build_embedded_encoder(in_dim, emb, seed, n, 3, (4,)) for n in range(n_nodes)]
        if trainable_embed:
            encs = [e.lift() for e in encs]
    else:
        encs = [sy.build_encoder(in_dim, kk, seed, n, (4,)) for n, kk in enumerate(spec.k_per_node)]
    dec_in = sy.System.decoder_in_dim(spec, decoder)
    dec = sy.build_decoder(dec_in, out_dim, seed, decoder, (5,))
    return sy.System(spec, encs, dec, task, normalize)


def set_flat(system, vec):
    """Copy of ``system`` whose trainable parameters are ``vec``."""
    out = system.copy()
    i = 0
    for p in out.params():
        p[...] = vec[i:i + p.size].reshape(p.shape)
        i += p.size
    assert i == vec.size
    return out


def flat_params(system):
    return np.concatenate([p.ravel() for p in system.params()])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_VERDICTS: dict[int, str] = {}


@pytest.fixture(scope="session")
def verdict():
    """Record and print one PASS/FAIL line for an acceptance criterion."""

    def record(number: int, title: str, passed: bool, detail: str) -> bool:
        line = f"{'PASS' if passed else 'FAIL'} [{number:2d}] {title}: {detail}"
        _VERDICTS[number] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_VERDICTS):
            terminalreporter.write_line(_VERDICTS[n])
