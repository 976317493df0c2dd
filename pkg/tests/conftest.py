import numpy as np
import pytest

from duralign import autodiff as ad


@pytest.fixture
def f64():
    with ad.precision(64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_run(tmp_path_factory):
    """The default 2000-step training run, shared by the CLI and acceptance tests."""
    import time
    from types import SimpleNamespace

    from duralign.cli import train_to_files
    from duralign.config import RunConfig
    from duralign.data import generate_corpus, save_corpus

    root = tmp_path_factory.mktemp("toy")
    run = RunConfig()
    corpus = generate_corpus(run.corpus)
    save_corpus(corpus, root / "corpus.bin")
    start = time.perf_counter()
    trainer = train_to_files(run, corpus, root / "model.ckpt")
    return SimpleNamespace(run=run, corpus=corpus, trainer=trainer, seconds=time.perf_counter() - start,
                           corpus_path=root / "corpus.bin", checkpoint=root / "model.ckpt",
                           losses=root / "model.ckpt.losses.csv")


@pytest.fixture
def verdict(request):
    """Record one acceptance line; it is echoed now and again in the terminal summary."""
    lines = request.config.__dict__.setdefault("_acceptance_lines", [])

    def record(number: int, ok: bool, detail: str):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.__dict__.get("_acceptance_lines")
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
