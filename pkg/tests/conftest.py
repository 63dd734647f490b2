import sys
import numpy as np
import pytest

from xpsearch.corpus import load_corpus
from xpsearch.model import ModelConfig, train
from xpsearch.store import init_store
from xpsearch.synth import SynthSpec, synthetic_corpus

TINY_TRIPLES = """\
item\ti1\tbrand\tbrand\tacme
item\ti2\tbrand\tbrand\tacme
item\ti3\tbrand\tbrand\tzeta
item\ti1\tcategory\tcategory\tcases
item\ti2\tcategory\tcategory\tpens
item\ti3\tcategory\tcategory\tcases
item\ti1\tbought_together\titem\ti2
item\ti2\talso_bought\titem\ti3
item\ti3\talso_viewed\titem\ti1
"""

TINY_PURCHASES = """\
u1\tTablet Case\ti1\ttrain
u1\tstylus pen\ti2\ttrain
u2\ttablet case\ti3\ttrain
u2\tstylus pen\ti2\ttest
u3\tblue case\ti1\ttrain
u3\ttablet case\ti1\ttest
"""


def write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


@pytest.fixture
def tiny_files(tmp_path):
    return write(tmp_path / "triples.tsv", TINY_TRIPLES), write(tmp_path / "purchases.tsv", TINY_PURCHASES)


@pytest.fixture
def tiny_corpus(tiny_files):
    return load_corpus(*tiny_files)


@pytest.fixture
def tiny_store(tiny_corpus):
    return init_store(tiny_corpus.sizes(), 4, 2, "drem", seed=0)


@pytest.fixture(scope="session")
def synth(tmp_path_factory):
    corpus, gt = synthetic_corpus(SynthSpec(), 1, tmp_path_factory.mktemp("synth"))
    return corpus, gt


@pytest.fixture(scope="session")
def small_synth(tmp_path_factory):
    spec = SynthSpec(users=30, items=24, brands=4, categories=3, queries=9, purchases_per_user=4)
    return synthetic_corpus(spec, 3, tmp_path_factory.mktemp("small"))[0]


@pytest.fixture(scope="session")
def small_models(small_synth):
    """Briefly trained DREM and DREM-HGN stores on the small synthetic corpus."""
    out = {}
    for kind in ("drem", "drem_hgn"):
        out[kind] = train(small_synth, ModelConfig(dim=8, epochs=3, model=kind, seed=5)).store
    return out


def random_store(corpus, alpha=8, beta=2, kind="drem", seed=0, scale=0.5):
    """A store with N(0, scale) parameters so gradients are far from zero."""
    store = init_store(corpus.sizes(), alpha, beta, kind, seed=seed)
    rng = np.random.default_rng(seed + 100)
    for name in store.table_order():
        store.params[name][...] = rng.normal(0.0, scale, size=store.params[name].shape)
    return store


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
