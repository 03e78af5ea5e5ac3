import warnings

import pytest

from gct.lexicon import default_concept_bank
from gct.llm import StubLLM
from gct.simulator import make_corpus, make_subject

from helpers import fit_bundles

warnings.filterwarnings("ignore", message=".*constant voxel column.*")


@pytest.fixture(scope="session")
def bank():
    return default_concept_bank()


@pytest.fixture(scope="session")
def stub(bank):
    return StubLLM(concept_bank=bank)


@pytest.fixture(scope="session")
def fitted(bank):
    """A small fitted setup shared across explanation/story/driving tests:
    24 voxels at moderate noise, two hashed-feature bundles, the catalog."""
    subject, ledger = make_subject(n_voxels=24, concept_bank=bank, noise_sd=0.8, seed=5)
    stories = make_corpus(bank, n_stories=10, words_per_story=420, seed=5)
    bundle_a, bundle_b, catalog = fit_bundles(subject, stories[:8], stories[8:])
    return {
        "subject": subject,
        "ledger": ledger,
        "stories": stories,
        "bundle_a": bundle_a,
        "bundle_b": bundle_b,
        "catalog": catalog,
    }
