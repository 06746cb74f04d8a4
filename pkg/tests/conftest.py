import numpy as np
import pytest

from classroomsep.binaural import Brir, synthetic_hrir_set
from classroomsep.democorpus import make_demo_babble_corpus, make_demo_corpus
from classroomsep.motion import BrirBank
from classroomsep.scenes import ScenePools, ingest_corpus


@pytest.fixture(scope="session")
def hrir_set():
    return synthetic_hrir_set()


@pytest.fixture(scope="session")
def anechoic_banks(hrir_set):
    """Free-field banks (BRIR == head filter) for two rooms at 1.0 m."""
    banks = {}
    for room_id in (0, 1):
        brirs = {
            az: Brir(hrir_set.get(az), az, room_id, 1.0, hrir_set.rate)
            for az in hrir_set.irs
        }
        banks[(room_id, 1.0)] = BrirBank(
            brirs, room_id, 1.0, hrir_set.rate, listener_position=(4.0, 4.0, 1.2)
        )
    return banks


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    speech = make_demo_corpus(root / "speech", seed=101, n_child=3, n_adult=3,
                              utterances_per_speaker=2)
    babble = make_demo_babble_corpus(root / "babble", seed=202, n_speakers=4)
    return {"speech": speech, "babble": babble}


@pytest.fixture(scope="session")
def pools(corpus_dir):
    speech = ingest_corpus(corpus_dir["speech"])
    babble = ingest_corpus(corpus_dir["babble"], min_duration=0.0)
    return ScenePools(speech, babble)
