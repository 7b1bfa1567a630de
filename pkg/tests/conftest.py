"""Shared fixtures: the electrode layout, a small synthetic corpus, and a
detector trained on it once per session (several test modules probe a real
trained model; training one per test would dominate the suite's runtime).
"""

import numpy as np
import pytest
from hypothesis import settings

from szdetect import synth, training
from szdetect.imaging import window_to_sequence
from szdetect.montage import standard_1020
from szdetect.windowing import segment

settings.register_profile("suite", deadline=None, derandomize=True,
                          max_examples=50)
settings.load_profile("suite")


@pytest.fixture(scope="session")
def layout():
    return standard_1020()


@pytest.fixture(scope="session")
def tiny_corpus(layout):
    """Two synthetic patients, 15 min each, with recordings kept around.

    Returns (sequences, annotations, recordings) where recordings is a list
    of (recording_ref, Recording) pairs.
    """
    config = synth.SynthConfig(n_patients=2, hours_per_patient=0.25,
                               seizures_per_patient=3,
                               seizure_duration_s=(30.0, 45.0), seed=77)
    seqs, anns, recs = [], [], []
    for i in range(config.n_patients):
        rec, patient_anns = synth.generate_patient(config, i, layout)
        recs.append((synth.patient_id(i), rec))
        anns.extend(patient_anns)
        for w in segment(rec, patient_anns):
            seqs.append(window_to_sequence(w, layout))
    return seqs, anns, recs


@pytest.fixture(scope="session")
def tiny_detector(tiny_corpus):
    """A single-member detector trained on the tiny corpus."""
    seqs, _, _ = tiny_corpus
    config = training.TrainConfig(batch_size=32, max_epochs=5,
                                  patience_epochs=2, seed=3)
    ens, histories = training.train_detector(seqs, config, n_members=1,
                                             pretrain=True)
    return ens, histories


def sequence_predictor(ens):
    """predict(raw sequences) -> (n, 2) probabilities, like the CLI uses."""
    def predict(raw_seqs):
        pixels = np.stack([ens.normalizer.apply(s).images
                           for s in raw_seqs]).astype(np.float32)
        return training.ensemble_predict(ens, pixels)
    return predict
