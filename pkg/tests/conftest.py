import pytest

from somnus import cnn, synthdata
from somnus.synthdata import DatabaseSpec

RATES_100 = {"EEG1": 100, "EEG2": 100, "EMG": 100, "EOG": 100}


def tiny_suite_specs():
    return [
        DatabaseSpec("A", n_recordings=5, epochs_per_recording=4, channel_rates=RATES_100,
                     mains_amplitude=5, noise_std=1, seed=1),
        DatabaseSpec("B", n_recordings=5, epochs_per_recording=4, amplitude_gain=2,
                     channel_rates={"EEG1": 128, "EEG2": 128, "EMG": 64, "EOG": 128},
                     mains_hz=60, mains_amplitude=5, noise_std=2, label_noise_p=0.1, seed=2),
        DatabaseSpec("C", n_recordings=6, epochs_per_recording=3, amplitude_gain=0.5,
                     channel_rates=RATES_100, ecg_coupling=0.05, seed=3),
        DatabaseSpec("D", n_recordings=5, epochs_per_recording=3, amplitude_gain=1.5,
                     channel_rates=RATES_100, seed=4),
    ]


def experiment_config(**kw):
    base = dict(name="tiny", num_blocks=1, initial_filters=2, max_epochs=2, batch_size=8, seed=5,
                # tiny TR sets may miss a stage, which the weighted loss refuses
                loss_weighting="UNWEIGHTED")
    base.update(kw)
    return cnn.ModelConfig(**base)


@pytest.fixture(scope="session")
def tiny_suite(tmp_path_factory):
    """Four small written databases; tests use the first three unless told otherwise."""
    root = tmp_path_factory.mktemp("suite")
    return [synthdata.write_database(s, root / s.dataset_id) for s in tiny_suite_specs()]


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
