from pathlib import Path

import pytest

from jointscan.manifest import HandImageRecord
from jointscan.synth import SynthConfig, generate_dataset


@pytest.fixture(scope="session")
def synth_dataset(tmp_path_factory):
    """Small rendered dataset shared by the data-path tests."""
    config = SynthConfig(
        n_patients=8,
        images_per_patient=2,
        image_size=(96, 96),
        prevalence=0.3,
        marker_intensity=0.6,
        marker_radius_px=4,
        seed=11,
    )
    out_dir = tmp_path_factory.mktemp("dataset")
    manifest = generate_dataset(config, out_dir)
    return config, manifest, out_dir


def make_record(patient_id: str, week: int = 0, side: str = "right") -> HandImageRecord:
    """In-memory record for tests that never touch pixel files."""
    return HandImageRecord(
        image_path=Path(f"/virtual/{patient_id}_w{week}.png"),
        patient_id=patient_id,
        hand_side=side,
        capture_week=week,
        landmarks={i: (10 + 3 * i, 20) for i in range(14)},
        labels={0: 1, 1: 0},
    )
