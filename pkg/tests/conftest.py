import json

import numpy as np
import pytest

from ccgl.cohort import SynthSpec, split_cohort, synth_cohort


@pytest.fixture(scope="session")
def small_cohort():
    """16 patients, 8 rois, already split; enough for structural tests."""
    spec = SynthSpec(n_patients=16, n_rois=8, n_timepoints=160, n_sites=2)
    return split_cohort(synth_cohort(spec, 11), (0.7, 0.1, 0.2), 11)


@pytest.fixture()
def manifest_dir(tmp_path):
    """A valid two-patient manifest with CSV series on disk."""
    rng = np.random.default_rng(0)
    entries = []
    for i in range(2):
        values = rng.standard_normal((200, 16))
        csv = tmp_path / f"p{i}.csv"
        csv.write_text("\n".join(",".join(repr(float(v)) for v in row) for row in values) + "\n")
        entries.append(
            {
                "id": f"p{i}",
                "csv": csv.name,
                "pcd": [float(j) for j in range(7)],
                "label": i % 2,
                "site": "siteA",
            }
        )
    manifest = tmp_path / "manifest.json"
    manifest.write_text(json.dumps({"roi_count": 16, "patients": entries}))
    return tmp_path
