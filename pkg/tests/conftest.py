import numpy as np
import pytest

from codecast.ingestion import load_cohort as _load_cohort
from codecast.synthetic import GeneratorConfig, generate_cohort, write_icd_map


@pytest.fixture(scope="session")
def tiny_cohort_dir(tmp_path_factory):
    """A 16-patient synthetic cohort on disk, shared across tests."""
    out = tmp_path_factory.mktemp("tiny_cohort")
    config = GeneratorConfig(n_patients=16, n_templates=100, n_codes=50, seed=101)
    content, truth = generate_cohort(config)
    (out / "cohort.jsonl").write_text(content, encoding="utf-8")
    write_icd_map(truth, out / "icd_map.csv")
    (out / "ground_truth.json").write_text(truth.to_json(), encoding="utf-8")
    return out


@pytest.fixture(scope="session")
def tiny_patients(tiny_cohort_dir):
    return _load_cohort(
        tiny_cohort_dir / "cohort.jsonl", tiny_cohort_dir / "icd_map.csv"
    )


@pytest.fixture()
def rng():
    return np.random.default_rng(12345)
