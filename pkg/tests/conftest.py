"""Shared fixtures: small on-disk cohorts reused by the CLI and service tests
(session-scoped because generation does real PDE rollouts)."""

import pytest

from soctwin.imex import BioParams
from soctwin.store import write_checkpoint
from soctwin.synth import CohortSpec, gen_cohort

TRUTH = BioParams(D=0.12, k=0.07, alpha_ct=0.03, alpha_rt=0.035, beta_rt=0.0035)


@pytest.fixture(scope="session")
def small_cohort(tmp_path_factory):
    """3 AG patients, 32x32, fixed scan days; returns (dir, manifest)."""
    root = str(tmp_path_factory.mktemp("cohort"))
    spec = CohortSpec(kind="AG", n_patients=3, grid=(32, 32), seed=7,
                      scan_days=(0.0, 20.0, 40.0, 60.0))
    manifest = gen_cohort(spec, root)
    return root, manifest


@pytest.fixture(scope="session")
def clean_cohort(tmp_path_factory):
    """2 patients rendered with every corruption knob off and a shared known
    truth, so a truth checkpoint replays the generation exactly."""
    root = str(tmp_path_factory.mktemp("clean"))
    spec = CohortSpec(kind="AG", n_patients=2, grid=(32, 32), seed=3,
                      scan_days=(0.0, 20.0, 40.0), jitter_prob=0.0,
                      tissue_contrast=0.0, noise_sigma=0.0, bias_amplitude=0.0,
                      lowpass_fraction=1.0, truth_params=TRUTH)
    manifest = gen_cohort(spec, root)
    ckpt = str(tmp_path_factory.mktemp("ckpt") / "truth.json")
    write_checkpoint(ckpt, TRUTH)
    return root, manifest, ckpt
