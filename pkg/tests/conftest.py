"""Shared fixtures: tiny generated datasets for trainer and CLI tests."""

import numpy as np
import pytest

from segadapt import netpbm
from segadapt.masks import OracleParams, oversegment_oracle, save_mask_set
from segadapt.scenegen import gen_dataset, load_manifest


def build_masks(data_dir, out_dir, seed=0, **oracle_kwargs):
    """Runs the oversegmentation oracle over a dataset directory."""
    manifest = load_manifest(data_dir)
    params = OracleParams(**oracle_kwargs)
    out_dir.mkdir(parents=True, exist_ok=True)
    for k, files in enumerate(manifest.frames):
        instances = netpbm.read_pgm(data_dir / files.instances)
        mask_set = oversegment_oracle(instances, params, seed ^ k)
        save_mask_set(mask_set, out_dir / files.masks)
    return out_dir


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    """Small 24x24 datasets: syn, real, real-test, and real masks.

    Mask parameters guarantee at least two masks per frame (every instance
    kept whole and split), so full-mode steps never skip.
    """
    root = tmp_path_factory.mktemp("tiny")
    syn = root / "syn"
    real = root / "real"
    test = root / "test"
    masks = root / "masks"
    gen_dataset(6, "syn", syn, seed=10, class_count=4, height=24, width=24)
    gen_dataset(6, "real", real, seed=20, class_count=4, height=24, width=24)
    gen_dataset(4, "real", test, seed=30, class_count=4, height=24, width=24)
    build_masks(
        real,
        masks,
        seed=40,
        split_probability=1.0,
        keep_whole_probability=1.0,
        boundary_jitter_radius=1,
        spurious_background_masks=1,
        min_mask_pixels=4,
    )
    return {"syn": syn, "real": real, "test": test, "masks": masks, "root": root}


def small_train_kwargs():
    """Model/epoch settings small enough for unit tests."""
    return dict(
        epochs=2,
        frames_per_epoch=3,
        base_channels=4,
        fused_channels=8,
        hidden_channels=4,
        eval_last_k=2,
    )


@pytest.fixture()
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion at the end of the run."""
    import re

    outcomes: dict[int, str] = {}
    for status in ("passed", "failed", "error"):
        for report in terminalreporter.stats.get(status, []):
            m = re.search(r"test_acceptance\.py::test_criterion_(\d+)", report.nodeid)
            if m:
                n = int(m.group(1))
                verdict = "PASS" if status == "passed" else "FAIL"
                # keep the worst outcome if a test shows up twice
                if outcomes.get(n) != "FAIL":
                    outcomes[n] = verdict
    if outcomes:
        terminalreporter.write_sep("-", "acceptance criteria")
        for n in sorted(outcomes):
            terminalreporter.write_line(f"ACCEPTANCE {n} {outcomes[n]}")
