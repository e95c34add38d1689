import pytest
import torch

from dualprompt.backbone import BackboneConfig
from dualprompt.model import DualPromptModel, ModelConfig
from dualprompt.phantom import PhantomSpec, generate_dataset
from dualprompt.training import load_cases


@pytest.fixture(scope="session")
def tiny_manifest(tmp_path_factory):
    """Four subjects, both regions, 16^3 volumes."""
    out = tmp_path_factory.mktemp("tiny")
    spec = PhantomSpec(modalities=("ct", "pet"), volume_dims=(16, 16, 16), n_subjects=4, seed=3)
    generate_dataset(spec, out)
    return out / "manifest.json"


@pytest.fixture(scope="session")
def tiny_cases(tiny_manifest):
    return load_cases(tiny_manifest)


def make_small_model(seed=0, patch=16, dtype=torch.float32):
    torch.manual_seed(seed)
    cfg = ModelConfig(backbone=BackboneConfig(patch_size=(patch,) * 3))
    return DualPromptModel(cfg).to(dtype)


# -- acceptance summary -----------------------------------------------------------

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (report.when != "call" and report.passed):
        return
    number, title = marker.args
    entry = _CRITERIA.setdefault(number, {"title": title, "status": "PASS", "details": []})
    if report.failed:
        entry["status"] = "FAIL"
    elif report.skipped and entry["status"] == "PASS":
        entry["status"] = "SKIP"
    if report.when == "call":
        entry["details"] += [f"{k}={v}" for k, v in item.user_properties]


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        entry = _CRITERIA[number]
        status = entry["status"]
        details = f" ({', '.join(entry['details'])})" if entry["details"] else ""
        terminalreporter.write_line(f"criterion {number}: {status} - {entry['title']}{details}")
