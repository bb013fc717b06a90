import os
import shutil
import sys

import pytest

TESTS = os.path.dirname(os.path.abspath(__file__))
sys.path.insert(0, TESTS)
sys.path.insert(0, os.path.join(TESTS, "fixtures"))

import build  # noqa: E402

MINIENC_SRC = os.path.join(build.MINIENC, "src")
BZIP2_SRC = build.BZIP2

# filled by test_acceptance, printed at the end of the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        ok, name, detail = ACCEPTANCE[num]
        terminalreporter.write_line(f"criterion {num} {'PASS' if ok else 'FAIL'}: {name} ({detail})")


@pytest.fixture(scope="session")
def fixture_bins(tmp_path_factory):
    if shutil.which("gcc") is None:
        pytest.skip("gcc not available")
    return build.build_minienc(str(tmp_path_factory.mktemp("minienc")))


@pytest.fixture(scope="session")
def minienc_index():
    from inlinemap.source import index_functions
    return index_functions(MINIENC_SRC)


@pytest.fixture(scope="session")
def images(fixture_bins):
    from inlinemap.binary import load_binary
    return {k: load_binary(fixture_bins[k]) for k in ("basenc_O0", "basenc_O1", "basenc_O2", "basenc_O3")}


@pytest.fixture(scope="session")
def mappings(images, minienc_index):
    from inlinemap.mapping import build_function_mapping
    return {k: build_function_mapping(img.lines, minienc_index, img.functions) for k, img in images.items()}

