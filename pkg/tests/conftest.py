import struct

import numpy as np
import pytest

NIFTI_CODES = {np.dtype("<u1"): 2, np.dtype("<i2"): 4, np.dtype("<i4"): 8, np.dtype("<f4"): 16, np.dtype("<f8"): 64}


def make_nifti(data_zyx, dtype="<f4", slope=1.0, inter=0.0, vox_offset=352, magic=b"n+1\x00",
               dim0=3, datatype=None, sizeof_hdr=348):
    """Hand-assemble a single-file NIfTI-1 payload; ``data_zyx`` is indexed (z, y, x)."""
    arr = np.asarray(data_zyx).astype(dtype)
    z, y, x = arr.shape
    hdr = bytearray(348)
    struct.pack_into("<i", hdr, 0, sizeof_hdr)
    struct.pack_into("<8h", hdr, 40, dim0, x, y, z, 1, 1, 1, 1)
    code = NIFTI_CODES[np.dtype(dtype)] if datatype is None else datatype
    struct.pack_into("<h", hdr, 70, code)
    struct.pack_into("<h", hdr, 72, np.dtype(dtype).itemsize * 8)
    struct.pack_into("<f", hdr, 108, vox_offset)
    struct.pack_into("<2f", hdr, 112, slope, inter)
    hdr[344:348] = magic
    pad = b"\x00" * (int(vox_offset) - 348)
    return bytes(hdr) + pad + arr.tobytes()


@pytest.fixture
def nifti_builder():
    return make_nifti


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
